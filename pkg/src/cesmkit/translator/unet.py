"""Encoder-decoder translator network with skip connections.

Encoder level l carries ``base_channels * 2**l`` channels and applies two
3x3 conv+ReLU blocks; levels are joined by 2x2 max pooling on the way down
and nearest-neighbor upsampling plus channel concatenation on the way up.
A 1x1 convolution and a sigmoid produce the single-channel output, so the
spatial size of the output always equals the input.  Dropout (inverted,
train mode only) sits after the bottleneck block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericError, ToolkitError
from . import autodiff as ad

UNetParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 8
    depth: int = 3
    dropout_p: float = 0.2
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if not 2 <= self.depth <= 7:
            raise ToolkitError(f"depth must be in 2..7, got {self.depth}")
        if self.base_channels < 1:
            raise ToolkitError(f"base_channels must be positive, got {self.base_channels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ToolkitError(f"dropout must be in [0, 1), got {self.dropout_p}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ToolkitError("channel counts must be positive")

    @property
    def pool_factor(self) -> int:
        return 2 ** (self.depth - 1)

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2**level)


def _layer_plan(cfg: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_ch, out_ch, kernel) for every conv, in parameter order."""
    plan = []
    prev = cfg.in_channels
    for lvl in range(cfg.depth):
        ch = cfg.level_channels(lvl)
        plan.append((f"enc{lvl}.conv1", prev, ch, 3))
        plan.append((f"enc{lvl}.conv2", ch, ch, 3))
        prev = ch
    for lvl in range(cfg.depth - 2, -1, -1):
        ch = cfg.level_channels(lvl)
        plan.append((f"dec{lvl}.conv1", prev + ch, ch, 3))
        plan.append((f"dec{lvl}.conv2", ch, ch, 3))
        prev = ch
    plan.append(("out", prev, cfg.out_channels, 1))
    return plan


def init_params(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetParams:
    """Seeded uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: UNetParams = {}
    for name, cin, cout, k in _layer_plan(cfg):
        fan_in = cin * k * k
        fan_out = cout * k * k
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.w"] = rng.uniform(-limit, limit, size=(cout, cin, k, k)).astype(dtype)
        params[f"{name}.b"] = np.zeros(cout, dtype=dtype)
    return params


def _check_input(cfg: UNetConfig, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ToolkitError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
    f = cfg.pool_factor
    if x.shape[2] % f or x.shape[3] % f:
        raise ToolkitError(
            f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by {f} (depth {cfg.depth})"
        )


def _check_params(params: UNetParams, cfg: UNetConfig) -> None:
    expected = [f"{n}.{s}" for n, _, _, _ in _layer_plan(cfg) for s in ("w", "b")]
    if list(params.keys()) != expected:
        raise ToolkitError("parameter collection does not match the config's layer plan")
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite parameter {name}")


def forward_graph(
    ptensors: dict[str, ad.Tensor],
    cfg: UNetConfig,
    x: np.ndarray,
    mode: str = "eval",
    seed: int = 0,
    capture: dict | None = None,
) -> ad.Tensor:
    """Build the forward graph from parameter tensors; returns the output node."""
    if mode not in ("train", "eval"):
        raise ToolkitError(f"mode must be train or eval, got {mode!r}")
    rng = np.random.default_rng(seed)

    def block(h, name):
        h = ad.relu(ad.conv2d(h, ptensors[f"{name}.conv1.w"], ptensors[f"{name}.conv1.b"], padding=1))
        h = ad.relu(ad.conv2d(h, ptensors[f"{name}.conv2.w"], ptensors[f"{name}.conv2.b"], padding=1))
        if not np.isfinite(h.data).all():
            raise NumericError(f"non-finite activations after {name}")
        return h

    h = ad.tensor(x)
    skips = []
    for lvl in range(cfg.depth):
        if lvl > 0:
            h = ad.maxpool2(h)
        h = block(h, f"enc{lvl}")
        if lvl < cfg.depth - 1:
            skips.append(h)
    if mode == "train" and cfg.dropout_p > 0:
        h = ad.dropout(h, cfg.dropout_p, rng)
    if capture is not None:
        capture["bottleneck"] = h.data
    for lvl in range(cfg.depth - 2, -1, -1):
        h = ad.concat([ad.upsample2(h), skips[lvl]], axis=1)
        h = block(h, f"dec{lvl}")
    out = ad.sigmoid(ad.conv2d(h, ptensors["out.w"], ptensors["out.b"]))
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite activations after output layer")
    return out


def unet_forward(
    params: UNetParams,
    cfg: UNetConfig,
    x: np.ndarray,
    mode: str = "eval",
    seed: int = 0,
    capture: dict | None = None,
) -> np.ndarray:
    """Forward pass from plain arrays; no gradients retained."""
    _check_input(cfg, x)
    _check_params(params, cfg)
    ptensors = {k: ad.tensor(v) for k, v in params.items()}
    return forward_graph(ptensors, cfg, x, mode=mode, seed=seed, capture=capture).data


def loss_and_grads(
    params: UNetParams,
    cfg: UNetConfig,
    x: np.ndarray,
    target: np.ndarray,
    loss: str = "L1",
    seed: int = 0,
    mode: str = "train",
) -> tuple[float, dict[str, np.ndarray]]:
    """Translation loss and reverse-mode gradients for every parameter.

    ``loss`` is "L1" (mean absolute error, subgradient 0 at zeros) or "L2"
    (mean squared error), averaged over all batch elements and pixels.
    """
    _check_input(cfg, x)
    _check_params(params, cfg)
    ptensors = {k: ad.tensor(v, requires_grad=True) for k, v in params.items()}
    out = forward_graph(ptensors, cfg, x, mode=mode, seed=seed)
    if target.shape != out.data.shape:
        raise ToolkitError(f"target shape {target.shape} != output shape {out.data.shape}")
    if loss == "L1":
        loss_node = ad.l1_loss(out, target)
    elif loss == "L2":
        loss_node = ad.l2_loss(out, target)
    else:
        raise ToolkitError(f"loss must be L1 or L2, got {loss!r}")
    if not np.isfinite(loss_node.data):
        raise NumericError("non-finite loss value")
    loss_node.backward()
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in ptensors.items()
    }
    return loss_node.item(), grads
