"""Training loops and inference for the LE-to-DES translator.

Two desk-scale regimes are covered: plain paired pre-training (per-pixel
L1 by default, L2 optional) and end-to-end training where the translator
feeds a small convolutional classification head and only the
cross-entropy of the head is backpropagated.  Images travel as uint8
grids; training normalizes to [0, 1] and inference denormalizes back.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..errors import DivergenceError, ToolkitError
from ..grid import ImageGrid
from . import autodiff as ad
from .optim import AdamState, adam_step, init_adam
from .unet import UNetConfig, UNetParams, forward_graph, init_params, loss_and_grads, unet_forward

LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5)  # preferred sweep values


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    loss: str = "L1"

    def __post_init__(self):
        if self.lr <= 0:
            raise ToolkitError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ToolkitError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ToolkitError(f"batch size must be >= 1, got {self.batch_size}")
        if self.loss not in ("L1", "L2"):
            raise ToolkitError(f"loss must be L1 or L2, got {self.loss!r}")


def _as_plane(img) -> np.ndarray:
    px = img.pixels if isinstance(img, ImageGrid) else np.asarray(img)
    if px.ndim != 2:
        raise ToolkitError(f"expected 2-D image, got shape {px.shape}")
    if px.dtype == np.uint8:
        return px.astype(np.float32) / np.float32(255.0)
    return px.astype(np.float32)


def pairs_to_batches(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Stack (LE, DES) pairs into normalized (N, 1, H, W) arrays."""
    if not pairs:
        raise ToolkitError("need at least one training pair")
    xs = np.stack([_as_plane(le)[None] for le, _ in pairs])
    ys = np.stack([_as_plane(des)[None] for _, des in pairs])
    if xs.shape != ys.shape:
        raise ToolkitError(f"LE/DES stacks disagree: {xs.shape} vs {ys.shape}")
    return xs, ys


def train_translator(
    pairs,
    cfg: UNetConfig,
    tc: TrainConfig,
    val_pairs=None,
) -> tuple[UNetParams, list[tuple[float, float]]]:
    """Train the translator on (LE, DES) pairs; returns best-validation params.

    The history holds one (train_loss, val_loss) tuple per epoch; the
    parameters returned are the snapshot with the lowest validation loss
    (validation falls back to the training pairs when none are given).
    Fully deterministic for a given seed.
    """
    x_train, y_train = pairs_to_batches(pairs)
    if val_pairs:
        x_val, y_val = pairs_to_batches(val_pairs)
    else:
        x_val, y_val = x_train, y_train

    params = init_params(cfg, seed=tc.seed)
    state = init_adam(params)
    shuffle_rng = np.random.default_rng([_nn(tc.seed), 1])
    dropout_rng = np.random.default_rng([_nn(tc.seed), 2])

    n = x_train.shape[0]
    history: list[tuple[float, float]] = []
    best_val = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    for epoch in range(tc.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            sel = order[start : start + tc.batch_size]
            step_seed = int(dropout_rng.integers(2**63))
            loss, grads = loss_and_grads(
                params, cfg, x_train[sel], y_train[sel], loss=tc.loss, seed=step_seed
            )
            if not np.isfinite(loss):
                raise DivergenceError(f"training diverged at epoch {epoch}")
            total += loss * len(sel)
            params, state = adam_step(params, grads, state, tc.lr)
        train_loss = total / n
        val_loss = eval_loss(params, cfg, x_val, y_val, tc.loss)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"validation loss diverged at epoch {epoch}")
        history.append((float(train_loss), float(val_loss)))
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
    return best_params, history


def eval_loss(params: UNetParams, cfg: UNetConfig, x: np.ndarray, y: np.ndarray, loss: str) -> float:
    out = unet_forward(params, cfg, x, mode="eval")
    diff = out - y
    if loss == "L1":
        return float(np.abs(diff).mean())
    return float((diff * diff).mean())


def infer_translator(params: UNetParams, cfg: UNetConfig, le: ImageGrid) -> ImageGrid:
    """Translate one LE image to a virtual DES image.

    Inputs whose dims are not divisible by the pooling factor are
    reflect-padded up to the next multiple and cropped back afterwards.
    """
    f = cfg.pool_factor
    px = _as_plane(le)
    H, W = px.shape
    ph = (-H) % f
    pw = (-W) % f
    if ph or pw:
        px = np.pad(px, ((0, ph), (0, pw)), mode="reflect")
    out = unet_forward(params, cfg, px[None, None], mode="eval")[0, 0, :H, :W]
    return ImageGrid(np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8))


def _nn(seed: int) -> int:
    return seed & 0x7FFFFFFFFFFFFFFF


# --- end-to-end regime ---------------------------------------------------

HeadParams = dict[str, np.ndarray]


def init_head(seed: int = 0, channels: int = 8, dtype=np.float32) -> HeadParams:
    """Two conv layers plus a linear readout over pooled features."""
    rng = np.random.default_rng(seed)

    def uni(cin, cout, k):
        limit = np.sqrt(6.0 / (cin * k * k + cout * k * k))
        return rng.uniform(-limit, limit, size=(cout, cin, k, k)).astype(dtype)

    c2 = channels * 2
    return {
        "head1.w": uni(1, channels, 3),
        "head1.b": np.zeros(channels, dtype=dtype),
        "head2.w": uni(channels, c2, 3),
        "head2.b": np.zeros(c2, dtype=dtype),
        "fc.w": rng.uniform(-np.sqrt(6.0 / (c2 + 2)), np.sqrt(6.0 / (c2 + 2)), size=(c2, 2)).astype(dtype),
        "fc.b": np.zeros(2, dtype=dtype),
    }


def head_logits(ptensors: dict[str, ad.Tensor], h: ad.Tensor) -> ad.Tensor:
    h = ad.relu(ad.conv2d(h, ptensors["head1.w"], ptensors["head1.b"], padding=1))
    h = ad.maxpool2(h)
    h = ad.relu(ad.conv2d(h, ptensors["head2.w"], ptensors["head2.b"], padding=1))
    feats = ad.spatial_mean(h)
    return ad.add(ad.matmul(feats, ptensors["fc.w"]), ptensors["fc.b"])


def train_end2end(
    samples,
    cfg: UNetConfig,
    tc: TrainConfig,
) -> tuple[UNetParams, HeadParams, list[float]]:
    """Jointly train translator and toy classifier head on (LE, label) pairs.

    Only the classification cross-entropy flows back through both; returns
    the translator and head parameters plus the per-epoch loss history.
    """
    if not samples:
        raise ToolkitError("need at least one labeled sample")
    x = np.stack([_as_plane(img)[None] for img, _ in samples])
    labels = np.asarray([int(lbl) for _, lbl in samples], dtype=np.int64)
    if set(labels.tolist()) - {0, 1}:
        raise ToolkitError("labels must be 0 or 1")

    params = init_params(cfg, seed=tc.seed)
    head = init_head(seed=tc.seed + 1)
    state = init_adam({**params, **head})
    shuffle_rng = np.random.default_rng([_nn(tc.seed), 3])
    dropout_rng = np.random.default_rng([_nn(tc.seed), 4])

    n = x.shape[0]
    history: list[float] = []
    for epoch in range(tc.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            sel = order[start : start + tc.batch_size]
            step_seed = int(dropout_rng.integers(2**63))
            joint = {**params, **head}
            ptensors = {k: ad.tensor(v, requires_grad=True) for k, v in joint.items()}
            virt = forward_graph(ptensors, cfg, x[sel], mode="train", seed=step_seed)
            logits = head_logits(ptensors, virt)
            loss = ad.cross_entropy(logits, labels[sel])
            if not np.isfinite(loss.data):
                raise DivergenceError(f"end-to-end training diverged at epoch {epoch}")
            loss.backward()
            grads = {
                k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in ptensors.items()
            }
            joint, state = adam_step(joint, grads, state, tc.lr)
            params = {k: joint[k] for k in params}
            head = {k: joint[k] for k in head}
            total += loss.item() * len(sel)
        history.append(total / n)
    return params, head, history


def snapshot(params: UNetParams) -> UNetParams:
    return copy.deepcopy(params)
