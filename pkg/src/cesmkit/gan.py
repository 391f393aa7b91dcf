"""Adversarial translation objective as pure numerical kernels.

The objective couples two generators G: X->Y and F: Y->X with
discriminators D_Y and D_X:

* adversarial term per pairing:  mean(ln D(real)) + mean(ln(1 - D(fake)))
* cycle term: mean per-pixel L1 of F(G(x)) vs x plus G(F(y)) vs y
* identity term: mean per-pixel L1 of F(x) vs x plus G(y) vs y
* total = gan_g + gan_f + cycle_weight * cyc + identity_weight * ident

Default weights are 10 (cycle) and 5 (identity).  Scores are clamped to
[eps, 1-eps] before logs so a saturated discriminator cannot produce
infinities.  ``cyclegan_toy_step`` performs one alternating
discriminator-ascent / generator-descent update on desk-scale tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ToolkitError
from .translator import autodiff as ad
from .translator.unet import UNetConfig, UNetParams, forward_graph

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    cycle_weight: float = 10.0
    identity_weight: float = 5.0

    def __post_init__(self):
        if self.cycle_weight < 0 or self.identity_weight < 0:
            raise ToolkitError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossReport:
    gan_g: float
    gan_f: float
    cycle: float
    identity: float
    total: float


def _score_batch(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ToolkitError("score batch is empty")
    return np.clip(v, CLAMP_EPS, 1.0 - CLAMP_EPS)


def _image_batch(values, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.shape[0] == 0:
        raise ToolkitError(f"image batch {name} is empty")
    return v


def gan_loss(d_real, d_fake) -> float:
    """Adversarial value for one generator/discriminator pairing.

    Serves both pairings; the discriminator ascends this, its generator
    descends it.
    """
    r = _score_batch(d_real)
    f = _score_batch(d_fake)
    return float(np.mean(np.log(r)) + np.mean(np.log1p(-f)))


def cycle_loss(x, fgx, y, gfy) -> float:
    """Round-trip reconstruction penalty, mean per-pixel L1 both ways."""
    return _paired_l1(x, fgx, "x") + _paired_l1(y, gfy, "y")


def identity_loss(x, fx, y, gy) -> float:
    """Penalty for generators not acting as identity on their target domain."""
    return _paired_l1(x, fx, "x") + _paired_l1(y, gy, "y")


def _paired_l1(ref, out, name: str) -> float:
    a = _image_batch(ref, name)
    b = _image_batch(out, name)
    if a.shape != b.shape:
        raise ToolkitError(f"batch {name} shape mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(b - a).mean())


def total_loss(gan_g: float, gan_f: float, cyc: float, ident: float, w: LossWeights | None = None) -> LossReport:
    """Combine the four components; the report echoes each of them."""
    w = w or LossWeights()
    if cyc < 0:
        raise ToolkitError(f"cycle component must be non-negative, got {cyc}")
    if ident < 0:
        raise ToolkitError(f"identity component must be non-negative, got {ident}")
    total = gan_g + gan_f + w.cycle_weight * cyc + w.identity_weight * ident
    return LossReport(gan_g=gan_g, gan_f=gan_f, cycle=cyc, identity=ident, total=total)


# --- toy alternating training step --------------------------------------


class ToyDiscriminator:
    """Three strided 3x3 convolutions with a sigmoid head; one score per image."""

    def __init__(self, seed: int = 0, channels: int = 8, dtype=np.float32):
        rng = np.random.default_rng(seed)

        def uni(cin, cout):
            limit = np.sqrt(6.0 / (cin * 9 + cout * 9))
            return rng.uniform(-limit, limit, size=(cout, cin, 3, 3)).astype(dtype)

        self.params: dict[str, np.ndarray] = {
            "d1.w": uni(1, channels),
            "d1.b": np.zeros(channels, dtype=dtype),
            "d2.w": uni(channels, channels * 2),
            "d2.b": np.zeros(channels * 2, dtype=dtype),
            "d3.w": uni(channels * 2, 1),
            "d3.b": np.zeros(1, dtype=dtype),
        }

    def scores(self, ptensors: dict[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
        h = ad.relu(ad.conv2d(x, ptensors["d1.w"], ptensors["d1.b"], stride=2, padding=1))
        h = ad.relu(ad.conv2d(h, ptensors["d2.w"], ptensors["d2.b"], stride=2, padding=1))
        h = ad.conv2d(h, ptensors["d3.w"], ptensors["d3.b"], stride=2, padding=1)
        pooled = ad.spatial_mean(h)  # (N, 1)
        return ad.sigmoid(pooled)


class GeneratorModel:
    """Translator network bundled with its parameters for the toy loop."""

    def __init__(self, cfg: UNetConfig, params: UNetParams):
        self.cfg = cfg
        self.params = params

    def apply(self, ptensors: dict[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
        return forward_graph(ptensors, self.cfg, x.data, mode="eval")


def _gan_term(scores_real: ad.Tensor, scores_fake: ad.Tensor) -> ad.Tensor:
    r = ad.clamp(scores_real, CLAMP_EPS, 1.0 - CLAMP_EPS)
    f = ad.clamp(scores_fake, CLAMP_EPS, 1.0 - CLAMP_EPS)
    one = ad.tensor(np.ones_like(f.data))
    return ad.add(ad.mean_all(ad.log(r)), ad.mean_all(ad.log(ad.sub(one, f))))


def _l1_term(a: ad.Tensor, ref: np.ndarray) -> ad.Tensor:
    return ad.l1_loss(a, ref)


def _wrap(params: dict[str, np.ndarray], requires_grad: bool) -> dict[str, ad.Tensor]:
    return {k: ad.tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _sgd(params: dict[str, np.ndarray], ptensors: dict[str, ad.Tensor], lr: float, sign: float):
    for k in params:
        g = ptensors[k].grad
        if g is not None:
            params[k] = (params[k] + sign * lr * g).astype(params[k].dtype)


def cyclegan_toy_step(
    g: GeneratorModel,
    f: GeneratorModel,
    d_x: ToyDiscriminator,
    d_y: ToyDiscriminator,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    lr: float,
    weights: LossWeights | None = None,
) -> LossReport:
    """One alternating update: discriminators ascend, then generators descend.

    ``batch_x``/``batch_y`` are (N, 1, H, W) arrays in [0, 1] with H, W at
    most 64.  Parameters of all four models are updated in place with
    plain gradient steps; the returned report holds the losses computed
    before any update.  Deterministic (generators run without dropout).
    """
    weights = weights or LossWeights()
    bx = np.asarray(batch_x, dtype=np.float32)
    by = np.asarray(batch_y, dtype=np.float32)
    for name, b in (("x", bx), ("y", by)):
        if b.ndim != 4 or b.shape[2] > 64 or b.shape[3] > 64:
            raise ToolkitError(f"batch {name} must be (N, 1, H<=64, W<=64), got {b.shape}")

    report = _evaluate_report(g, f, d_x, d_y, bx, by, weights)
    for comp, value in (
        ("gan_g", report.gan_g), ("gan_f", report.gan_f),
        ("cycle", report.cycle), ("identity", report.identity), ("total", report.total),
    ):
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss component {comp}")

    # Discriminator ascent: generator outputs are detached constants.
    gpt = _wrap(g.params, False, "g.")
    fpt = _wrap(f.params, False, "f.")
    fake_y = g.apply(gpt, ad.tensor(bx)).data
    fake_x = f.apply(fpt, ad.tensor(by)).data
    for disc, real, fake in ((d_y, by, fake_y), (d_x, bx, fake_x)):
        dpt = _wrap(disc.params, True, "d.")
        loss = _gan_term(disc.scores(dpt, ad.tensor(real)), disc.scores(dpt, ad.tensor(fake)))
        loss.backward()
        _sgd(disc.params, dpt, "d.", lr, +1.0)

    # Generator descent on the full objective with discriminators frozen.
    gpt = _wrap(g.params, True, "g.")
    fpt = _wrap(f.params, True, "f.")
    dxt = _wrap(d_x.params, False, "dx.")
    dyt = _wrap(d_y.params, False, "dy.")
    x_t, y_t = ad.tensor(bx), ad.tensor(by)
    gx = g.apply(gpt, x_t)
    fy = f.apply(fpt, y_t)
    fgx = f.apply(fpt, gx)
    gfy = g.apply(gpt, fy)
    fx = f.apply(fpt, x_t)
    gy = g.apply(gpt, y_t)
    adv = ad.add(
        _gan_term(d_y.scores(dyt, y_t), d_y.scores(dyt, gx)),
        _gan_term(d_x.scores(dxt, x_t), d_x.scores(dxt, fy)),
    )
    cyc = ad.add(_l1_term(fgx, bx), _l1_term(gfy, by))
    ident = ad.add(_l1_term(fx, bx), _l1_term(gy, by))
    total = ad.add(
        adv,
        ad.add(
            ad.mul(cyc, ad.tensor(np.float32(weights.cycle_weight))),
            ad.mul(ident, ad.tensor(np.float32(weights.identity_weight))),
        ),
    )
    total.backward()
    _sgd(g.params, gpt, "g.", lr, -1.0)
    _sgd(f.params, fpt, "f.", lr, -1.0)
    return report


def _evaluate_report(g, f, d_x, d_y, bx, by, weights) -> LossReport:
    gpt = _wrap(g.params, False, "g.")
    fpt = _wrap(f.params, False, "f.")
    dxt = _wrap(d_x.params, False, "dx.")
    dyt = _wrap(d_y.params, False, "dy.")
    x_t, y_t = ad.tensor(bx), ad.tensor(by)
    gx = g.apply(gpt, x_t).data
    fy = f.apply(fpt, y_t).data
    fgx = f.apply(fpt, ad.tensor(gx)).data
    gfy = g.apply(gpt, ad.tensor(fy)).data
    fx = f.apply(fpt, x_t).data
    gy = g.apply(gpt, y_t).data
    gg = gan_loss(d_y.scores(dyt, y_t).data, d_y.scores(dyt, ad.tensor(gx)).data)
    gf = gan_loss(d_x.scores(dxt, x_t).data, d_x.scores(dxt, ad.tensor(fy)).data)
    cyc = cycle_loss(bx, fgx, by, gfy)
    ident = identity_loss(bx, fx, by, gy)
    return total_loss(gg, gf, cyc, ident, weights)
