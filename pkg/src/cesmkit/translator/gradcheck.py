"""Finite-difference verification of every autodiff operation.

Each op is wrapped in a scalar objective (a fixed random projection of the
op output) and its analytic gradients are compared against 64-bit central
differences.  Inputs for kinked ops (ReLU, max pooling, L1) are resampled
until every element sits safely away from the kink, so the quadratic
truncation error of the central difference dominates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-4
REL_TOL = 1e-4
# Below this magnitude a relative comparison is meaningless against the
# ~1e-8 roundoff floor of the central difference; fall back to absolute.
ABS_FLOOR = 1e-6


@dataclass
class OpCheck:
    name: str
    max_rel_err: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= REL_TOL


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    out = np.zeros_like(diff)
    big = scale >= ABS_FLOOR
    out[big] = diff[big] / scale[big]
    out[~big] = np.where(diff[~big] <= 1e-9, 0.0, 1.0)
    return float(out.max()) if out.size else 0.0


def finite_diff(fn, arrays: list[np.ndarray], step: float = FD_STEP) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``fn`` w.r.t. each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn()
            flat[i] = orig - step
            fm = fn()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def _analytic(build, arrays: list[np.ndarray]) -> list[np.ndarray]:
    leaves = [ad.tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    loss.backward()
    return [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]


def _check(build, arrays: list[np.ndarray]) -> float:
    analytic = _analytic(build, arrays)
    numeric = finite_diff(lambda: _analytic_value(build, arrays), arrays)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def _analytic_value(build, arrays) -> float:
    leaves = [ad.tensor(a) for a in arrays]
    return build(leaves).item()


def _proj(rng, shape) -> np.ndarray:
    # Strictly positive weights keep output gradients O(1).
    return rng.uniform(0.5, 1.5, size=shape)


def _away_from(rng, shape, forbid, gap, low=-1.0, high=1.0) -> np.ndarray:
    """Uniform sample with every element at least ``gap`` from ``forbid``."""
    while True:
        a = rng.uniform(low, high, size=shape)
        if np.abs(a - forbid).min() > gap:
            return a


def _distinct_pool_input(rng, shape, gap=1e-2) -> np.ndarray:
    n, c, h, w = shape
    while True:
        a = rng.uniform(-1.0, 1.0, size=shape)
        win = a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        win = np.sort(win, axis=1)
        if np.diff(win, axis=1).min() > gap:
            return a


def _scenarios(rng):
    scen = []

    u = ad.tensor(_proj(rng, (2, 4, 6, 6)))
    scen.append(
        (
            "conv3x3",
            lambda lv: ad.mean_all(ad.mul(ad.conv2d(lv[0], lv[1], lv[2], padding=1), u)),
            [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)) * 0.5,
             rng.standard_normal(4) * 0.5],
        )
    )
    u1 = ad.tensor(_proj(rng, (2, 4, 5, 5)))
    scen.append(
        (
            "conv1x1",
            lambda lv: ad.mean_all(ad.mul(ad.conv2d(lv[0], lv[1], lv[2]), u1)),
            [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 1, 1)) * 0.5,
             rng.standard_normal(4) * 0.5],
        )
    )
    ur = ad.tensor(_proj(rng, (3, 4, 5)))
    scen.append(
        (
            "relu",
            lambda lv: ad.mean_all(ad.mul(ad.relu(lv[0]), ur)),
            [_away_from(rng, (3, 4, 5), 0.0, 5e-3)],
        )
    )
    um = ad.tensor(_proj(rng, (2, 3, 3, 3)))
    scen.append(
        (
            "maxpool",
            lambda lv: ad.mean_all(ad.mul(ad.maxpool2(lv[0]), um)),
            [_distinct_pool_input(rng, (2, 3, 6, 6))],
        )
    )
    uu = ad.tensor(_proj(rng, (2, 3, 8, 8)))
    scen.append(
        (
            "upsample",
            lambda lv: ad.mean_all(ad.mul(ad.upsample2(lv[0]), uu)),
            [rng.standard_normal((2, 3, 4, 4))],
        )
    )
    uc = ad.tensor(_proj(rng, (1, 5, 4, 4)))
    scen.append(
        (
            "concat",
            lambda lv: ad.mean_all(ad.mul(ad.concat([lv[0], lv[1]], axis=1), uc)),
            [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 4, 4))],
        )
    )
    us = ad.tensor(_proj(rng, (3, 4)))
    scen.append(
        (
            "sigmoid",
            lambda lv: ad.mean_all(ad.mul(ad.sigmoid(lv[0]), us)),
            [rng.standard_normal((3, 4)) * 2.0],
        )
    )
    t1 = rng.uniform(-1.0, 1.0, size=(2, 3, 4, 4))
    scen.append(
        (
            "l1_loss",
            lambda lv: ad.l1_loss(lv[0], t1),
            [t1 + _away_from(rng, (2, 3, 4, 4), 0.0, 5e-3)],
        )
    )
    t2 = rng.uniform(-1.0, 1.0, size=(2, 3, 4, 4))
    scen.append(
        (
            "l2_loss",
            lambda lv: ad.l2_loss(lv[0], t2),
            [rng.uniform(-1.0, 1.0, size=(2, 3, 4, 4))],
        )
    )
    return scen


OP_NAMES = [
    "conv3x3", "conv1x1", "relu", "maxpool", "upsample",
    "concat", "sigmoid", "l1_loss", "l2_loss",
]


def run_gradcheck(trials: int = 20, seed: int = 0) -> list[OpCheck]:
    """Run the per-op finite-difference suite; one OpCheck per op."""
    worst = {name: 0.0 for name in OP_NAMES}
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for name, build, arrays in _scenarios(rng):
            err = _check(build, arrays)
            worst[name] = max(worst[name], err)
    return [OpCheck(name, worst[name], trials) for name in OP_NAMES]
