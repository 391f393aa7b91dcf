"""Integer-translation alignment of subtracted (DES) onto low-energy (LE) images.

The exported LE and DES rasters of one study disagree by a small, purely
translational offset (no rotation, scale or deformation, and never more
than 10 pixels per axis).  Alignment therefore searches integer (tx, ty)
only, scoring each candidate with histogram-based mutual information,
which is robust to the large intensity differences between the two
acquisitions.  The production search is two-level: a coarse 5-pixel grid
over +-10 pixels (25 points) followed by an exhaustive 5x5 unit-step
neighborhood around the coarse optimum.  A full exhaustive search over the
whole range is kept as a validation oracle.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import RegistrationError
from .grid import ImageGrid


@dataclass(frozen=True)
class Translation:
    """Integer pixel shift applied to the floating image."""

    tx: int
    ty: int

    def __post_init__(self):
        if not (isinstance(self.tx, (int, np.integer)) and isinstance(self.ty, (int, np.integer))):
            raise RegistrationError(f"translation must be integer pixels, got ({self.tx}, {self.ty})")
        object.__setattr__(self, "tx", int(self.tx))
        object.__setattr__(self, "ty", int(self.ty))


@dataclass(frozen=True)
class JointHistogram:
    """Joint intensity counts over the overlap of a reference/floating pair."""

    counts: np.ndarray  # (bins, bins) int64; reference axis first

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
            raise RegistrationError(f"joint histogram must be square with >= 2 bins, got {c.shape}")
        if (c < 0).any():
            raise RegistrationError("joint histogram has negative counts")
        object.__setattr__(self, "counts", c)

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class SearchParams:
    level1_range: int = 10
    level1_step: int = 5
    level2_halfwidth: int = 2
    bins: int = 64
    clamp_to_range: bool = True

    def __post_init__(self):
        if self.level1_range < 1 or self.level1_step < 1:
            raise RegistrationError("level-1 range and step must be positive")
        if self.level1_range % self.level1_step != 0:
            raise RegistrationError(
                f"level-1 step {self.level1_step} must divide range {self.level1_range}"
            )
        if self.level2_halfwidth < 1:
            raise RegistrationError("level-2 halfwidth must be >= 1")
        if self.bins < 2:
            raise RegistrationError("need at least 2 histogram bins")


@dataclass
class RegistrationResult:
    best: Translation
    mi: float
    level1_best: Translation
    evaluations: list[tuple[Translation, float]] = field(default_factory=list)


def apply_translation(
    flo: ImageGrid, t: Translation, ref_dims: tuple[int, int]
) -> tuple[ImageGrid, np.ndarray]:
    """Resample the floating image into the reference frame without interpolation.

    ``ref_dims`` is (height, width).  The output satisfies
    ``aligned[y, x] = flo[y - ty, x - tx]`` wherever that source pixel
    exists; the boolean mask marks those in-bounds positions.  An empty
    overlap is allowed (all-false mask).
    """
    H, W = ref_dims
    if H < 1 or W < 1:
        raise RegistrationError(f"reference dims must be positive, got {ref_dims}")
    hf, wf = flo.height, flo.width
    aligned = np.zeros((H, W), dtype=np.uint8)
    mask = np.zeros((H, W), dtype=bool)
    y0, y1 = max(0, t.ty), min(H, hf + t.ty)
    x0, x1 = max(0, t.tx), min(W, wf + t.tx)
    if y0 < y1 and x0 < x1:
        aligned[y0:y1, x0:x1] = flo.pixels[y0 - t.ty : y1 - t.ty, x0 - t.tx : x1 - t.tx]
        mask[y0:y1, x0:x1] = True
    return ImageGrid(aligned), mask


def joint_histogram(ref: ImageGrid, flo: ImageGrid, t: Translation, bins: int) -> JointHistogram:
    """Joint intensity histogram over the translation overlap.

    Intensity i lands in bin floor(i * bins / 256).  An empty overlap
    yields an all-zero histogram (callers rank empty-overlap candidates
    below every finite score).
    """
    if bins < 2:
        raise RegistrationError("need at least 2 histogram bins")
    aligned, mask = apply_translation(flo, t, (ref.height, ref.width))
    r = ref.pixels[mask].astype(np.int64)
    f = aligned.pixels[mask].astype(np.int64)
    rb = (r * bins) // 256
    fb = (f * bins) // 256
    counts = np.bincount(rb * bins + fb, minlength=bins * bins).reshape(bins, bins)
    return JointHistogram(counts)


def mutual_information(h: JointHistogram) -> float:
    """Mutual information of a joint histogram, in nats.

    MI = sum p(a,b) ln(p(a,b) / (p(a) p(b))) over cells with positive
    count; tiny negative rounding residue is floored at zero.
    """
    total = h.total
    if total == 0:
        raise RegistrationError("mutual information undefined for an empty histogram")
    p = h.counts / total
    pr = p.sum(axis=1)
    pf = p.sum(axis=0)
    outer = pr[:, None] * pf[None, :]
    nz = p > 0
    mi = float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))
    return max(mi, 0.0)


def _rank_key(t: Translation, mi: float) -> tuple:
    # Maximize MI; break ties toward the identity, then lexicographically.
    return (mi, -(abs(t.tx) + abs(t.ty)), -t.tx, -t.ty)


class _Scorer:
    """Caches per-translation MI so revisited candidates are evaluated once."""

    def __init__(self, ref: ImageGrid, flo: ImageGrid, bins: int):
        self.ref = ref
        self.flo = flo
        self.bins = bins
        self.cache: dict[tuple[int, int], float] = {}
        self.evaluations: list[tuple[Translation, float]] = []

    def score(self, t: Translation) -> float:
        key = (t.tx, t.ty)
        if key in self.cache:
            return self.cache[key]
        h = joint_histogram(self.ref, self.flo, t, self.bins)
        mi = mutual_information(h) if h.total > 0 else -math.inf
        self.cache[key] = mi
        self.evaluations.append((t, mi))
        return mi


def _pick_best(cands: list[tuple[Translation, float]]) -> tuple[Translation, float]:
    best_t, best_mi = cands[0]
    for t, mi in cands[1:]:
        if _rank_key(t, mi) > _rank_key(best_t, best_mi):
            best_t, best_mi = t, mi
    return best_t, best_mi


def register_two_level(ref: ImageGrid, flo: ImageGrid, p: SearchParams | None = None) -> RegistrationResult:
    """Coarse-grid search followed by a unit-step neighborhood refinement.

    Level 1 scans the step-spaced grid over +-level1_range per axis (25
    points with defaults); level 2 scans the (2*halfwidth+1)^2 unit offsets
    around the level-1 optimum, clamped back into the range when
    ``clamp_to_range`` is set.  Already-scored candidates are not
    re-evaluated.
    """
    p = p or SearchParams()
    scorer = _Scorer(ref, flo, p.bins)
    values = range(-p.level1_range, p.level1_range + 1, p.level1_step)
    level1 = []
    for ty in values:
        for tx in values:
            t = Translation(tx, ty)
            level1.append((t, scorer.score(t)))
    l1_best, _ = _pick_best(level1)

    hw = p.level2_halfwidth
    for dy in range(-hw, hw + 1):
        for dx in range(-hw, hw + 1):
            tx, ty = l1_best.tx + dx, l1_best.ty + dy
            if p.clamp_to_range:
                tx = max(-p.level1_range, min(p.level1_range, tx))
                ty = max(-p.level1_range, min(p.level1_range, ty))
            scorer.score(Translation(tx, ty))

    scored = [(t, mi) for t, mi in scorer.evaluations]
    best, best_mi = _pick_best(scored)
    if not math.isfinite(best_mi):
        raise RegistrationError("registration failed: no candidate translation overlaps")
    return RegistrationResult(best, best_mi, l1_best, scorer.evaluations)


def register_exhaustive(ref: ImageGrid, flo: ImageGrid, range_px: int = 10, bins: int = 64) -> RegistrationResult:
    """Score every integer translation in [-range_px, +range_px]^2.

    Serves as the validation oracle for the two-level search; uses the same
    tie-breaking.
    """
    if range_px < 1:
        raise RegistrationError("search range must be >= 1 pixel")
    scorer = _Scorer(ref, flo, bins)
    for ty in range(-range_px, range_px + 1):
        for tx in range(-range_px, range_px + 1):
            scorer.score(Translation(tx, ty))
    best, best_mi = _pick_best(scorer.evaluations)
    if not math.isfinite(best_mi):
        raise RegistrationError("registration failed: no candidate translation overlaps")
    return RegistrationResult(best, best_mi, best, scorer.evaluations)


CHECKER_TILE = 32


def emit_overlay(ref: ImageGrid, aligned: ImageGrid, style: str = "checkerboard") -> np.ndarray:
    """RGB composite of reference and aligned image for visual QA.

    ``checkerboard`` alternates 32-pixel tiles of the two inputs;
    ``redcyan`` puts the reference in the red channel and the aligned image
    in green+blue, so equal inputs render neutral gray.
    """
    if (ref.height, ref.width) != (aligned.height, aligned.width):
        raise RegistrationError(
            f"overlay inputs disagree: {ref.height}x{ref.width} vs {aligned.height}x{aligned.width}"
        )
    if style == "checkerboard":
        yy, xx = np.indices((ref.height, ref.width))
        board = ((yy // CHECKER_TILE) + (xx // CHECKER_TILE)) % 2 == 0
        gray = np.where(board, ref.pixels, aligned.pixels).astype(np.uint8)
        return np.repeat(gray[:, :, None], 3, axis=2)
    if style in ("redcyan", "red-cyan"):
        out = np.empty((ref.height, ref.width, 3), dtype=np.uint8)
        out[:, :, 0] = ref.pixels
        out[:, :, 1] = aligned.pixels
        out[:, :, 2] = aligned.pixels
        return out
    raise RegistrationError(f"unknown overlay style {style!r}")


def result_to_dict(res: RegistrationResult) -> dict:
    """JSON-ready form; empty-overlap scores serialize as null."""
    return {
        "tx": res.best.tx,
        "ty": res.best.ty,
        "mi": res.mi,
        "level1_best": [res.level1_best.tx, res.level1_best.ty],
        "evaluations": [
            [t.tx, t.ty, mi if math.isfinite(mi) else None] for t, mi in res.evaluations
        ],
    }


def write_result(res: RegistrationResult, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result_to_dict(res), fh, indent=1)
        fh.write("\n")


def read_result(path: str | os.PathLike) -> Translation:
    """Best translation stored in a registration JSON."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return Translation(int(data["tx"]), int(data["ty"]))
