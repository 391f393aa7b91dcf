"""Classification dataset construction: masks, crops, splits, augmentation.

Crops are 224x224 windows cut at identical coordinates from the LE image
and the aligned DES image (and the denoised LE when present), labeled
two-class.  Patients are split 70/15/15 across train/validation/test with
hard patient disjointness and approximate class stratification.  The
augmentation transforms are flips, quarter rotations, sharpness and
autocontrast, always applied with one shared spec per LE/DES pair so pixel
correspondence survives.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import MaskError, SamplingError, SplitInfeasibleError, ToolkitError
from .grid import ImageGrid
from .ingest import Label, Side, StudyKey, View

CROP_SIZE_DEFAULT = 224


class SplitSet(str, Enum):
    TRAIN = "train"
    VALIDATION = "val"
    TEST = "test"


@dataclass(frozen=True)
class CropSpec:
    """One crop: center in the LE frame, window size and class label."""

    center: tuple[int, int]  # (x, y)
    size: int = CROP_SIZE_DEFAULT
    label: Label = Label.NON_MALIGNANT
    source: StudyKey | None = None

    def __post_init__(self):
        if self.size <= 0:
            raise ToolkitError(f"crop size must be positive, got {self.size}")
        if self.label not in (Label.NON_MALIGNANT, Label.MALIGNANT):
            raise ToolkitError(f"crop label must be a class label, got {self.label}")


@dataclass(frozen=True)
class SplitManifest:
    assignment: dict[int, SplitSet]
    fractions: tuple[float, float, float]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "fractions": list(self.fractions),
                "assignment": {str(pid): s.value for pid, s in sorted(self.assignment.items())},
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        data = json.loads(text)
        return cls(
            assignment={int(pid): SplitSet(s) for pid, s in data["assignment"].items()},
            fractions=tuple(data["fractions"]),
            seed=int(data["seed"]),
        )


@dataclass(frozen=True)
class TransformSpec:
    """Fully-determined augmentation: no hidden randomness at apply time."""

    rot_quarter: int = 0
    hflip: bool = False
    vflip: bool = False
    sharpness_factor: float | None = None
    autocontrast: bool = False

    def __post_init__(self):
        if self.rot_quarter not in (0, 1, 2, 3):
            raise ToolkitError(f"rot_quarter must be in 0..3, got {self.rot_quarter}")
        if self.sharpness_factor is not None and not 0.5 <= self.sharpness_factor <= 2.0:
            raise ToolkitError(f"sharpness factor outside [0.5, 2.0]: {self.sharpness_factor}")


def breast_mask(img: ImageGrid) -> np.ndarray:
    """Foreground tissue mask: Otsu threshold, then largest 8-connected blob."""
    hist = np.bincount(img.pixels.ravel(), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        raise MaskError("uniform image: no foreground/background separation")
    thresh = _otsu_threshold(hist)
    fg = img.pixels > thresh
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _otsu_threshold(hist: np.ndarray) -> int:
    """Threshold maximizing between-class variance (first maximum on ties)."""
    total = hist.sum()
    p = hist / total
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(256))
    mu_t = mu[-1]
    omega0 = omega[:-1]
    omega1 = 1.0 - omega0
    valid = (omega0 > 0) & (omega1 > 0)
    sigma_b = np.zeros(255)
    num = (mu_t * omega0 - mu[:-1]) ** 2
    sigma_b[valid] = num[valid] / (omega0[valid] * omega1[valid])
    return int(np.argmax(sigma_b))


def crop_window(center: tuple[int, int], size: int, dims: tuple[int, int]) -> tuple[int, int]:
    """Top-left (x0, y0) of the size-window around center, shifted inside bounds."""
    H, W = dims
    if H < size or W < size:
        raise ToolkitError(f"image {H}x{W} smaller than crop size {size}")
    cx, cy = center
    x0 = min(max(cx - size // 2, 0), W - size)
    y0 = min(max(cy - size // 2, 0), H - size)
    return x0, y0


def extract_crop(img: ImageGrid, spec: CropSpec) -> ImageGrid:
    """Cut the spec window; near edges the window shifts, it never pads.

    The window coordinates depend only on (center, size, dims), so applying
    the same spec to the LE and aligned DES images yields matching crops.
    """
    x0, y0 = crop_window(spec.center, spec.size, (img.height, img.width))
    return ImageGrid(img.pixels[y0 : y0 + spec.size, x0 : x0 + spec.size].copy())


def sample_normal_crop(
    img: ImageGrid,
    mask: np.ndarray,
    rng_seed: int,
    min_tissue: float = 0.5,
    size: int = CROP_SIZE_DEFAULT,
) -> CropSpec:
    """Uniformly sample a crop center whose window is mostly breast tissue.

    Deterministic given the seed; gives up after 1000 attempts.
    """
    if mask.shape != (img.height, img.width):
        raise ToolkitError("mask dims do not match image")
    rng = np.random.default_rng(rng_seed)
    for _ in range(1000):
        cx = int(rng.integers(img.width))
        cy = int(rng.integers(img.height))
        x0, y0 = crop_window((cx, cy), size, (img.height, img.width))
        coverage = mask[y0 : y0 + size, x0 : x0 + size].mean()
        if coverage >= min_tissue:
            return CropSpec(center=(cx, cy), size=size, label=Label.NON_MALIGNANT)
    raise SamplingError(
        f"no window reached {min_tissue:.0%} tissue coverage in 1000 attempts"
    )


# Split sizes may legitimately miss the targets on lumpy populations (one
# patient's crops are indivisible); beyond this many percentage points we
# report the split as infeasible instead of returning it.
SPLIT_TOLERANCE_POINTS = 10.0


def stratified_patient_split(
    records: list[tuple[int, Label]],
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> SplitManifest:
    """Assign whole patients to train/val/test, stratified by class.

    ``records`` holds one (patient_id, label) entry per crop.  Patients are
    taken in order of descending crop count (ties shuffled by seed) and
    greedily routed to the set with the largest remaining deficit, where a
    set's deficit combines how many crops it still needs overall with a
    doubled per-class term for the classes this patient carries (the class
    term keeps the sets stratified, the size term keeps small sets from
    starving the large one on coarse populations).  Patient disjointness is
    structural; set and class proportions are approximate.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ToolkitError(f"fractions must sum to 1, got {fractions}")
    class_idx = {Label.NON_MALIGNANT: 0, Label.MALIGNANT: 1}
    per_patient: dict[int, np.ndarray] = {}
    totals = np.zeros(2)
    for pid, label in records:
        if label not in class_idx:
            raise ToolkitError(f"split input contains non-class label {label}")
        counts = per_patient.setdefault(pid, np.zeros(2))
        counts[class_idx[label]] += 1
        totals[class_idx[label]] += 1
    if len(per_patient) < 3:
        raise SplitInfeasibleError(
            f"need at least 3 patients to form 3 disjoint sets, got {len(per_patient)}"
        )
    if (totals == 0).any():
        raise SplitInfeasibleError("both classes must be present in the population")

    rng = np.random.default_rng(seed)
    tie = {pid: rng.random() for pid in sorted(per_patient)}
    order = sorted(per_patient, key=lambda pid: (-per_patient[pid].sum(), tie[pid]))

    sets = list(SplitSet)
    targets = np.outer(np.asarray(fractions), totals)  # (set, class)
    assigned = np.zeros_like(targets)
    assignment: dict[int, SplitSet] = {}
    for pid in order:
        counts = per_patient[pid]
        deficit = targets - assigned
        scores = deficit.sum(axis=1) + 2.0 * (deficit * (counts / counts.sum())).sum(axis=1)
        s = int(np.argmax(scores))
        assignment[pid] = sets[s]
        assigned[s] += counts

    achieved = assigned.sum(axis=1) / assigned.sum()
    deviation = 100.0 * np.abs(achieved - np.asarray(fractions))
    if deviation.max() > SPLIT_TOLERANCE_POINTS:
        pretty = "/".join(f"{100 * a:.1f}" for a in achieved)
        raise SplitInfeasibleError(
            f"split infeasible: achieved {pretty}% vs targets "
            f"{'/'.join(f'{100 * f:.0f}' for f in fractions)}%",
            achieved=tuple(achieved),
        )
    return SplitManifest(assignment=assignment, fractions=tuple(fractions), seed=seed)


def sample_transform(rng_seed: int, step_index: int) -> TransformSpec:
    """Draw one augmentation spec; fully determined by (seed, step_index)."""
    rng = np.random.default_rng([_nonneg(rng_seed), _nonneg(step_index)])
    rot = int(rng.integers(4))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    sharp_on = rng.random() < 0.5
    factor = float(rng.uniform(0.5, 2.0))
    autocontrast = bool(rng.random() < 0.5)
    return TransformSpec(
        rot_quarter=rot,
        hflip=hflip,
        vflip=vflip,
        sharpness_factor=factor if sharp_on else None,
        autocontrast=autocontrast,
    )


def _nonneg(seed: int) -> int:
    return seed & 0x7FFFFFFFFFFFFFFF


def apply_transform(img: ImageGrid, spec: TransformSpec) -> ImageGrid:
    """Apply rotation, flips, sharpness and autocontrast, in that order.

    Geometric steps are exact pixel permutations; pairs transformed with
    one shared spec keep their pixel correspondence.
    """
    if img.height != img.width:
        raise ToolkitError(f"transforms expect square crops, got {img.height}x{img.width}")
    a = img.pixels
    if spec.rot_quarter:
        a = np.rot90(a, k=spec.rot_quarter)
    if spec.hflip:
        a = np.fliplr(a)
    if spec.vflip:
        a = np.flipud(a)
    if spec.sharpness_factor is not None:
        a = _sharpness(a, spec.sharpness_factor)
    if spec.autocontrast:
        a = _autocontrast(a)
    return ImageGrid(np.ascontiguousarray(a))


def _sharpness(a: np.ndarray, factor: float) -> np.ndarray:
    blur = _box3(a.astype(np.float64))
    out = blur + factor * (a - blur)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="edge")
    acc = np.zeros_like(a)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy : dy + a.shape[0], dx : dx + a.shape[1]]
    return acc / 9.0


def _autocontrast(a: np.ndarray) -> np.ndarray:
    lo, hi = int(a.min()), int(a.max())
    if lo == hi:
        return a.copy()
    out = np.round((a.astype(np.float64) - lo) * 255.0 / (hi - lo))
    return out.astype(np.uint8)


def augment_stream(groups, seed: int):
    """Online augmentation: yields each image group under one shared spec.

    ``groups`` is an iterable of ImageGrid sequences (e.g. LE/LED/DES crops
    of one sample); draw i uses spec ``sample_transform(seed, i)``.
    """
    for i, imgs in enumerate(groups):
        spec = sample_transform(seed, i)
        yield [apply_transform(im, spec) for im in imgs]


# --- annotations and crop index plumbing -------------------------------

ANNOTATIONS_HEADER = ["patient_id", "side", "view", "center_x", "center_y", "label"]


@dataclass(frozen=True)
class Annotation:
    patient_id: int
    side: Side
    view: View
    center: tuple[int, int]
    label: Label


def read_annotations(path: str | os.PathLike) -> list[Annotation]:
    """Read the lesion annotations CSV (one row per lesion crop center)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(ANNOTATIONS_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ToolkitError(f"annotations {os.fspath(path)!r} missing columns: {sorted(missing)}")
        for row in reader:
            try:
                rows.append(
                    Annotation(
                        patient_id=int(row["patient_id"]),
                        side=Side(row["side"].upper()),
                        view=View(row["view"].upper()),
                        center=(int(row["center_x"]), int(row["center_y"])),
                        label=Label(row["label"].lower()),
                    )
                )
            except ValueError as exc:
                raise ToolkitError(f"bad annotation row {row!r}: {exc}") from None
    return rows


def crop_stem(key: StudyKey, idx: int) -> str:
    return f"P{key.patient_id}_{key.side.value}_{key.view.value}_{idx}"


def with_source(spec: CropSpec, key: StudyKey) -> CropSpec:
    return replace(spec, source=key)
