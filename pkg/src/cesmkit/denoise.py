"""Non-local means denoising for the low-energy image ("LED" variant).

Classic patch-weighted averaging: every output pixel is the normalized
average of the search-window candidate centers, each weighted by
``exp(-d2 / (h^2 * A))`` where ``d2`` is the squared intensity difference
summed over the template patch and ``A`` the patch area.  Defaults follow
the production setting: h = 10, 7x7 template, 21x21 search window.

Implementation notes, load-bearing for the tests:

* Borders are handled by edge replication, which keeps the filter
  symmetric under image flips.
* All patch distances are sums of squared uint8 differences, so they are
  integers below 2^53 and exact in float64 regardless of summation order
  (integral images included).  Weights are therefore bit-identical to a
  naive double loop.
* Candidate contributions are accumulated in +-offset pairs so the final
  float sums commute with horizontal and vertical flips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ToolkitError
from .grid import ImageGrid


@dataclass(frozen=True)
class NlmParams:
    h: float = 10.0
    template: int = 7
    search: int = 21

    def __post_init__(self):
        if self.h <= 0:
            raise ToolkitError(f"filtering strength must be positive, got {self.h}")
        if self.template % 2 == 0 or self.search % 2 == 0:
            raise ToolkitError("template and search windows must be odd")
        if self.search < self.template:
            raise ToolkitError(
                f"search window {self.search} smaller than template {self.template}"
            )


def nl_means(img: ImageGrid, p: NlmParams | None = None) -> ImageGrid:
    """Denoise an 8-bit image; output rounded to uint8 with ties-to-even."""
    p = p or NlmParams()
    if img.height < p.template or img.width < p.template:
        raise ToolkitError(
            f"image {img.height}x{img.width} smaller than template {p.template}"
        )
    out = nl_means_float(img.pixels, p.h, p.template, p.search)
    return ImageGrid(np.clip(np.round(out), 0, 255).astype(np.uint8))


def nl_means_float(px: np.ndarray, h: float, template: int, search: int) -> np.ndarray:
    """Float64 non-local means output before 8-bit rounding."""
    H, W = px.shape
    rt, rs = template // 2, search // 2
    pad = rt + rs
    big = np.pad(px.astype(np.float64), pad, mode="edge")
    inv = 1.0 / (h * h * template * template)

    num = np.zeros((H, W))
    den = np.zeros((H, W))
    for dy in range(rs + 1):
        for dx in range(rs + 1):
            # Sum a full +-dy/+-dx offset group at once; the pairwise order
            # below makes the accumulated floats flip-covariant.
            wn, ws = _quad_contrib(big, H, W, dy, dx, rt, rs, inv)
            num += wn
            den += ws
    return num / den


def _quad_contrib(big, H, W, dy, dx, rt, rs, inv):
    if dy == 0 and dx == 0:
        return _contrib(big, H, W, 0, 0, rt, rs, inv)
    if dy == 0:
        nl, dl = _contrib(big, H, W, 0, -dx, rt, rs, inv)
        nr, dr = _contrib(big, H, W, 0, dx, rt, rs, inv)
        return nl + nr, dl + dr
    if dx == 0:
        nu, du = _contrib(big, H, W, -dy, 0, rt, rs, inv)
        nd, dd = _contrib(big, H, W, dy, 0, rt, rs, inv)
        return nu + nd, du + dd
    n00, d00 = _contrib(big, H, W, -dy, -dx, rt, rs, inv)
    n01, d01 = _contrib(big, H, W, -dy, dx, rt, rs, inv)
    n10, d10 = _contrib(big, H, W, dy, -dx, rt, rs, inv)
    n11, d11 = _contrib(big, H, W, dy, dx, rt, rs, inv)
    return (n00 + n01) + (n10 + n11), (d00 + d01) + (d10 + d11)


def _contrib(big, H, W, dy, dx, rt, rs, inv):
    """Weighted candidate values and weights for one search offset."""
    t = 2 * rt + 1
    ht, wt = H + t - 1, W + t - 1
    base = big[rs : rs + ht, rs : rs + wt]
    shifted = big[rs + dy : rs + dy + ht, rs + dx : rs + dx + wt]
    d = base - shifted
    sq = d * d

    # Integral image of squared differences -> template-window sums.
    s = np.zeros((ht + 1, wt + 1))
    s[1:, 1:] = sq.cumsum(axis=0).cumsum(axis=1)
    d2 = s[t:, t:] - s[t:, :-t] - s[:-t, t:] + s[:-t, :-t]

    w = np.exp(-d2 * inv)
    pad = rt + rs
    v = big[pad + dy : pad + dy + H, pad + dx : pad + dx + W]
    return w * v, w
