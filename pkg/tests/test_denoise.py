"""Non-local means: exactness against a naive loop and denoising quality."""

import numpy as np
import pytest

from cesmkit.denoise import NlmParams, nl_means, nl_means_float
from cesmkit.errors import ToolkitError
from cesmkit.grid import ImageGrid
from synthdata import make_noisy_edge


def naive_nlm(px, h, template, search):
    """Independent double-loop reference of the weighting formula."""
    H, W = px.shape
    rt, rs = template // 2, search // 2
    pad = rt + rs
    big = np.pad(px.astype(np.float64), pad, mode="edge")
    inv = 1.0 / (h * h * template * template)
    out = np.empty((H, W))
    for y in range(H):
        for x in range(W):
            cy, cx = y + pad, x + pad
            num = den = 0.0
            for dy in range(-rs, rs + 1):
                for dx in range(-rs, rs + 1):
                    a = big[cy - rt : cy + rt + 1, cx - rt : cx + rt + 1]
                    b = big[cy + dy - rt : cy + dy + rt + 1, cx + dx - rt : cx + dx + rt + 1]
                    d2 = float(np.sum((a - b) ** 2))
                    w = np.exp(-max(d2, 0.0) * inv)
                    num += w * big[cy + dy, cx + dx]
                    den += w
            out[y, x] = num / den
    return out


class TestParams:
    def test_even_windows_rejected(self):
        with pytest.raises(ToolkitError):
            NlmParams(template=6)
        with pytest.raises(ToolkitError):
            NlmParams(search=20)

    def test_search_smaller_than_template_rejected(self):
        with pytest.raises(ToolkitError):
            NlmParams(template=9, search=7)

    def test_nonpositive_strength_rejected(self):
        with pytest.raises(ToolkitError):
            NlmParams(h=0)

    def test_image_smaller_than_template_rejected(self):
        with pytest.raises(ToolkitError):
            nl_means(ImageGrid(np.zeros((3, 3), np.uint8)), NlmParams(template=7, search=9))


class TestAgainstNaiveOracle:
    def test_matches_double_loop(self):
        rng = np.random.default_rng(5)
        px = rng.integers(0, 256, size=(14, 13)).astype(np.uint8)
        want = naive_nlm(px, 8.0, 5, 11)
        got = nl_means_float(px, 8.0, 5, 11)
        assert np.allclose(got, want, rtol=1e-10, atol=1e-9)

    def test_matches_on_structured_image(self):
        yy, xx = np.mgrid[0:12, 0:12]
        px = ((yy * 9 + xx * 13) % 256).astype(np.uint8)
        want = naive_nlm(px, 10.0, 3, 7)
        got = nl_means_float(px, 10.0, 3, 7)
        assert np.allclose(got, want, rtol=1e-10, atol=1e-9)


class TestProperties:
    def test_constant_is_exact_fixed_point(self):
        img = ImageGrid(np.full((30, 28), 77, np.uint8))
        assert np.array_equal(nl_means(img).pixels, img.pixels)

    def test_vanishing_strength_keeps_input(self):
        # Two-valued image away from edges: with h -> 0 only exact-match
        # patches keep weight, so the output stays within one level.
        px = np.full((40, 40), 50, np.uint8)
        px[10:30, 10:30] = 200
        out = nl_means(ImageGrid(px), NlmParams(h=0.001, template=7, search=21))
        assert np.abs(out.pixels.astype(int) - px.astype(int)).max() <= 1

    def test_range_preservation(self):
        rng = np.random.default_rng(8)
        px = rng.integers(40, 200, size=(32, 32)).astype(np.uint8)
        out = nl_means(ImageGrid(px), NlmParams(h=15, template=5, search=11))
        assert out.pixels.min() >= px.min()
        assert out.pixels.max() <= px.max()

    def test_flip_symmetry_exact(self):
        rng = np.random.default_rng(12)
        px = rng.integers(0, 256, size=(40, 37)).astype(np.uint8)
        p = NlmParams(h=10, template=5, search=13)
        base = nl_means(ImageGrid(px), p).pixels
        hf = nl_means(ImageGrid(np.ascontiguousarray(np.fliplr(px))), p).pixels
        assert np.array_equal(hf, np.fliplr(base))
        vf = nl_means(ImageGrid(np.ascontiguousarray(np.flipud(px))), p).pixels
        assert np.array_equal(vf, np.flipud(base))

    def test_noise_reduction_on_edge_fixture(self):
        clean, noisy = make_noisy_edge(size=96, sigma=10.0, seed=7)
        out = nl_means(ImageGrid(noisy), NlmParams())
        mse_noisy = np.mean((noisy.astype(float) - clean) ** 2)
        mse_out = np.mean((out.pixels.astype(float) - clean) ** 2)
        assert mse_out < mse_noisy
        # flat-region variance drops by at least half
        flat_n = noisy[8:88, 8:40].astype(float).var()
        flat_d = out.pixels[8:88, 8:40].astype(float).var()
        assert flat_d <= 0.5 * flat_n
