"""8-bit grayscale image container and file I/O.

Images are row-major ``uint8`` numpy arrays wrapped in :class:`ImageGrid`.
Accepted input formats are PNG, JPEG and 8-bit PGM; everything the toolkit
writes is PNG so no further lossy recompression is introduced.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageFormatError

# Pillow refuses to open very large files by default; mammography rasters
# are a few megapixels, so the stock limit is fine.


@dataclass(frozen=True)
class ImageGrid:
    """A height x width raster of 8-bit intensities, immutable once built."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ImageFormatError(f"expected a 2-D grayscale array, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ImageFormatError(f"expected uint8 intensities, got dtype {px.dtype}")
        if px.size == 0:
            raise ImageFormatError("image has zero pixels")
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def astype_float(self) -> np.ndarray:
        """Writable float64 copy of the pixel data."""
        return self.pixels.astype(np.float64)


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Integer-rounded Rec.601 luminance, bit-stable across platforms."""
    r = rgb[..., 0].astype(np.int64)
    g = rgb[..., 1].astype(np.int64)
    b = rgb[..., 2].astype(np.int64)
    return ((299 * r + 587 * g + 114 * b + 500) // 1000).astype(np.uint8)


def load_image(path: str | os.PathLike) -> ImageGrid:
    """Load a PNG/JPEG/PGM file as an 8-bit grayscale image.

    RGB(A) and palette inputs are converted through integer Rec.601
    luminance; 16-bit or float inputs are rejected.
    """
    try:
        with Image.open(path) as img:
            if img.mode == "L":
                arr = np.asarray(img)
            elif img.mode in ("RGB", "RGBA", "P", "LA"):
                arr = rgb_to_gray(np.asarray(img.convert("RGB")))
            elif img.mode == "1":
                arr = np.asarray(img.convert("L"))
            else:
                raise ImageFormatError(
                    f"unsupported bit depth or mode {img.mode!r} in {os.fspath(path)!r}"
                )
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageFormatError(f"cannot read image {os.fspath(path)!r}: {exc}") from exc
    return ImageGrid(arr)


def save_png(image: ImageGrid | np.ndarray, path: str | os.PathLike) -> None:
    """Write a grayscale ImageGrid or an (H, W[, 3]) uint8 array as PNG."""
    if isinstance(image, ImageGrid):
        arr = image.pixels
    else:
        arr = np.asarray(image)
        if arr.dtype != np.uint8 or arr.ndim not in (2, 3):
            raise ImageFormatError(
                f"expected uint8 image array, got {arr.dtype} ndim={arr.ndim}"
            )
    Image.fromarray(arr).save(path, format="PNG")
