"""Binary model file format.

Layout (all integers little-endian unsigned 32-bit):

    8 bytes   magic "CESMUNET"
    u32       format version
    u32 x 6   base_channels, depth, dropout numerator, dropout denominator,
              in_channels, out_channels
    repeated  per-tensor record: name length, UTF-8 name, rank, extents,
              raw float32 little-endian values
    u32       CRC-32 of every prior byte
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from ..errors import ModelFormatError
from .unet import UNetConfig, UNetParams

MAGIC = b"CESMUNET"
FORMAT_VERSION = 1
_DROPOUT_DEN = 1_000_000


def save_model(params: UNetParams, cfg: UNetConfig, path: str | os.PathLike) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", FORMAT_VERSION)
    num = round(cfg.dropout_p * _DROPOUT_DEN)
    buf += struct.pack(
        "<6I", cfg.base_channels, cfg.depth, num, _DROPOUT_DEN, cfg.in_channels, cfg.out_channels
    )
    for name, arr in params.items():
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(buf)


def load_model(path: str | os.PathLike) -> tuple[UNetParams, UNetConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4:
        raise ModelFormatError(f"model file {os.fspath(path)!r} is too short")
    if raw[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"bad magic in {os.fspath(path)!r}")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if len(raw) < len(MAGIC) + 4 + 24 + 4:
        raise ModelFormatError("checksum failure: truncated model file")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ModelFormatError(f"checksum failure in {os.fspath(path)!r}")

    off = len(MAGIC) + 4
    base, depth, num, den, cin, cout = struct.unpack_from("<6I", raw, off)
    off += 24
    cfg = UNetConfig(
        base_channels=base, depth=depth, dropout_p=num / den, in_channels=cin, out_channels=cout
    )
    params: UNetParams = {}
    end = len(raw) - 4
    try:
        while off < end:
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise ModelFormatError(f"corrupt tensor records in {os.fspath(path)!r}: {exc}") from exc
    if off != end:
        raise ModelFormatError("trailing bytes after tensor records")
    return params, cfg
