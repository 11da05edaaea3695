"""Dense 5-axis latent tensors: resampling, statistics, seeded noise and HLAT files.

A latent is a plain ``numpy.ndarray`` of shape ``(B, C, T, H, W)``.  Storage is
float32; statistics and losses accumulate in float64.

Randomness uses numpy's counter-based Philox bit generator so a seed fully
determines every draw within one build.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

MAGIC = b"HLAT"
VERSION = 1
_HEADER = struct.Struct("<4sII5Q")

Factor = Union[int, Sequence[int]]


class DimensionError(ValueError):
    """Tensor dimensions are incompatible with the requested operation."""


class LatentFormatError(ValueError):
    """Base class for HLAT decoding failures."""


class BadMagicError(LatentFormatError):
    pass


class VersionMismatchError(LatentFormatError):
    pass


class TruncatedPayloadError(LatentFormatError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Philox-backed generator; the only RNG constructor used across the package."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def check_latent(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 5:
        raise DimensionError(f"latent must have 5 axes (B,C,T,H,W), got shape {x.shape}")
    return x


def _pair(factor: Factor) -> tuple[int, int]:
    if isinstance(factor, (int, np.integer)):
        fh = fw = int(factor)
    else:
        fh, fw = (int(f) for f in factor)
    if fh < 1 or fw < 1:
        raise ValueError(f"resampling factor must be >= 1, got {(fh, fw)}")
    return fh, fw


def upsample_nearest(x: np.ndarray, factor: Factor) -> np.ndarray:
    """Replicate every spatial cell into a ``factor x factor`` block."""
    x = check_latent(x)
    fh, fw = _pair(factor)
    if fh == 1 and fw == 1:
        return x.copy()
    return np.repeat(np.repeat(x, fh, axis=3), fw, axis=4)


def downsample_area(x: np.ndarray, factor: Factor) -> np.ndarray:
    """Average each ``factor x factor`` block (the exact inverse of :func:`upsample_nearest`)."""
    x = check_latent(x)
    fh, fw = _pair(factor)
    b, c, t, h, w = x.shape
    if h % fh or w % fw:
        raise DimensionError(f"spatial dims {(h, w)} not divisible by factor {(fh, fw)}")
    if fh == 1 and fw == 1:
        return x.copy()
    blocks = x.reshape(b, c, t, h // fh, fh, w // fw, fw).astype(np.float64)
    return blocks.mean(axis=(4, 6)).astype(x.dtype)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Row i averages input cells by their overlap with [i*n_in/n_out, (i+1)*n_in/n_out).
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            m[i, j] = min(hi, j + 1) - max(lo, j)
        m[i] /= scale
    return m


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)


def resize_area(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area resampling to an arbitrary (not necessarily integer-ratio) size."""
    x = check_latent(x)
    ah = _area_matrix(x.shape[3], out_h)
    aw = _area_matrix(x.shape[4], out_w)
    y = np.einsum("ih,bcthw,jw->bctij", ah, x.astype(np.float64), aw)
    return y.astype(x.dtype)


def resize_nearest(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = check_latent(x)
    ih = _nearest_index(x.shape[3], out_h)
    iw = _nearest_index(x.shape[4], out_w)
    return x[:, :, :, ih][:, :, :, :, iw]


@dataclass(frozen=True)
class SectionStats:
    """Per-channel mean and population variance of one latent section."""

    mean: np.ndarray
    variance: np.ndarray


def section_stats(x: np.ndarray) -> SectionStats:
    x = check_latent(x)
    if x.size == 0:
        raise DimensionError("cannot compute statistics of an empty tensor")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3, 4))
    centered = x64 - mean[None, :, None, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3, 4))
    return SectionStats(mean=mean, variance=var)


def seeded_gaussian(dims: Sequence[int], seed: int) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 5:
        raise DimensionError(f"latent dims must have 5 entries, got {dims}")
    return make_rng(seed).standard_normal(dims, dtype=np.float64).astype(np.float32)


def encode_latent(x: np.ndarray) -> bytes:
    x = check_latent(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("latent contains non-finite values")
    header = _HEADER.pack(MAGIC, VERSION, 5, *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_latent(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("header truncated")
    _, version, rank, *dims = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported HLAT version {version}")
    if rank != 5:
        raise LatentFormatError(f"unsupported rank {rank}")
    n = int(np.prod(dims))
    payload = buf[_HEADER.size:]
    if len(payload) < 4 * n:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, dims {tuple(dims)} need {4 * n}")
    data = np.frombuffer(payload, dtype="<f4", count=n)
    return data.reshape(dims).astype(np.float32)


def write_latent(x: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_latent(x))


def read_latent(path) -> np.ndarray:
    return decode_latent(Path(path).read_bytes())
