"""Image arrays, a reproducible normal sampler, and PGM / raw-tensor I/O.

Images are plain 2-D ``float64`` numpy arrays.  Canonical images hold
intensities in [0, 1]; the file readers rescale into that range and the
writers refuse anything outside it.

The raw tensor format is::

    b"CTXTENS1" | u32 rank | u32 dims[rank] | f32 payload

with every integer and float little-endian.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DimensionOverflow,
    MalformedHeader,
    NonFiniteError,
    RangeError,
    ShapeMismatch,
)

TENSOR_MAGIC = b"CTXTENS1"
MAX_ELEMENTS = 1 << 31
_U64_TO_UNIT = 2.0 ** -53


# ---------------------------------------------------------------------------
# arrays

def as_image(a, name: str = "image") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array."""
    img = np.asarray(a, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ShapeMismatch(f"{name} must be a non-empty 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return img


def check_canonical(img: np.ndarray, name: str = "image") -> None:
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise RangeError(f"{name} has values outside [0, 1]: "
                         f"min={img.min():.6g}, max={img.max():.6g}")


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what} differ in shape: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# random numbers

class Rng:
    """Counter-based generator with a Box-Muller normal sampler.

    The raw 64-bit stream comes from Philox keyed by ``seed``; normals are
    derived here rather than through numpy's distribution code, so a seed
    pins the samples independently of numpy's sampler internals.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._bits = np.random.Philox(key=self.seed & 0xFFFFFFFFFFFFFFFF)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        raw = self._bits.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * _U64_TO_UNIT

    def normal(self, shape) -> np.ndarray:
        shape = (int(shape),) if np.isscalar(shape) else tuple(int(d) for d in shape)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)


def gaussian_noise(shape, sigma: float, rng: Rng) -> np.ndarray:
    """I.i.d. N(0, sigma^2) samples of the given shape."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return sigma * rng.normal(shape)


# ---------------------------------------------------------------------------
# raw tensor format

def encode_tensor(a) -> bytes:
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("cannot encode non-finite values")
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:8] != TENSOR_MAGIC:
        raise MalformedHeader("missing CTXTENS1 magic")
    (rank,) = struct.unpack_from("<I", buf, 8)
    if rank > 8:
        raise MalformedHeader(f"implausible tensor rank {rank}")
    off = 12 + 4 * rank
    if len(buf) < off:
        raise MalformedHeader("truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimensionOverflow(f"tensor dims {dims} exceed {MAX_ELEMENTS} elements")
    payload = len(buf) - off
    if payload != 4 * count:
        raise DimensionMismatch(
            f"header declares {count} values ({dims}), payload holds {payload / 4:g}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor payload contains non-finite values")
    return arr.reshape(dims)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_tensor(a, path) -> None:
    _atomic_write(Path(path), encode_tensor(a))


# ---------------------------------------------------------------------------
# PGM

def _pgm_tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace separated header integers after the magic."""
    pos, out = 2, []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MalformedHeader("bad PGM header")
        out.append(int(buf[start:pos]))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise MalformedHeader("PGM header must end with a single whitespace byte")
    return out, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise MalformedHeader("only binary PGM (P5) is supported")
    (width, height, maxval), off = _pgm_tokens(buf, 3)
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"bad PGM size {width}x{height}")
    if width * height > MAX_ELEMENTS:
        raise DimensionOverflow(f"PGM size {width}x{height} too large")
    if not 0 < maxval < 65536:
        raise MalformedHeader(f"bad PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(buf) - off != need:
        raise DimensionMismatch(
            f"PGM {width}x{height} needs {need} payload bytes, got {len(buf) - off}")
    words = np.frombuffer(buf, dtype=dtype, count=width * height, offset=off)
    if words.max(initial=0) > maxval:
        raise MalformedHeader("PGM sample exceeds maxval")
    return words.reshape(height, width).astype(np.float64) / maxval


def encode_pgm(img: np.ndarray, maxval: int) -> bytes:
    # round half up
    words = np.floor(img * maxval + 0.5)
    dtype = ">u2" if maxval > 255 else "u1"
    head = b"P5\n%d %d\n%d\n" % (img.shape[1], img.shape[0], maxval)
    return head + words.astype(dtype).tobytes()


# ---------------------------------------------------------------------------
# images on disk

FORMATS = ("raw", "pgm8", "pgm16")


def _infer_format(path: Path) -> str:
    return "pgm16" if path.suffix.lower() == ".pgm" else "raw"


def load_image(path) -> np.ndarray:
    """Read a PGM or raw-tensor file into a canonical image."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] == b"P5":
        return decode_pgm(buf)
    arr = decode_tensor(buf)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a rank-2 tensor, got rank {arr.ndim}")
    check_canonical(arr, str(path))
    return arr


def save_image(img, path, format: str | None = None) -> None:
    path = Path(path)
    img = as_image(img)
    check_canonical(img)
    format = format or _infer_format(path)
    if format == "raw":
        data = encode_tensor(img)
    elif format == "pgm8":
        data = encode_pgm(img, 255)
    elif format == "pgm16":
        data = encode_pgm(img, 65535)
    else:
        raise ValueError(f"unknown image format {format!r}; expected one of {FORMATS}")
    _atomic_write(path, data)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)
