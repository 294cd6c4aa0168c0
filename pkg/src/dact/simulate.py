"""Synthetic degradations: monotone contrast transforms, phantoms and baselines.

``degrade`` implements ``y = clip(H phi(x) + n, 0, 1)`` with ``H`` the
block average and ``n`` i.i.d. Gaussian measurement noise added after
downsampling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

from .tensor_io import Rng, as_image, check_canonical, gaussian_noise
from .transport import downsample

PHANTOMS = ("shepp-logan-like", "nested-disks", "gradient-bars")
NESTED_DISK_VALUES = (0.1, 0.35, 0.6, 0.9)
BAR_BANDS = ((0.1, 0.15), (0.35, 0.4), (0.6, 0.65), (0.85, 0.9))


# ---------------------------------------------------------------------------
# contrast transforms

@dataclass(frozen=True)
class Gamma:
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def __call__(self, v):
        return np.power(np.asarray(v, dtype=np.float64), self.gamma)

    def describe(self) -> str:
        return f"gamma:{self.gamma!r}"


@dataclass(frozen=True)
class PiecewiseLinear:
    """Monotone polyline through ``knots`` (pairs ``(v, w)``) from (0, 0) to (1, 1)."""
    knots: tuple

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        if k.ndim != 2 or k.shape[1] != 2 or k.shape[0] < 2:
            raise ValueError("knots must be a sequence of (v, w) pairs")
        if tuple(k[0]) != (0.0, 0.0) or tuple(k[-1]) != (1.0, 1.0):
            raise ValueError("knots must start at (0, 0) and end at (1, 1)")
        if np.any(np.diff(k[:, 0]) <= 0) or np.any(np.diff(k[:, 1]) <= 0):
            raise ValueError("knots must be strictly increasing in both coordinates")
        object.__setattr__(self, "knots", tuple(map(tuple, k.tolist())))

    def __call__(self, v):
        k = np.asarray(self.knots)
        return np.interp(np.asarray(v, dtype=np.float64), k[:, 0], k[:, 1])

    def describe(self) -> str:
        return "piecewise:" + ";".join(f"{v!r},{w!r}" for v, w in self.knots)


@dataclass(frozen=True)
class Logistic:
    """Logistic curve of given steepness and midpoint, rescaled to map 0 -> 0 and 1 -> 1."""
    steepness: float
    midpoint: float = 0.5

    def __post_init__(self):
        if not self.steepness > 0:
            raise ValueError("steepness must be positive")
        if not 0 < self.midpoint < 1:
            raise ValueError("midpoint must lie in (0, 1)")

    def _raw(self, v):
        return 1.0 / (1.0 + np.exp(-self.steepness * (v - self.midpoint)))

    def __call__(self, v):
        v = np.asarray(v, dtype=np.float64)
        lo, hi = self._raw(0.0), self._raw(1.0)
        out = (self._raw(v) - lo) / (hi - lo)
        # pin the endpoints against rounding
        return np.where(v <= 0, 0.0, np.where(v >= 1, 1.0, out))

    def describe(self) -> str:
        return f"logistic:{self.steepness!r},{self.midpoint!r}"


ContrastTransform = Gamma | PiecewiseLinear | Logistic


def parse_transform(text: str) -> ContrastTransform:
    """Inverse of ``describe()``: ``gamma:0.7``, ``logistic:8,0.5``, ``piecewise:0,0;0.5,0.7;1,1``."""
    kind, _, args = text.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "gamma":
            return Gamma(float(args))
        if kind == "logistic":
            parts = [float(a) for a in args.split(",")]
            return Logistic(*parts)
        if kind == "piecewise":
            pairs = [tuple(float(x) for x in p.split(",")) for p in args.split(";") if p]
            return PiecewiseLinear(tuple(pairs))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"bad transform {text!r}: {exc}") from exc
    raise ValueError(f"unknown transform kind {kind!r}")


# ---------------------------------------------------------------------------
# degradation

def degrade(x, phi: ContrastTransform, k: int, noise_sigma: float, rng: Rng) -> np.ndarray:
    x = as_image(x, "x")
    check_canonical(x, "x")
    y = downsample(phi(x), k)
    if noise_sigma > 0:
        y = y + gaussian_noise(y.shape, noise_sigma, rng)
    return np.clip(y, 0.0, 1.0)


def upsample_baseline(y, k: int) -> np.ndarray:
    """Bilinear k-fold upsampling on pixel-center grids, edge values clamped."""
    y = as_image(y, "y")
    if int(k) == 1:
        return y.copy()
    return zoom(y, int(k), order=1, mode="nearest", grid_mode=True)


# ---------------------------------------------------------------------------
# phantoms

def phantom(size: int, kind: str = "nested-disks") -> np.ndarray:
    """Deterministic piecewise-constant test image with four or more plateaus."""
    if size < 16:
        raise ValueError("phantom size must be >= 16")
    kind = kind.replace("_", "-").lower()
    if kind == "nested-disks":
        return _nested_disks(size)
    if kind == "gradient-bars":
        return _gradient_bars(size)
    if kind == "shepp-logan-like":
        return _shepp_logan_like(size)
    raise ValueError(f"unknown phantom {kind!r}; expected one of {PHANTOMS}")


def _grid(size):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0  # pixel centers in [-1, 1]
    return np.meshgrid(c, c, indexing="ij")


def _nested_disks(size):
    yy, xx = _grid(size)
    r = np.hypot(xx, yy)
    img = np.full((size, size), NESTED_DISK_VALUES[0])
    for radius, value in zip((0.9, 0.6, 0.3), NESTED_DISK_VALUES[1:]):
        img[r < radius] = value
    return img


def _gradient_bars(size):
    img = np.empty((size, size))
    cols = np.array_split(np.arange(size), len(BAR_BANDS))
    for (lo, hi), c in zip(BAR_BANDS, cols):
        ramp = lo + (hi - lo) * (np.arange(c.size) + 0.5) / c.size
        img[:, c] = ramp[None, :]
    return img


def bar_fractions(size) -> np.ndarray:
    """Area fraction of each gradient bar."""
    return np.array([c.size for c in np.array_split(np.arange(size), len(BAR_BANDS))]) / size


def _shepp_logan_like(size):
    yy, xx = _grid(size)
    # (value, center x, center y, semi-axis x, semi-axis y, rotation deg), painted in order
    shapes = [
        (0.8, 0.0, 0.0, 0.69, 0.92, 0),
        (0.3, 0.0, -0.02, 0.62, 0.85, 0),
        (0.1, 0.22, 0.0, 0.11, 0.31, -18),
        (0.1, -0.22, 0.0, 0.16, 0.41, 18),
        (0.55, 0.0, 0.35, 0.21, 0.25, 0),
        (0.55, 0.0, -0.6, 0.05, 0.05, 0),
        (0.45, -0.08, -0.6, 0.046, 0.023, 0),
    ]
    img = np.zeros((size, size))
    for value, cx, cy, ax, ay, deg in shapes:
        th = np.deg2rad(deg)
        u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
        v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
        img[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] = value
    return img
