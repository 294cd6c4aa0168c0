"""Soft intensity histograms from Gaussian kernel density estimates.

Each pixel spreads unit mass over ``B`` fixed bins with centers
``(b + 0.5) / B``; the per-pixel Gaussian weights are normalized over the
bins, so every histogram lies exactly on the probability simplex and its
derivative with respect to the pixel values has a closed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyImage, ShapeMismatch

MASS_FLOOR = 1e-12
_CHUNK = 1 << 15


@dataclass(frozen=True)
class KdeConfig:
    bins: int = 64
    bandwidth: float | None = None  # None -> one bin width

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least 2 bins")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def sigma(self) -> float:
        return 1.0 / self.bins if self.bandwidth is None else float(self.bandwidth)

    @property
    def centers(self) -> np.ndarray:
        return bin_centers(self.bins)


@dataclass(frozen=True)
class Histogram:
    masses: np.ndarray
    centers: np.ndarray

    @property
    def bins(self) -> int:
        return self.masses.size


def bin_centers(bins: int) -> np.ndarray:
    return (np.arange(bins) + 0.5) / bins


def _kernel_weights(v: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    """Per-pixel Gaussian weights over the bins, each row summing to one."""
    d2 = (v[:, None] - centers[None, :]) ** 2
    # shift by the nearest-bin distance so tiny bandwidths cannot underflow
    logw = -(d2 - d2.min(axis=1, keepdims=True)) / (2.0 * sigma * sigma)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    return w


def soft_histogram(img, cfg: KdeConfig = KdeConfig()) -> Histogram:
    """Kernel density histogram of the pixel intensities of ``img``."""
    v = np.asarray(img, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyImage("cannot histogram an empty image")
    centers = cfg.centers
    acc = np.zeros(cfg.bins)
    for start in range(0, v.size, _CHUNK):
        acc += _kernel_weights(v[start:start + _CHUNK], centers, cfg.sigma).sum(axis=0)
    return Histogram(acc / v.size, centers)


def soft_histogram_vjp(img, cfg: KdeConfig, upstream) -> np.ndarray:
    """Pull a cotangent on the histogram masses back to the pixels.

    Returns the image ``sum_b upstream[b] * d h[b] / d img``.
    """
    img = np.asarray(img, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (cfg.bins,):
        raise ShapeMismatch(f"upstream must have shape ({cfg.bins},), got {u.shape}")
    v = img.ravel()
    if v.size == 0:
        raise EmptyImage("cannot histogram an empty image")
    centers, s2 = cfg.centers, cfg.sigma ** 2
    out = np.empty_like(v)
    for start in range(0, v.size, _CHUNK):
        vc = v[start:start + _CHUNK]
        w = _kernel_weights(vc, centers, cfg.sigma)
        score = -(vc[:, None] - centers[None, :]) / s2  # d log w / dv
        mean_score = (w * score).sum(axis=1)
        out[start:start + _CHUNK] = (w * u * score).sum(axis=1) - (w @ u) * mean_score
    return (out / v.size).reshape(img.shape)


def floor_masses(masses, floor: float = MASS_FLOOR) -> np.ndarray:
    """Add ``floor`` to every bin and renormalize, keeping Sinkhorn finite."""
    m = np.asarray(masses, dtype=np.float64) + floor
    return m / m.sum()


def floored(h: Histogram, floor: float = MASS_FLOOR) -> Histogram:
    return Histogram(floor_masses(h.masses, floor), h.centers)
