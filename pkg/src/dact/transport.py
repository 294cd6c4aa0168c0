"""The adaptive contrast-transport forward model and its fidelity loss.

Forward model for a clean estimate ``z``::

    phi_hat(z; alpha) = alpha * LUT(z) + (1 - alpha) * z
    y ~ H phi_hat(z; alpha)

with ``H`` the k x k block average.  The LUT comes from Sinkhorn matching
of the soft histogram of ``z`` against that of ``y``; gradients either
treat it as fixed (``GradMode.DETACHED``) or also differentiate the
histogram -> plan -> LUT chain (``GradMode.FULL_UNROLL``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NonDivisible, ShapeMismatch
from .histogram import (
    Histogram,
    MASS_FLOOR,
    KdeConfig,
    floor_masses,
    soft_histogram,
    soft_histogram_vjp,
)
from .ot import Lut, SinkhornConfig, TransportPlan, extract_lut, lut_vjp_src, sinkhorn
from .tensor_io import as_image, check_same_shape


class GradMode(enum.Enum):
    DETACHED = "detached"
    FULL_UNROLL = "full-unroll"


@dataclass(frozen=True)
class ForwardConfig:
    downsample_factor: int = 2
    lut_grad_mode: GradMode = GradMode.DETACHED

    def __post_init__(self):
        if int(self.downsample_factor) < 1:
            raise ValueError("downsample_factor must be >= 1")
        object.__setattr__(self, "lut_grad_mode", GradMode(self.lut_grad_mode))


@dataclass(frozen=True)
class MatchedLut(Lut):
    """A LUT together with the matching problem it was solved from.

    Carries what the full-unroll gradient needs: the source image's raw
    histogram, the KDE settings and the converged plan.
    """
    plan: TransportPlan | None = None
    kde: KdeConfig | None = None
    src_hist: Histogram | None = None


def match_lut(img, h_target: Histogram, kde: KdeConfig = KdeConfig(),
              sinkhorn_cfg: SinkhornConfig = SinkhornConfig()) -> MatchedLut:
    """LUT carrying the intensity distribution of ``img`` onto ``h_target``.

    ``h_target`` is the floored target histogram.
    """
    h_src = soft_histogram(img, kde)
    src = Histogram(floor_masses(h_src.masses), h_src.centers)
    plan = sinkhorn(src, h_target, sinkhorn_cfg)
    lut = extract_lut(plan)
    return MatchedLut(lut.centers, lut.values, plan=plan, kde=kde, src_hist=h_src)


# ---------------------------------------------------------------------------
# LUT application

def _interval(v: np.ndarray, centers: np.ndarray):
    """Knot interval index and fractional position of each value (unclamped frac)."""
    i = np.clip(np.searchsorted(centers, v, side="right") - 1, 0, centers.size - 2)
    frac = (v - centers[i]) / (centers[i + 1] - centers[i])
    return i, frac


def apply_lut(img, lut: Lut) -> np.ndarray:
    """Piecewise-linear LUT evaluation, clamped to the end knots outside the grid."""
    v = np.asarray(img, dtype=np.float64)
    return np.interp(v, lut.centers, lut.values)


def apply_lut_grad(img, lut: Lut) -> np.ndarray:
    """Derivative of :func:`apply_lut` in the pixel value (0 in the clamp regions)."""
    v = np.asarray(img, dtype=np.float64)
    c, L = lut.centers, lut.values
    slopes = np.diff(L) / np.diff(c)
    i, _ = _interval(v, c)
    out = slopes[i]
    out[(v < c[0]) | (v > c[-1])] = 0.0
    return out


def _lut_value_weights(v: np.ndarray, centers: np.ndarray):
    """Interpolation weights of each pixel on its two knots: (index, w_left, w_right)."""
    i, frac = _interval(v, centers)
    frac = np.clip(frac, 0.0, 1.0)
    return i, 1.0 - frac, frac


def adaptive_transport(img, lut: Lut, alpha) -> np.ndarray:
    """Pixel-wise convex blend ``alpha * LUT(img) + (1 - alpha) * img``."""
    img = as_image(img)
    alpha = as_image(alpha, "alpha")
    check_same_shape(img, alpha, "image and alpha")
    return alpha * apply_lut(img, lut) + (1.0 - alpha) * img


# ---------------------------------------------------------------------------
# spatial degradation

def _check_divisible(shape, k: int) -> None:
    if k < 1:
        raise ValueError("downsampling factor must be >= 1")
    if shape[0] % k or shape[1] % k:
        raise NonDivisible(f"image shape {shape} is not divisible by k={k}")


def downsample(img, k: int) -> np.ndarray:
    """k x k block averaging."""
    img = np.asarray(img, dtype=np.float64)
    k = int(k)
    _check_divisible(img.shape, k)
    h, w = img.shape
    return img.reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def downsample_adjoint(img, k: int) -> np.ndarray:
    """Adjoint of :func:`downsample`: replicate each value over its block, scaled by 1/k^2."""
    img = np.asarray(img, dtype=np.float64)
    k = int(k)
    if k < 1:
        raise ValueError("downsampling factor must be >= 1")
    return np.repeat(np.repeat(img, k, axis=0), k, axis=1) / (k * k)


# ---------------------------------------------------------------------------
# fidelity

@dataclass(frozen=True)
class FidelityResult:
    loss: float
    grad_z: np.ndarray
    grad_alpha: np.ndarray
    fidelity: float  # ||y - H phi_hat||^2
    coupling: float  # ||z - x0_hat||^2 (unweighted)

    def __iter__(self):
        # unpacks as (loss, grad_z, grad_alpha)
        return iter((self.loss, self.grad_z, self.grad_alpha))


def fidelity_loss_and_grads(z, alpha, y, x0_hat, lut: Lut, lambda_t: float,
                            cfg: ForwardConfig = ForwardConfig()) -> FidelityResult:
    """``L = ||y - H phi_hat(z; alpha)||^2 + lambda_t ||z - x0_hat||^2`` and its gradients.

    In full-unroll mode ``lut`` must be a :class:`MatchedLut` built from
    ``z`` (see :func:`match_lut`); the gradient then also flows through the
    soft histogram of ``z`` and the Sinkhorn fixed point.
    """
    z = as_image(z, "z")
    alpha = as_image(alpha, "alpha")
    y = as_image(y, "y")
    x0_hat = as_image(x0_hat, "x0_hat")
    check_same_shape(z, alpha, "z and alpha")
    check_same_shape(z, x0_hat, "z and x0_hat")
    k = int(cfg.downsample_factor)
    _check_divisible(z.shape, k)
    if y.shape != (z.shape[0] // k, z.shape[1] // k):
        raise ShapeMismatch(f"y has shape {y.shape}, expected {z.shape} / {k}")
    if lambda_t < 0:
        raise ValueError("lambda_t must be non-negative")

    mapped = apply_lut(z, lut)
    phi = alpha * mapped + (1.0 - alpha) * z
    resid = downsample(phi, k) - y
    d = z - x0_hat
    fidelity = float(np.sum(resid * resid))
    coupling = float(np.sum(d * d))
    loss = fidelity + lambda_t * coupling

    up = downsample_adjoint(2.0 * resid, k)  # dL/dphi
    grad_alpha = (mapped - z) * up
    grad_z = up * (alpha * apply_lut_grad(z, lut) + (1.0 - alpha)) + 2.0 * lambda_t * d

    if cfg.lut_grad_mode is GradMode.FULL_UNROLL:
        grad_z = grad_z + _lut_chain_grad(z, up * alpha, lut)
    return FidelityResult(loss, grad_z, grad_alpha, fidelity, coupling)


def _lut_chain_grad(z: np.ndarray, upstream: np.ndarray, lut: Lut) -> np.ndarray:
    """Gradient through LUT values -> Sinkhorn -> floor -> soft histogram -> z."""
    if not isinstance(lut, MatchedLut) or lut.plan is None:
        raise TypeError("full-unroll gradients need the MatchedLut returned by match_lut")
    c = lut.centers
    i, wl, wr = _lut_value_weights(z.ravel(), c)
    u = upstream.ravel()
    values_bar = np.bincount(i, u * wl, minlength=c.size)
    values_bar += np.bincount(i + 1, u * wr, minlength=c.size)
    a_bar = lut_vjp_src(lut.plan, values_bar)
    # through the floor: m = (h + f) / sum(h + f)
    raw = lut.src_hist.masses
    m = lut.plan.src_marginal
    total = float(np.sum(raw)) + raw.size * MASS_FLOOR
    h_bar = (a_bar - a_bar @ m) / total
    return soft_histogram_vjp(z, lut.kde, h_bar)
