"""Full-reference image quality metrics on the unit intensity range."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate

from .errors import ImageTooSmall
from .tensor_io import as_image, check_same_shape

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    mse: float

    def as_row(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "mse": self.mse}


def mse(a, b) -> float:
    a, b = as_image(a), as_image(b)
    check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for peak value 1, capped at 99 dB."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def _gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid positions only."""
    a, b = as_image(a), as_image(b)
    check_same_shape(a, b)
    if min(a.shape) < SSIM_WIN:
        raise ImageTooSmall(f"SSIM needs both dims >= {SSIM_WIN}, got {a.shape}")
    w = _gaussian_window()

    def filt(x):
        return correlate(x, w, mode="valid", method="direct")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def evaluate(a, b) -> MetricReport:
    return MetricReport(psnr=psnr(a, b), ssim=ssim(a, b), mse=mse(a, b))
