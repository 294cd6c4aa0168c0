import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dact import Rng, floored, soft_histogram, KdeConfig
from dact.histogram import floor_masses
from dact.priors import gaussian_denoiser

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_histogram(rng: np.random.Generator, bins: int, sparsity: float = 0.3) -> np.ndarray:
    """Random floored histogram; roughly ``sparsity`` of the bins are empty before flooring."""
    m = rng.gamma(0.5, size=bins)
    m[rng.random(bins) < sparsity] = 0.0
    if m.sum() == 0:
        m[rng.integers(bins)] = 1.0
    return floor_masses(m / m.sum())


def smooth_histogram(rng: np.random.Generator, bins: int) -> np.ndarray:
    """Strictly positive histogram made of a few broad Gaussian bumps."""
    x = (np.arange(bins) + 0.5) / bins
    m = np.full(bins, 0.05)
    for _ in range(rng.integers(1, 4)):
        mu, s = rng.uniform(0.15, 0.85), rng.uniform(0.05, 0.2)
        m += rng.uniform(0.5, 2.0) * np.exp(-0.5 * ((x - mu) / s) ** 2)
    return m / m.sum()


def smooth_field(seed: int, n: int = 32, blur: float = 2.0, lo: float = 0.1, hi: float = 0.9):
    """Smooth random image rescaled to [lo, hi]."""
    r = gaussian_denoiser(Rng(seed).uniform(n * n).reshape(n, n), blur)
    return lo + (hi - lo) * (r - r.min()) / (r.max() - r.min())


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240917)


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion, printed after the test run

ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
