import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dact import KdeConfig, soft_histogram
from dact.errors import EmptyImage
from dact.histogram import MASS_FLOOR, bin_centers, floored, soft_histogram_vjp


def direct_histogram(img, bins, sigma):
    """Per-pixel double loop over bins: normalized Gaussian weights."""
    centers = [(b + 0.5) / bins for b in range(bins)]
    acc = [0.0] * bins
    flat = np.asarray(img).ravel().tolist()
    for v in flat:
        w = [np.exp(-(v - c) ** 2 / (2 * sigma * sigma)) for c in centers]
        s = sum(w)
        for b in range(bins):
            acc[b] += w[b] / s
    return np.array(acc) / len(flat)


def test_centers():
    np.testing.assert_allclose(bin_centers(4), [0.125, 0.375, 0.625, 0.875])


def test_constant_half_symmetric():
    h = soft_histogram(np.full((3, 3), 0.5), KdeConfig(4, 0.2)).masses
    assert h[0] == pytest.approx(h[3], abs=1e-15)
    assert h[1] == pytest.approx(h[2], abs=1e-15)
    assert h[1] > h[0]
    assert h.sum() == pytest.approx(1.0, abs=1e-12)


def test_concentration_at_center():
    c = bin_centers(8)[3]
    h = soft_histogram(np.full((2, 2), c), KdeConfig(8, 1e-4)).masses
    assert h[3] >= 1 - 1e-9
    assert np.all(np.delete(h, 3) <= 1e-9)


def test_matches_direct_oracle():
    img = np.random.default_rng(1).random((32, 32))
    h = soft_histogram(img, KdeConfig(64)).masses
    np.testing.assert_allclose(h, direct_histogram(img, 64, 1 / 64), rtol=0, atol=1e-12)


def test_empty_image():
    with pytest.raises(EmptyImage):
        soft_histogram(np.zeros((0, 3)))


def test_bad_config():
    with pytest.raises(ValueError):
        KdeConfig(1)
    with pytest.raises(ValueError):
        KdeConfig(8, -1.0)


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(0, 1)),
       st.integers(2, 96))
def test_normalized_and_nonnegative(img, bins):
    h = soft_histogram(img, KdeConfig(bins)).masses
    assert np.all(h >= 0)
    assert abs(h.sum() - 1.0) <= 1e-12


@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)))
def test_floor_keeps_simplex(img):
    h = floored(soft_histogram(img)).masses
    assert np.all(h >= MASS_FLOOR / 2)
    assert abs(h.sum() - 1.0) <= 1e-12


def test_shift_covariance():
    # a narrower kernel than the default keeps the renormalization identical for
    # shifted pixels (the omitted tail beyond the last bin is ~exp(-72))
    B = 32
    cfg = KdeConfig(B, 0.25 / B)
    c = bin_centers(B)
    img = np.random.default_rng(5).uniform(c[1], c[B - 3], (16, 16))
    h0 = soft_histogram(img, cfg).masses
    h1 = soft_histogram(img + 1.0 / B, cfg).masses
    np.testing.assert_allclose(h1[2:B - 1], h0[1:B - 2], rtol=0, atol=1e-10)


def test_vjp_uniform_upstream_vanishes():
    img = np.random.default_rng(2).random((8, 8))
    g = soft_histogram_vjp(img, KdeConfig(16), np.full(16, 3.0))
    assert np.max(np.abs(g)) < 1e-14


def test_vjp_finite_differences():
    rng = np.random.default_rng(3)
    img = rng.random((8, 8))
    cfg = KdeConfig(64)
    up = rng.normal(size=64)
    g = soft_histogram_vjp(img, cfg, up)
    step = 1e-5
    fd = np.empty_like(img)
    for idx in np.ndindex(img.shape):
        e = np.zeros_like(img)
        e[idx] = step
        fd[idx] = (up @ soft_histogram(img + e, cfg).masses
                   - up @ soft_histogram(img - e, cfg).masses) / (2 * step)
    rel = np.linalg.norm(g - fd) / np.linalg.norm(fd)
    assert rel < 1e-5


def test_vjp_constant_image_equal_gradient():
    B = 9
    up = np.arange(B) - (B - 1) / 2.0  # antisymmetric about the middle bin
    g = soft_histogram_vjp(np.full((4, 5), 0.37), KdeConfig(B), up)
    assert np.ptp(g) == 0.0
    assert g[0, 0] != 0.0


def test_vjp_shape_check():
    with pytest.raises(ValueError):
        soft_histogram_vjp(np.zeros((2, 2)), KdeConfig(8), np.zeros(7))
