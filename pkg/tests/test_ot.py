import numpy as np
import pytest
from hypothesis import given, strategies as st

from dact import SinkhornConfig, cost_matrix, extract_lut, sinkhorn
from dact.errors import NonConvergence, ZeroRow
from dact.histogram import floor_masses
from dact.ot import Lut, TransportPlan, _staircase_potentials, lut_from_potential, lut_vjp_src

from conftest import random_histogram, smooth_histogram
from oracles import exact_ot_cost, monotone_rearrangement, northwest_corner


def grid(B):
    return (np.arange(B) + 0.5) / B


def plan_from(P, cs, ct):
    P = np.asarray(P, dtype=float)
    return TransportPlan(P, P.sum(1), P.sum(0), np.asarray(cs, float), np.asarray(ct, float),
                         1e-3, 0, 0.0, True, np.zeros(len(cs)), np.zeros(len(ct)))


def test_cost_matrix_two_centers():
    np.testing.assert_array_equal(cost_matrix([0.25, 0.75], [0.25, 0.75]),
                                  [[0, 0.25], [0.25, 0]])


def test_cost_matrix_oracle():
    c = grid(64)
    C = cost_matrix(c, c)
    ref = np.array([[(ci - cj) ** 2 for cj in c] for ci in c])
    assert np.array_equal(C, ref)
    assert np.array_equal(C, C.T)


def test_identical_histograms_concentrate_on_diagonal(np_rng):
    h = random_histogram(np_rng, 16)
    plan = sinkhorn(h, h, SinkhornConfig(epsilon=1e-4))
    assert plan.converged
    assert np.trace(plan.coupling) >= 0.99


def test_two_bin_shift():
    a, b = floor_masses([1.0, 0.0]), floor_masses([0.0, 1.0])
    plan = sinkhorn(a, b, SinkhornConfig(epsilon=1e-3))
    assert plan.coupling[0, 1] >= 1 - 1e-6
    lut = extract_lut(plan)
    assert lut.values[0] == pytest.approx(plan.tgt_centers[1], abs=1e-9)


def test_lp_oracle_self_check(np_rng):
    # the comonotone coupling is optimal for convex costs in 1-D
    for _ in range(10):
        a, b = random_histogram(np_rng, 8), random_histogram(np_rng, 8)
        C = cost_matrix(grid(8), grid(8))
        assert exact_ot_cost(a, b, C) == pytest.approx(np.sum(C * northwest_corner(a, b)),
                                                       abs=1e-12)


def test_entropic_cost_near_lp(np_rng):
    eps = 0.01
    for _ in range(10):
        a, b = random_histogram(np_rng, 8), random_histogram(np_rng, 8)
        plan = sinkhorn(a, b, SinkhornConfig(epsilon=eps))
        lp = exact_ot_cost(a, b, cost_matrix(grid(8), grid(8)))
        assert plan.cost() - lp <= eps * np.log(64) + 1e-6
        assert plan.cost() >= lp - 1e-9


def test_epsilon_consistency(np_rng):
    a, b = random_histogram(np_rng, 32), random_histogram(np_rng, 32)
    costs = [sinkhorn(a, b, SinkhornConfig(epsilon=e)).cost() for e in (0.1, 0.01, 0.001)]
    lp = exact_ot_cost(a, b, cost_matrix(grid(32), grid(32)))
    assert costs[0] >= costs[1] >= costs[2] >= lp - 1e-9


def test_swap_transposes_plan(np_rng):
    # solved tighter than default so the comparison is not limited by the
    # 1e-8 stopping tolerance of each solve
    cfg = SinkhornConfig(marginal_tol=1e-12)
    for _ in range(20):
        a, b = random_histogram(np_rng, 64), random_histogram(np_rng, 64)
        p = sinkhorn(a, b, cfg).coupling
        q = sinkhorn(b, a, cfg).coupling
        assert np.max(np.abs(p - q.T)) < 1e-9


def test_diagonal_plan_gives_identity():
    c = grid(6)
    lut = extract_lut(plan_from(np.diag(np.full(6, 1 / 6)), c, c))
    np.testing.assert_array_equal(lut.values, c)


def test_zero_row():
    P = np.array([[0.5, 0.5], [0.0, 0.0]])
    with pytest.raises(ZeroRow):
        extract_lut(plan_from(P, grid(2), grid(2)))


def test_requires_positive_masses():
    with pytest.raises(ValueError):
        sinkhorn(np.array([1.0, 0.0]), np.array([0.5, 0.5]))


def test_strict_nonconvergence(np_rng):
    a, b = random_histogram(np_rng, 64), random_histogram(np_rng, 64)
    plan = sinkhorn(a, b, SinkhornConfig(max_iters=2))
    assert not plan.converged
    with pytest.raises(NonConvergence):
        sinkhorn(a, b, SinkhornConfig(max_iters=2), strict=True)


def test_plain_relaxation_also_converges(np_rng):
    a, b = smooth_histogram(np_rng, 64), smooth_histogram(np_rng, 64)
    plan = sinkhorn(a, b, SinkhornConfig(relaxation=1.0, max_iters=5000))
    assert plan.converged and plan.marginal_error < 1e-8


def test_small_epsilon_large_grid_is_stable(np_rng):
    a, b = smooth_histogram(np_rng, 256), smooth_histogram(np_rng, 256)
    plan = sinkhorn(a, b, SinkhornConfig(epsilon=1e-4))
    assert np.all(np.isfinite(plan.coupling))
    assert plan.converged


def test_lut_matches_rearrangement(np_rng):
    B = 256
    a, b = smooth_histogram(np_rng, B), smooth_histogram(np_rng, B)
    lut = extract_lut(sinkhorn(a, b, SinkhornConfig(epsilon=1e-4)))
    assert np.max(np.abs(lut.values - monotone_rearrangement(a, b, grid(B)))) <= 2 / B


def test_lut_from_potential_agrees(np_rng):
    a, b = random_histogram(np_rng, 64), random_histogram(np_rng, 64)
    plan = sinkhorn(a, b)
    np.testing.assert_allclose(lut_from_potential(plan.g, plan.src_centers, plan.tgt_centers,
                                                  plan.epsilon),
                               extract_lut(plan).values, rtol=0, atol=1e-8)


def test_lut_vjp_directional_fd(np_rng):
    B = 32
    cfg = SinkhornConfig(epsilon=1e-2, marginal_tol=1e-13, max_iters=2000)
    a, b = smooth_histogram(np_rng, B), smooth_histogram(np_rng, B)
    up = np_rng.normal(size=B)
    d = np_rng.normal(size=B)
    d -= d.mean()  # stay on the simplex
    g = lut_vjp_src(sinkhorn(a, b, cfg), up)
    h = 1e-6
    fp = up @ extract_lut(sinkhorn(a + h * d, b, cfg)).values
    fm = up @ extract_lut(sinkhorn(a - h * d, b, cfg)).values
    fd = (fp - fm) / (2 * h)
    assert g @ d == pytest.approx(fd, rel=1e-5)


def test_lut_call_clamps():
    lut = Lut(np.array([0.25, 0.75]), np.array([0.1, 0.9]))
    np.testing.assert_allclose(lut([0.0, 0.5, 1.0]), [0.1, 0.5, 0.9])


@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 80), st.floats(0.0, 0.9))
def test_feasible_and_monotone(seed, bins, sparsity):
    rng = np.random.default_rng(seed)
    a, b = random_histogram(rng, bins, sparsity), random_histogram(rng, bins, sparsity)
    plan = sinkhorn(a, b)
    assert plan.converged
    P = plan.coupling
    assert np.abs(P.sum(1) - a).sum() < 1e-8
    assert np.abs(P.sum(0) - b).sum() < 1e-8
    assert np.all(P >= 0)
    assert np.all(np.diff(extract_lut(plan).values) >= -1e-9)


def test_bad_config():
    for kw in (dict(epsilon=0), dict(marginal_tol=0), dict(max_iters=0), dict(relaxation=2.0)):
        with pytest.raises(ValueError):
            SinkhornConfig(**kw)


@pytest.mark.parametrize("sparsity", [0.0, 0.6])
def test_staircase_potentials_are_optimal_dual(sparsity):
    rng = np.random.default_rng(11)
    for _ in range(10):
        a, b = random_histogram(rng, 12, sparsity), random_histogram(rng, 12, sparsity)
        C = cost_matrix(grid(12), grid(12))
        f, g = _staircase_potentials(a, b, C)
        slack = C - f[:, None] - g[None, :]
        assert slack.min() >= -1e-12
        # tight on the support of the north-west-corner coupling
        assert np.abs(slack[northwest_corner(a, b) > 0]).max() < 1e-12
        assert f @ a + g @ b == pytest.approx(exact_ot_cost(a, b, C), abs=1e-9)
