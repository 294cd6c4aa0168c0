"""Entropic optimal transport between 1-D histograms and the induced LUT.

The solver works on the dual potentials ``f, g`` of the entropic problem
in two phases:

1. Stabilized Sinkhorn sweeps.  The working kernel is
   ``exp((f_i + g_j - C_ij) / eps)`` and the bounded scaling vectors
   ``u, v`` are folded back into ``f, g`` whenever they drift past
   ``ABSORB``, so every exponent stays near zero on the support of the
   plan and ``eps = 1e-4`` on a 256-bin grid remains finite.  Sweeps are
   over-relaxed, ``f <- (1 - w) f + w * f_sinkhorn`` with
   ``w = 2 / (1 + sqrt(6 eps / diam^2))``; plain sweeps contract at roughly
   ``1 - 6 eps / diam^2`` and would need thousands of passes at 1e-3.
2. Once the marginal error drops below ``NEWTON_SWITCH``, damped Newton
   steps on the same dual finish the solve.  Near-empty bins make the
   relaxed sweeps' asymptotic rate erratic; the Newton polish converges in
   a handful of steps regardless.

Both phases count towards ``max_iters``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence, NonFiniteError, ShapeMismatch, ZeroRow
from .histogram import Histogram

ABSORB = 1e50
NEWTON_SWITCH = 1e-2
_RATE_COEF = 6.0
_MAX_RELAX = 1.9
_WARMUP = 10
_DIVERGED = 100.0
_LINE_SEARCH = 40
_STALL = 40
_STALL_GAIN = 0.5
_MAX_MOVE = 10.0


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1e-3
    max_iters: int = 500
    marginal_tol: float = 1e-8
    relaxation: float | None = None  # None: chosen from epsilon; 1.0: plain Sinkhorn

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.marginal_tol > 0:
            raise ValueError("marginal_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.relaxation is not None and not 0 < self.relaxation < 2:
            raise ValueError("relaxation must lie in (0, 2)")


@dataclass
class TransportPlan:
    coupling: np.ndarray
    src_marginal: np.ndarray
    tgt_marginal: np.ndarray
    src_centers: np.ndarray
    tgt_centers: np.ndarray
    epsilon: float
    iterations: int
    marginal_error: float
    converged: bool
    f: np.ndarray
    g: np.ndarray
    sweeps: int = 0
    newton_steps: int = 0

    def cost(self) -> float:
        return float(np.sum(cost_matrix(self.src_centers, self.tgt_centers) * self.coupling))


@dataclass(frozen=True)
class Lut:
    """Monotone piecewise-linear intensity map given by its knots."""
    centers: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.centers.shape != self.values.shape or self.centers.ndim != 1:
            raise ShapeMismatch("LUT knots and values must be matching 1-D arrays")

    @classmethod
    def identity(cls, centers) -> "Lut":
        c = np.asarray(centers, dtype=np.float64)
        return cls(c, c.copy())

    def is_monotone(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.diff(self.values) >= -tol))

    def __call__(self, v):
        from .transport import apply_lut
        return apply_lut(v, self)


def cost_matrix(centers_src, centers_tgt) -> np.ndarray:
    """Squared Euclidean ground cost between two sets of bin centers."""
    cs = np.asarray(centers_src, dtype=np.float64)
    ct = np.asarray(centers_tgt, dtype=np.float64)
    return (cs[:, None] - ct[None, :]) ** 2


def default_relaxation(epsilon: float, diameter2: float = 1.0) -> float:
    gap = _RATE_COEF * epsilon / max(diameter2, 1e-300)
    if gap >= 1.0:
        return 1.0
    return min(_MAX_RELAX, 2.0 / (1.0 + np.sqrt(gap)))


def _as_masses(h) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(h, Histogram):
        return np.asarray(h.masses, dtype=np.float64), h.centers
    return np.asarray(h, dtype=np.float64), None


def sinkhorn(h_src, h_tgt, cfg: SinkhornConfig = SinkhornConfig(), *,
             src_centers=None, tgt_centers=None, strict: bool = False) -> TransportPlan:
    """Entropic OT plan between two histograms on the squared cost.

    ``h_src`` / ``h_tgt`` are :class:`Histogram` objects or bare mass
    vectors (then the centers default to the uniform grid on [0, 1]).
    Masses must be strictly positive; apply the histogram floor first.

    The plan is returned even when ``marginal_tol`` was not reached within
    ``max_iters``; ``converged`` is then False.  Pass ``strict=True`` to
    raise :class:`NonConvergence` instead.
    """
    a, ca = _as_masses(h_src)
    b, cb = _as_masses(h_tgt)
    ca = _grid(a.size) if src_centers is None and ca is None else np.asarray(
        ca if src_centers is None else src_centers, dtype=np.float64)
    cb = _grid(b.size) if tgt_centers is None and cb is None else np.asarray(
        cb if tgt_centers is None else tgt_centers, dtype=np.float64)
    if a.shape != ca.shape or b.shape != cb.shape:
        raise ShapeMismatch("histogram masses and centers differ in length")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("histogram masses must be strictly positive (apply the floor)")
    eps = float(cfg.epsilon)
    C = cost_matrix(ca, cb)
    diam2 = (max(ca[-1], cb[-1]) - min(ca[0], cb[0])) ** 2
    omega = default_relaxation(eps, diam2) if cfg.relaxation is None else float(cfg.relaxation)

    f0 = g0 = None
    if np.all(np.diff(ca) > 0) and np.all(np.diff(cb) > 0):
        f0, g0 = _staircase_potentials(a, b, C)
    f, g, sweeps, err = _sweeps(a, b, C, eps, omega, cfg.max_iters,
                                max(cfg.marginal_tol, NEWTON_SWITCH), f0, g0)
    steps = 0
    if err >= cfg.marginal_tol:
        f, g, steps, err = _newton(a, b, C, eps, f, g, cfg.max_iters - sweeps, cfg.marginal_tol)
    if err >= cfg.marginal_tol and sweeps + steps < cfg.max_iters:
        # Newton stalled (line search exhausted): spend what is left on sweeps
        f, g, more, err = _sweeps(a, b, C, eps, 1.0, cfg.max_iters - sweeps - steps,
                                  cfg.marginal_tol, f, g)
        sweeps += more
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise NonFiniteError(f"dual potentials overflowed (eps={eps:g})")
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    err = _marginal_error(P, a, b)
    converged = bool(err < cfg.marginal_tol)
    n = sweeps + steps
    if strict and not converged:
        raise NonConvergence(
            f"marginal error {err:.3e} after {n} iterations (tol {cfg.marginal_tol:g})")
    return TransportPlan(P, a, b, ca, cb, eps, n, float(err), converged, f, g,
                         sweeps=sweeps, newton_steps=steps)


def _staircase_potentials(a, b, C):
    """Exact unregularized dual potentials of a 1-D problem with sorted centers.

    The north-west-corner coupling is optimal for a Monge cost; its support is
    a staircase through every row and column, and ``f_i + g_j = C_ij`` on it
    fixes both potentials.  They are dual feasible, so every row of
    ``exp((f + g - C) / eps)`` keeps an entry equal to one.
    """
    n, m = C.shape
    f = np.zeros(n)
    g = np.zeros(m)
    g[0] = C[0, 0]
    ra, rb = a[0], b[0]
    i = j = 0
    while i < n - 1 or j < m - 1:
        if j == m - 1 or (i < n - 1 and ra <= rb):
            rb -= ra
            i += 1
            ra = a[i]
            f[i] = C[i, j] - g[j]
        else:
            ra -= rb
            j += 1
            rb = b[j]
            g[j] = C[i, j] - f[i]
    return f, g


def _marginal_error(P, a, b) -> float:
    return float(max(np.abs(P.sum(axis=1) - a).sum(), np.abs(P.sum(axis=0) - b).sum()))


def _sweeps(a, b, C, eps, omega, budget, tol, f=None, g=None):
    """Stabilized, over-relaxed Sinkhorn sweeps until the error is below ``tol``.

    Returns the potentials, the sweeps spent and the final marginal error.
    """
    f = np.zeros(a.size) if f is None else f.copy()
    g = np.zeros(b.size) if g is None else g.copy()
    u, v = np.ones(a.size), np.ones(b.size)
    K = np.exp((f[:, None] + g[None, :] - C) / eps)
    KT = np.ascontiguousarray(K.T)
    snapshot = (f.copy(), g.copy())
    best_err = err = np.inf
    n = best_at = 0
    while n < budget:
        n += 1
        w = 1.0 if n <= _WARMUP else omega
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            if w == 1.0:
                u = a / (K @ v)
                Ktu = KT @ u
                v = b / Ktu
            else:
                u = u ** (1.0 - w) * (a / (K @ v)) ** w
                Ktu = KT @ u
                v = v ** (1.0 - w) * (b / Ktu) ** w
            healthy = (u.max() < ABSORB and v.max() < ABSORB
                       and u.min() > 1 / ABSORB and v.min() > 1 / ABSORB)
        if not healthy:
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))
                    and np.all(u > 0) and np.all(v > 0)):
                if w == 1.0:
                    raise NonFiniteError(
                        f"Sinkhorn scalings left the finite range at sweep {n} (eps={eps:g})")
                # relaxed sweep blew up: restart from the last good potentials, damped
                f, g = snapshot[0].copy(), snapshot[1].copy()
                omega = 1.0 + 0.5 * (omega - 1.0)
                u, v = np.ones(a.size), np.ones(b.size)
                K = np.exp((f[:, None] + g[None, :] - C) / eps)
                KT = np.ascontiguousarray(K.T)
                best_err = np.inf
                continue
            f, g = f + eps * np.log(u), g + eps * np.log(v)
            u, v = np.ones(a.size), np.ones(b.size)
            K = np.exp((f[:, None] + g[None, :] - C) / eps)
            KT = np.ascontiguousarray(K.T)
            Ktu = KT @ u
        err = max(np.abs(u * (K @ v) - a).sum(), np.abs(v * Ktu - b).sum())
        if err < tol:
            break
        if err < _STALL_GAIN * best_err:
            best_err, best_at = err, n
        elif n - best_at > _STALL and w > 1.0:
            break  # relaxed sweeps cycling; let Newton take over
        if err <= best_err:
            if n % 10 == 0:
                snapshot = (f + eps * np.log(u), g + eps * np.log(v))
        elif w > 1.0 and err > _DIVERGED * best_err:
            f, g = snapshot[0].copy(), snapshot[1].copy()
            omega = 1.0 + 0.5 * (omega - 1.0)
            u, v = np.ones(a.size), np.ones(b.size)
            K = np.exp((f[:, None] + g[None, :] - C) / eps)
            KT = np.ascontiguousarray(K.T)
            best_err = np.inf
    return f + eps * np.log(u), g + eps * np.log(v), n, float(err)


def _newton(a, b, C, eps, f, g, budget, tol):
    """Damped Newton ascent on the concave entropic dual.

    Backtracks until the dual objective ``<f, a> + <g, b> - eps * sum(P)``
    increases, which keeps the iteration globally convergent.  Close to the
    optimum the dual is flat below float resolution, so a step that lowers
    the marginal error is accepted as well.
    """
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    dual = f @ a + g @ b - eps * P.sum()
    err = _marginal_error(P, a, b)
    n = 0
    while err >= tol and n < budget:
        n += 1
        r, c = P.sum(axis=1), P.sum(axis=0)
        ra, rb = eps * (a - r), eps * (b - c)
        df, dg = _dual_solve(P, r, c, ra, rb)
        slope = (df @ (a - r) + dg @ (b - c))
        # far from the optimum the directions of near-empty bins are huge;
        # start the search at a step that moves no potential by more than _MAX_MOVE eps
        t = min(1.0, _MAX_MOVE * eps / max(np.abs(df).max(), np.abs(dg).max(), 1e-300))
        for _ in range(_LINE_SEARCH):
            with np.errstate(over="ignore", invalid="ignore"):
                f2, g2 = f + t * df, g + t * dg
                P2 = np.exp((f2[:, None] + g2[None, :] - C) / eps)
                dual2 = f2 @ a + g2 @ b - eps * P2.sum()
                if dual2 >= dual + 1e-4 * t * slope:
                    err2 = _marginal_error(P2, a, b)
                    break
                err2 = _marginal_error(P2, a, b)
            if err2 < err:
                break
            t *= 0.5
        else:
            return f, g, n, err
        f, g, P, dual, err = f2, g2, P2, dual2, err2
    return f, g, n, err


def _dual_solve(P, r, c, rhs_f, rhs_g):
    """Solve the dual Hessian system by eliminating ``f``.

    ``[[diag(r), P], [P^T, diag(c)]] [x; y] = [rhs_f; rhs_g]``, with the
    constant-shift gauge fixed by ``y[-1] = 0``.
    """
    Pr = P / r[:, None]
    S = np.diag(c) - P.T @ Pr
    rhs = rhs_g - Pr.T @ rhs_f
    y = np.zeros(c.size)
    y[:-1] = np.linalg.solve(S[:-1, :-1], rhs[:-1])
    x = (rhs_f - P @ y) / r
    return x, y


def _grid(bins: int) -> np.ndarray:
    return (np.arange(bins) + 0.5) / bins


def extract_lut(plan: TransportPlan, tgt_centers=None) -> Lut:
    """Barycentric projection: each source bin maps to the plan's mean target."""
    ct = plan.tgt_centers if tgt_centers is None else np.asarray(tgt_centers, dtype=np.float64)
    P = plan.coupling
    rows = P.sum(axis=1)
    if np.any(rows <= 0):
        raise ZeroRow(f"{int(np.sum(rows <= 0))} plan rows carry no mass")
    values = (P @ ct) / rows
    return Lut(np.array(plan.src_centers, dtype=np.float64), values)


def lut_from_potential(g, src_centers, tgt_centers, epsilon: float) -> np.ndarray:
    """LUT values from the target potential alone.

    Row-normalizing the plan cancels the source potential, so each row of
    the normalized plan is a softmax of ``(g_j - C_ij) / eps`` over ``j``.
    """
    S = _row_softmax((np.asarray(g)[None, :] - cost_matrix(src_centers, tgt_centers)) / epsilon)
    return S @ np.asarray(tgt_centers, dtype=np.float64)


def _row_softmax(M: np.ndarray) -> np.ndarray:
    E = np.exp(M - M.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def lut_vjp_src(plan: TransportPlan, upstream) -> np.ndarray:
    """Gradient of ``<upstream, LUT values>`` w.r.t. the source masses.

    Differentiates the Sinkhorn fixed point implicitly: at a solution the
    plan's marginals equal ``(a, b)``, so perturbing ``a`` moves the
    potentials through the dual Hessian.  Exact for converged plans.
    """
    eps = plan.epsilon
    cs, ct = plan.src_centers, plan.tgt_centers
    C = cost_matrix(cs, ct)
    up = np.asarray(upstream, dtype=np.float64)
    S = _row_softmax((plan.g[None, :] - C) / eps)
    L = S @ ct
    g_bar = ((up[:, None] * S) * (ct[None, :] - L[:, None])).sum(axis=0) / eps
    P = np.exp((plan.f[:, None] + plan.g[None, :] - C) / eps)
    x, _ = _dual_solve(P, P.sum(axis=1), P.sum(axis=0), np.zeros(cs.size), g_bar)
    return eps * x


def _col_softmax(M: np.ndarray) -> np.ndarray:
    E = np.exp(M - M.max(axis=0, keepdims=True))
    return E / E.sum(axis=0, keepdims=True)
