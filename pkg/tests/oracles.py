"""Independent reference solutions used by several test modules."""
import numpy as np
from scipy.optimize import linprog


def exact_ot_cost(a, b, C):
    """Unregularized OT cost by linear programming over the B x B coupling."""
    n, m = C.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None),
                  method="highs")
    assert res.status == 0
    return float(res.fun)


def northwest_corner(a, b):
    """Monotone (comonotone) coupling of two 1-D histograms on sorted supports."""
    a, b = np.array(a, dtype=float), np.array(b, dtype=float)
    P = np.zeros((a.size, b.size))
    i = j = 0
    while i < a.size and j < b.size:
        m = min(a[i], b[j])
        P[i, j] = m
        a[i] -= m
        b[j] -= m
        if a[i] <= 1e-15:
            i += 1
        else:
            j += 1
    return P


def monotone_rearrangement(a, b, centers):
    """Inverse target CDF composed with the source CDF, both at bin midpoints."""
    Fa = np.cumsum(a) - a / 2
    Fb = np.cumsum(b) - b / 2
    return np.interp(Fa, Fb, centers)


def scalar_interp(v, xs, ys):
    """Piecewise-linear interpolation of one value, clamped at the ends."""
    if v <= xs[0]:
        return ys[0]
    if v >= xs[-1]:
        return ys[-1]
    for i in range(len(xs) - 1):
        if xs[i] <= v <= xs[i + 1]:
            t = (v - xs[i]) / (xs[i + 1] - xs[i])
            return ys[i] + t * (ys[i + 1] - ys[i])
    raise AssertionError("unreachable")
