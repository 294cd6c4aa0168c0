"""Joint restoration of the image and the adaptive contrast map.

Outer loop: deterministic DDIM sampling, with the denoiser as the prior
step.  Inner loop: ``J`` joint gradient steps on ``z`` and ``alpha``
against

    L = ||y - H phi_hat(z; alpha)||^2 + lambda_t ||z - x0_hat||^2,

re-matching the LUT from the current ``z`` before every step.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field

import numpy as np

from .histogram import Histogram, KdeConfig, floored, soft_histogram
from .metrics import psnr
from .ot import Lut, SinkhornConfig
from .priors import Denoiser, DiffusionSchedule, ddim_step, noise_level_of
from .tensor_io import Rng, as_image, check_canonical
from .errors import NonFiniteError, ShapeMismatch
from .transport import (
    ForwardConfig,
    adaptive_transport,
    fidelity_loss_and_grads,
    match_lut,
)


class Optimizer(enum.Enum):
    GRADIENT_DESCENT = "gd"
    ADAPTIVE_MOMENT = "adam"


@dataclass(frozen=True)
class SolverConfig:
    T: int = 50
    J: int = 25
    eta_x: float = 0.1
    eta_alpha: float = 0.1
    lambda_t: float | tuple = 0.1  # constant, or one value per outer step
    alpha_init: float = 0.5
    sinkhorn: SinkhornConfig = SinkhornConfig()
    kde: KdeConfig = KdeConfig()
    forward: ForwardConfig = ForwardConfig()
    optimizer: Optimizer = Optimizer.ADAPTIVE_MOMENT
    seed: int = 0
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1 or self.J < 1:
            raise ValueError("T and J must be >= 1")
        if not (self.eta_x > 0 and self.eta_alpha > 0):
            raise ValueError("step sizes must be positive")
        if not 0.0 <= self.alpha_init <= 1.0:
            raise ValueError("alpha_init must lie in [0, 1]")
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if not np.isscalar(self.lambda_t):
            lam = tuple(float(v) for v in self.lambda_t)
            if len(lam) != self.T:
                raise ValueError(f"lambda_t schedule needs {self.T} values, got {len(lam)}")
            object.__setattr__(self, "lambda_t", lam)
        if np.any(np.asarray(self.lambda_t) < 0):
            raise ValueError("lambda_t must be non-negative")

    def lambda_at(self, i: int) -> float:
        return float(self.lambda_t) if np.isscalar(self.lambda_t) else self.lambda_t[i]

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T_train, self.beta_start, self.beta_end, self.T)


class _Adam:
    """Adaptive-moment update with bias correction."""
    b1, b2, eps = 0.9, 0.999, 1e-8

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.n = 0

    def step(self, grad, lr):
        self.n += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.n)
        v_hat = self.v / (1 - self.b2 ** self.n)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


class _Plain:
    def __init__(self, shape):
        pass

    def step(self, grad, lr):
        return lr * grad


INNER_FIELDS = ("step", "t", "j", "loss", "fidelity", "coupling",
                "sinkhorn_iters", "marginal_err", "sinkhorn_converged")
OUTER_FIELDS = ("step", "t", "sigma", "lambda_t", "psnr", "mean_alpha", "forward_error")


@dataclass
class SolverTrace:
    """Per inner step and per outer step records of one reconstruction."""
    T: int
    J: int
    inner: list = field(default_factory=list)
    outer: list = field(default_factory=list)

    def column(self, name: str, outer: bool = False) -> np.ndarray:
        rows = self.outer if outer else self.inner
        return np.array([np.nan if r[name] is None else r[name] for r in rows], dtype=float)

    @property
    def nonconverged(self) -> int:
        return sum(1 for r in self.inner if not r["sinkhorn_converged"])

    def to_csv(self) -> str:
        """One table, ``kind`` = ``inner`` or ``outer``; empty cells where a field does not apply."""
        cols = ("kind",) + tuple(dict.fromkeys(INNER_FIELDS + OUTER_FIELDS))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for kind, rows in (("inner", self.inner), ("outer", self.outer)):
            for r in rows:
                w.writerow([kind] + [_fmt(r.get(c)) for c in cols[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class Reconstruction:
    x0: np.ndarray
    alpha: np.ndarray
    lut: Lut
    trace: SolverTrace

    def __iter__(self):
        # unpacks as (x0, alpha, trace)
        return iter((self.x0, self.alpha, self.trace))


def reconstruct(y, denoiser: Denoiser, cfg: SolverConfig = SolverConfig(),
                ground_truth=None, true_transform=None) -> Reconstruction:
    """Restore the high-resolution image behind ``y``.

    ``ground_truth`` (and ``true_transform``, the generating contrast map)
    are only used for the trace: PSNR per outer step and the forward-model
    error ``||phi_true(x_gt) - phi_hat(x_gt; alpha_t)||_2``.
    """
    y = as_image(y, "y")
    check_canonical(y, "y")
    k = int(cfg.forward.downsample_factor)
    shape = (y.shape[0] * k, y.shape[1] * k)
    if ground_truth is not None:
        ground_truth = as_image(ground_truth, "ground_truth")
        if ground_truth.shape != shape:
            raise ShapeMismatch(f"ground truth {ground_truth.shape} does not match {shape}")
    target = true_transform(ground_truth) if (
        true_transform is not None and ground_truth is not None) else None

    sched = cfg.schedule
    steps = sched.sampling_steps
    rng = Rng(cfg.seed)
    x_t = rng.normal(shape)
    alpha = np.full(shape, float(cfg.alpha_init))
    h_y = floored(soft_histogram(y, cfg.kde))
    opt = _Adam if cfg.optimizer is Optimizer.ADAPTIVE_MOMENT else _Plain
    alpha_opt = opt(shape)
    trace = SolverTrace(cfg.T, cfg.J)
    z = lut = None

    for i, t in enumerate(steps):
        t = int(t)
        t_prev = int(steps[i + 1]) if i + 1 < len(steps) else -1
        sigma = noise_level_of(t, sched)
        lam = cfg.lambda_at(i)
        x0_hat = np.asarray(denoiser(x_t / np.sqrt(sched.alpha_bar(t)), sigma), dtype=np.float64)
        if x0_hat.shape != shape or not np.all(np.isfinite(x0_hat)):
            raise NonFiniteError(f"denoiser returned an invalid estimate at step {t}")
        x0_hat = np.clip(x0_hat, 0.0, 1.0)
        z = x0_hat.copy()
        z_opt = opt(shape)
        for j in range(cfg.J):
            lut = match_lut(z, h_y, cfg.kde, cfg.sinkhorn)
            res = fidelity_loss_and_grads(z, alpha, y, x0_hat, lut, lam, cfg.forward)
            plan = lut.plan
            trace.inner.append(dict(
                step=i, t=t, j=j, loss=res.loss, fidelity=res.fidelity, coupling=res.coupling,
                sinkhorn_iters=plan.iterations, marginal_err=plan.marginal_error,
                sinkhorn_converged=plan.converged))
            z = np.clip(z - z_opt.step(res.grad_z, cfg.eta_x), 0.0, 1.0)
            alpha = np.clip(alpha - alpha_opt.step(res.grad_alpha, cfg.eta_alpha), 0.0, 1.0)
        lut = match_lut(z, h_y, cfg.kde, cfg.sinkhorn)
        x_t = ddim_step(x_t, z, t, t_prev, sched)
        fwd_err = None
        if target is not None:
            fwd_err = float(np.linalg.norm(target - adaptive_transport(ground_truth, lut, alpha)))
        trace.outer.append(dict(
            step=i, t=t, sigma=sigma, lambda_t=lam,
            psnr=psnr(z, ground_truth) if ground_truth is not None else None,
            mean_alpha=float(alpha.mean()), forward_error=fwd_err))
    return Reconstruction(z, alpha, lut, trace)


def effective_mapping(x0, alpha, lut: Lut) -> Lut:
    """Learned intensity map ``v -> a(v) LUT(v) + (1 - a(v)) v`` on the LUT's bin grid.

    ``a(v)`` is the mean of ``alpha`` over the pixels of ``x0`` whose value
    falls in the bin of ``v``; bins without pixels take ``a`` interpolated
    from the nearest populated bins.
    """
    x0 = as_image(x0, "x0")
    alpha = as_image(alpha, "alpha")
    if x0.shape != alpha.shape:
        raise ShapeMismatch("x0 and alpha differ in shape")
    c = lut.centers
    edges = np.concatenate(([-np.inf], (c[:-1] + c[1:]) / 2, [np.inf]))
    idx = np.searchsorted(edges, x0.ravel(), side="right") - 1
    count = np.bincount(idx, minlength=c.size)
    total = np.bincount(idx, alpha.ravel(), minlength=c.size)
    full = count > 0
    a = np.interp(c, c[full], total[full] / count[full])
    return Lut(c.copy(), a * lut.values + (1.0 - a) * c)
