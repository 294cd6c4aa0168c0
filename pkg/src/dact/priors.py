"""Denoiser priors and the deterministic DDIM sampling schedule.

A denoiser is any callable ``denoise(noisy, sigma) -> image`` where
``sigma`` is the noise standard deviation of ``noisy``.  The classical
stand-ins here replace a trained diffusion network; :class:`ExternalDenoiser`
forwards the same call to a subprocess so a network can be plugged in
without touching the solver.
"""
from __future__ import annotations

import struct
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, ProtocolViolation, ShapeMismatch
from .tensor_io import as_image, check_same_shape, decode_tensor, encode_tensor

GAUSSIAN_BLUR = 2.0  # spatial std in pixels per unit of sigma
GAUSSIAN_TRUNCATE = 4.0
TV_WEIGHT = 1.0
TV_ITERS = 200
TV_STEP = 0.125
ORACLE_FLOOR = 0.05


class Denoiser(Protocol):
    def __call__(self, noisy: np.ndarray, sigma: float) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance-preserving linear-beta schedule and its DDIM sub-sequence.

    Steps are 0-based: ``alpha_bars[0] = 1 - betas[0]``.  The sampling
    sub-sequence runs from ``T_train - 1`` down to 0, evenly spaced.
    """
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 50
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T_train < 2 or not 1 <= self.steps <= self.T_train:
            raise ValueError("need T_train >= 2 and 1 <= steps <= T_train")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.T_train)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def sampling_steps(self) -> np.ndarray:
        if self.steps == 1:
            return np.array([self.T_train - 1])
        return np.round(np.linspace(self.T_train - 1, 0, self.steps)).astype(int)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar`` at step ``t``; ``t = -1`` denotes the clean end (1.0)."""
        t = int(t)
        if t == -1:
            return 1.0
        if not 0 <= t < self.T_train:
            raise ValueError(f"step {t} outside [0, {self.T_train})")
        return float(self.alpha_bars[t])


def noise_level_of(t: int, sched: DiffusionSchedule) -> float:
    """Noise std of ``x_t / sqrt(alpha_bar_t)``: ``sqrt((1 - ab) / ab)``."""
    ab = sched.alpha_bar(t)
    return float(np.sqrt((1.0 - ab) / ab))


def ddim_step(x_t, z, t: int, t_prev: int, sched: DiffusionSchedule) -> np.ndarray:
    """Deterministic DDIM update from step ``t`` to ``t_prev`` given clean estimate ``z``.

    ``t_prev = -1`` lands on the clean image.  ``t == t_prev`` is allowed
    and returns ``x_t``.
    """
    if int(t_prev) > int(t) or int(t) < 0:
        raise ValueError(f"invalid DDIM step {t} -> {t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    check_same_shape(x_t, z, "x_t and z")
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    if t == t_prev:
        return x_t.copy()
    eps_hat = (x_t - np.sqrt(ab) * z) / np.sqrt(1.0 - ab)
    return np.sqrt(ab_prev) * z + np.sqrt(1.0 - ab_prev) * eps_hat


# ---------------------------------------------------------------------------
# classical denoisers

def gaussian_denoiser(noisy, sigma: float, blur: float = GAUSSIAN_BLUR) -> np.ndarray:
    """Gaussian smoothing with spatial std ``blur * sigma`` pixels, reflective boundary."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    noisy = np.asarray(noisy, dtype=np.float64)
    if sigma == 0 or blur == 0:
        return noisy.copy()
    return gaussian_filter(noisy, blur * sigma, mode="reflect", truncate=GAUSSIAN_TRUNCATE)


def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:-1, :] = u[1:, :] - u[:-1, :]
    gy[:, :-1] = u[:, 1:] - u[:, :-1]
    return gx, gy


def _div(px, py):
    """Negative adjoint of :func:`_grad`."""
    d = np.zeros_like(px)
    d[0, :] = px[0, :]
    d[1:-1, :] = px[1:-1, :] - px[:-2, :]
    d[-1, :] = -px[-2, :]
    d[:, 0] += py[:, 0]
    d[:, 1:-1] += py[:, 1:-1] - py[:, :-2]
    d[:, -1] += -py[:, -2]
    return d


def total_variation(u) -> float:
    """Isotropic TV with forward differences (Neumann boundary)."""
    gx, gy = _grad(np.asarray(u, dtype=np.float64))
    return float(np.sum(np.sqrt(gx * gx + gy * gy)))


def rof_objective(u, noisy, tau: float) -> float:
    u = np.asarray(u, dtype=np.float64)
    return float(0.5 * np.sum((u - noisy) ** 2) + tau * total_variation(u))


def tv_denoiser(noisy, sigma: float, inner_iters: int = TV_ITERS,
                weight: float = TV_WEIGHT, history: list | None = None) -> np.ndarray:
    """ROF denoising, ``argmin ||u - noisy||^2 / 2 + tau TV(u)`` with ``tau = weight * sigma^2``.

    Runs a fixed number of dual projection iterations: accelerated
    projected-gradient steps on the dual (Beck-Teboulle), restarted with a
    plain Chambolle step whenever the primal objective would increase.
    Plain Chambolle needs thousands of passes to flatten low frequencies
    when ``tau`` is large; the restart keeps the objective monotone.  When
    ``history`` is given, the primal objective after every iteration is
    appended to it.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    f = np.asarray(noisy, dtype=np.float64)
    tau = weight * sigma * sigma
    if tau == 0 or f.size < 2:
        return f.copy()
    ft = f / tau
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    qx, qy, t = px, py, 1.0
    best = rof_objective(f, f, tau)
    for _ in range(inner_iters):
        gx, gy = _grad(_div(qx, qy) - ft)
        nx, ny = qx + TV_STEP * gx, qy + TV_STEP * gy
        norm = np.maximum(1.0, np.sqrt(nx * nx + ny * ny))
        nx, ny = nx / norm, ny / norm
        obj = rof_objective(f - tau * _div(nx, ny), f, tau)
        if obj <= best:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            mom = (t - 1.0) / t_next
            qx, qy = nx + mom * (nx - px), ny + mom * (ny - py)
            px, py, t, best = nx, ny, t_next, obj
        else:
            # restart: one semi-implicit Chambolle step from the accepted point
            gx, gy = _grad(_div(px, py) - ft)
            norm = np.sqrt(gx * gx + gy * gy)
            nx = (px + TV_STEP * gx) / (1.0 + TV_STEP * norm)
            ny = (py + TV_STEP * gy) / (1.0 + TV_STEP * norm)
            obj = rof_objective(f - tau * _div(nx, ny), f, tau)
            if obj <= best:
                px, py, best = nx, ny, obj
            qx, qy, t = px, py, 1.0
        if history is not None:
            history.append(best)
    return f - tau * _div(px, py)


def oracle_denoiser(noisy, sigma: float, clean, floor: float = ORACLE_FLOOR) -> np.ndarray:
    """Blend toward the known clean image: ``w c + (1 - w) noisy``, ``w = s^2 / (s^2 + floor^2)``."""
    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    check_same_shape(noisy, clean, "noisy and clean images")
    s2 = float(sigma) ** 2
    w = s2 / (s2 + floor * floor)
    return w * clean + (1.0 - w) * noisy


@dataclass(frozen=True)
class GaussianDenoiser:
    blur: float = GAUSSIAN_BLUR

    def __call__(self, noisy, sigma):
        return gaussian_denoiser(noisy, sigma, self.blur)


@dataclass(frozen=True)
class TvDenoiser:
    inner_iters: int = TV_ITERS
    weight: float = TV_WEIGHT

    def __call__(self, noisy, sigma):
        return tv_denoiser(noisy, sigma, self.inner_iters, self.weight)


class OracleDenoiser:
    """Test-only prior that knows the clean image."""

    def __init__(self, clean, floor: float = ORACLE_FLOOR):
        self.clean = as_image(clean, "clean")
        self.floor = float(floor)

    def __call__(self, noisy, sigma):
        return oracle_denoiser(noisy, sigma, self.clean, self.floor)


# ---------------------------------------------------------------------------
# external process
#
# Frames are ``u64 little-endian byte length | raw tensor bytes``.  Each
# request is two frames, the noisy image (rank 2) and sigma (rank 1,
# length 1); the reply is one frame holding the denoised image.

_LEN = struct.Struct("<Q")
MAX_FRAME = 1 << 33


def write_frame(stream, arr) -> None:
    data = encode_tensor(arr)
    stream.write(_LEN.pack(len(data)))
    stream.write(data)
    stream.flush()


def read_frame(stream) -> np.ndarray | None:
    """Next frame from ``stream``; None on a clean end of stream."""
    head = stream.read(_LEN.size)
    if not head:
        return None
    if len(head) != _LEN.size:
        raise ProtocolViolation("truncated frame length")
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise ProtocolViolation(f"frame of {n} bytes exceeds limit")
    data = stream.read(n)
    if len(data) != n:
        raise ProtocolViolation(f"frame truncated: expected {n} bytes, got {len(data)}")
    try:
        return decode_tensor(data)
    except FormatError as exc:
        raise ProtocolViolation(f"bad tensor in frame: {exc}") from exc


class ExternalDenoiser:
    """Runs ``denoise`` in a long-lived subprocess speaking the frame protocol.

    Calls are serialized with a lock, so one instance may be shared by
    threads.  Any deviation from the protocol (early exit, short or
    malformed frames, wrong reply shape, non-finite values) raises
    :class:`ProtocolViolation`.
    """

    def __init__(self, cmd, timeout: float | None = 60.0):
        self.cmd = cmd
        self.timeout = timeout
        self._proc = None
        self._lock = threading.Lock()

    def _start(self):
        if self._proc is None or self._proc.poll() is not None:
            shell = isinstance(self.cmd, str)
            self._proc = subprocess.Popen(self.cmd, shell=shell, stdin=subprocess.PIPE,
                                          stdout=subprocess.PIPE)
        return self._proc

    def __call__(self, noisy, sigma):
        noisy = as_image(noisy, "noisy")
        with self._lock:
            proc = self._start()
            try:
                write_frame(proc.stdin, noisy)
                write_frame(proc.stdin, np.array([float(sigma)]))
                out = read_frame(proc.stdout)
            except (BrokenPipeError, OSError) as exc:
                self.close()
                raise ProtocolViolation(f"denoiser process failed: {exc}") from exc
            except ProtocolViolation:
                self.close()
                raise
        if out is None:
            self.close()
            raise ProtocolViolation("denoiser process closed its output")
        if out.shape != noisy.shape:
            raise ProtocolViolation(f"reply shape {out.shape} != request shape {noisy.shape}")
        return out

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        for s in (proc.stdin, proc.stdout):
            try:
                s.close()
            except OSError:
                pass
        try:
            proc.wait(timeout=self.timeout)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def serve(denoise, stdin=None, stdout=None) -> None:
    """Server side of the frame protocol: answer requests until end of input."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while True:
        noisy = read_frame(stdin)
        if noisy is None:
            return
        sigma = read_frame(stdin)
        if sigma is None or sigma.size != 1:
            raise ProtocolViolation("expected a 1-element sigma frame")
        write_frame(stdout, denoise(noisy, float(sigma.ravel()[0])))


def shape_guard(out, noisy) -> np.ndarray:
    out = np.asarray(out, dtype=np.float64)
    if out.shape != np.shape(noisy):
        raise ShapeMismatch(f"denoiser returned shape {out.shape}, expected {np.shape(noisy)}")
    return out
