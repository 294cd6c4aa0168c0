"""Blind image restoration with a diffusion prior and an optimal-transport contrast map.

The observation model is ``y = H phi(x) + n``: block downsampling ``H``
after an unknown monotone intensity map ``phi``.  :func:`reconstruct`
alternates denoiser-driven sampling steps with joint gradient steps on
the image and a per-pixel blend between the identity and a LUT matched
by entropic optimal transport.
"""
__version__ = "0.1.0"

from .errors import (
    DactError,
    DimensionMismatch,
    DimensionOverflow,
    EmptyImage,
    FormatError,
    ImageTooSmall,
    MalformedHeader,
    NonConvergence,
    NonDivisible,
    NonFiniteError,
    ProtocolViolation,
    RangeError,
    ShapeMismatch,
    ZeroRow,
)
from .histogram import Histogram, KdeConfig, bin_centers, floored, soft_histogram
from .metrics import MetricReport, evaluate, mse, psnr, ssim
from .ot import Lut, SinkhornConfig, TransportPlan, cost_matrix, extract_lut, sinkhorn
from .priors import (
    DiffusionSchedule,
    ExternalDenoiser,
    GaussianDenoiser,
    OracleDenoiser,
    TvDenoiser,
    ddim_step,
    gaussian_denoiser,
    noise_level_of,
    oracle_denoiser,
    tv_denoiser,
)
from .simulate import Gamma, Logistic, PiecewiseLinear, degrade, parse_transform, phantom, upsample_baseline
from .solver import Optimizer, Reconstruction, SolverConfig, SolverTrace, effective_mapping, reconstruct
from .tensor_io import Rng, load_image, read_tensor, save_image, write_tensor
from .transport import (
    ForwardConfig,
    GradMode,
    adaptive_transport,
    apply_lut,
    apply_lut_grad,
    downsample,
    downsample_adjoint,
    fidelity_loss_and_grads,
    match_lut,
)
