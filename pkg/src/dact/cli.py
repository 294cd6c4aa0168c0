"""Command-line front end: ``simulate``, ``reconstruct``, ``match-hist`` and ``eval``.

Every option can also come from a ``--config`` file of ``key = value``
lines (keys are the long option names, dashes or underscores); options
given on the command line win.  Each command that writes files also
writes ``manifest.txt``, which is itself a valid config file, so a run
can be repeated with ``dact <command> --config <out>/manifest.txt``.

Exit codes: 0 success, 2 usage or invalid input, 3 I/O or protocol
failure, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    DactError,
    FormatError,
    NonConvergence,
    NonFiniteError,
    ProtocolViolation,
)
from .histogram import KdeConfig, floored, soft_histogram
from .metrics import evaluate
from .ot import Lut, SinkhornConfig
from .priors import ExternalDenoiser, GaussianDenoiser, OracleDenoiser, TvDenoiser
from .simulate import PHANTOMS, Gamma, degrade, parse_transform, phantom
from .solver import Optimizer, SolverConfig, reconstruct
from .tensor_io import Rng, load_image, save_image
from .transport import ForwardConfig, GradMode, apply_lut, match_lut

log = logging.getLogger("dact")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
# manifest keys that are records of a run rather than options
_RECORD_KEYS = {"tool", "version", "command", "duration_s", "outputs"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# key = value files

def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment line."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_manifest(path, items: dict) -> None:
    lines = [f"{k} = {_manifest_value(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _manifest_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(_manifest_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# option types

def _optional_float(text):
    return None if str(text).lower() in ("auto", "none", "") else float(text)


def _lambda_spec(text):
    vals = [float(v) for v in str(text).split(",") if v.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("empty lambda")
    return vals[0] if len(vals) == 1 else tuple(vals)


def _paths(values) -> list[str]:
    if isinstance(values, str):
        values = [values]
    return [p for v in values for p in str(v).split(",") if p]


# ---------------------------------------------------------------------------
# parser

def _add_kde(p):
    p.add_argument("--bins", type=int, default=64, help="histogram bins B (source and target)")
    p.add_argument("--bandwidth", type=_optional_float, default=None,
                   help="KDE bandwidth; auto = one bin width")


def _add_sinkhorn(p):
    p.add_argument("--epsilon", type=float, default=1e-3, help="entropic regularization")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-8, help="L1 marginal tolerance")
    p.add_argument("--relaxation", type=_optional_float, default=None,
                   help="over-relaxation factor; auto = chosen from epsilon")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dact", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"dact {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value file; command-line options override it")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("simulate", "degrade a phantom or image: y = clip(H phi(x) + n)")
    p.add_argument("--phantom", choices=PHANTOMS, default="nested-disks")
    p.add_argument("--input", help="use this image instead of a phantom")
    p.add_argument("--clip-percentile", type=float, default=0.0,
                   help="with --input: clip to the [p, 100-p] percentiles and rescale to [0, 1]")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--transform", default="gamma:0.7",
                   help="gamma:G, logistic:S,M or piecewise:v,w;v,w;...")
    p.add_argument("--gamma", type=float, help="shorthand for --transform gamma:G")
    p.add_argument("--k", type=int, default=2, help="downsampling factor")
    p.add_argument("--noise", type=float, default=0.01, help="measurement noise std")
    p.add_argument("--out", help="output directory (required)")

    p = command("reconstruct", "restore x0 and the contrast map from y")
    p.add_argument("--y", nargs="+",
                   help="observation file(s); several files are solved as independent slices")
    p.add_argument("--denoiser", default="gaussian",
                   help="gaussian, tv, oracle:<clean image> or extern:<command>")
    p.add_argument("--T", type=int, default=50, help="outer (sampling) steps")
    p.add_argument("--J", type=int, default=25, help="inner steps per outer step")
    p.add_argument("--eta-x", type=float, default=0.1)
    p.add_argument("--eta-alpha", type=float, default=0.1)
    p.add_argument("--lambda-t", type=_lambda_spec, default=0.1,
                   help="coupling weight, or T comma-separated values")
    p.add_argument("--alpha-init", type=float, default=0.5)
    p.add_argument("--optimizer", choices=[o.value for o in Optimizer], default="adam")
    p.add_argument("--k", type=int, default=2, help="downsampling factor")
    p.add_argument("--grad-mode", choices=[g.value for g in GradMode], default="detached")
    p.add_argument("--T-train", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    _add_kde(p)
    _add_sinkhorn(p)
    p.add_argument("--gt", help="ground truth, only used for trace PSNR")
    p.add_argument("--true-transform", help="generating transform, only used for the trace")
    p.add_argument("--jobs", type=int, default=1, help="slices solved in parallel")
    p.add_argument("--out", help="output directory (required)")

    p = command("match-hist", "map the intensities of one image onto another's histogram")
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    _add_kde(p)
    _add_sinkhorn(p)
    p.add_argument("--out", help="output directory (required)")

    p = command("eval", "PSNR / SSIM / MSE of an image against a reference")
    p.add_argument("image")
    p.add_argument("reference")
    p.add_argument("--csv", help="append the result as a row to this CSV file")
    p.add_argument("--label", default="", help="label column for --csv")
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config", None):
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        cfg = read_config(args.config)
        if cfg.get("command", args.command) != args.command:
            raise UsageError(f"{args.config} is a manifest of '{cfg['command']}', "
                             f"not '{args.command}'")
        unknown = set(cfg) - known - _RECORD_KEYS
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
        cfg = {k: v for k, v in cfg.items() if k in known and k != "config"}
        # string defaults are run through each option's type by argparse
        sub.set_defaults(**cfg)
        args = ap.parse_args(argv)
    # required options may come from the config file, so check them here
    for name in ("out", "y", "source", "reference"):
        if hasattr(args, name) and not getattr(args, name):
            raise UsageError(f"--{name} is required")
    return args


# ---------------------------------------------------------------------------
# commands

def _config_items(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys}


def _record(command: str, items: dict, outputs, start: float) -> dict:
    head = {"tool": "dact", "version": __version__, "command": command}
    tail = {"outputs": list(outputs), "duration_s": round(time.perf_counter() - start, 3)}
    return {**head, **items, **tail}


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    if args.gamma is not None:
        args.transform = Gamma(args.gamma).describe()
    phi = parse_transform(args.transform)
    if args.input:
        x = load_image(args.input)
        if args.clip_percentile > 0:
            x = percentile_normalize(x, args.clip_percentile)
    else:
        x = phantom(args.size, args.phantom)
    y = degrade(x, phi, args.k, args.noise, Rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(y, out / "y.raw")
    save_image(x, out / "x.raw")
    (out / "transform.txt").write_text(phi.describe() + "\n")
    keys = ["phantom", "input", "clip_percentile", "size", "transform", "k", "noise", "seed"]
    items = _config_items(args, keys)
    write_manifest(out / "manifest.txt",
                   _record("simulate", items, ["y.raw", "x.raw", "transform.txt"], start))
    log.info("y %s -> %s", "x".join(map(str, y.shape)), out)
    return EXIT_OK


def percentile_normalize(x, p: float) -> np.ndarray:
    lo, hi = np.percentile(x, [p, 100.0 - p])
    if hi <= lo:
        raise ValueError("percentile range is empty")
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def _check_denoiser_spec(spec: str) -> None:
    kind, _, arg = spec.partition(":")
    if not ((kind in ("gaussian", "tv") and not arg) or (kind in ("oracle", "extern") and arg)):
        raise UsageError(
            f"bad --denoiser {spec!r}; expected gaussian, tv, oracle:<path> or extern:<cmd>")


def make_denoiser(spec: str):
    _check_denoiser_spec(spec)
    kind, _, arg = spec.partition(":")
    if kind == "gaussian":
        return GaussianDenoiser()
    if kind == "tv":
        return TvDenoiser()
    if kind == "oracle":
        return OracleDenoiser(load_image(arg))
    return ExternalDenoiser(arg)


def solver_config(args, seed: int) -> SolverConfig:
    return SolverConfig(
        T=args.T, J=args.J, eta_x=args.eta_x, eta_alpha=args.eta_alpha,
        lambda_t=args.lambda_t, alpha_init=args.alpha_init,
        sinkhorn=_sinkhorn_config(args), kde=_kde_config(args),
        forward=ForwardConfig(args.k, GradMode(args.grad_mode)),
        optimizer=Optimizer(args.optimizer), seed=seed,
        T_train=args.T_train, beta_start=args.beta_start, beta_end=args.beta_end)


def _kde_config(args) -> KdeConfig:
    return KdeConfig(args.bins, args.bandwidth)


def _sinkhorn_config(args) -> SinkhornConfig:
    return SinkhornConfig(args.epsilon, args.max_iters, args.tol, args.relaxation)


def _solve_slice(args, index: int, path: str, out: Path) -> None:
    """Solve one slice; seeds are ``seed XOR slice index``."""
    y = load_image(path)
    cfg = solver_config(args, args.seed ^ index)
    gt = load_image(args.gt) if args.gt else None
    phi = parse_transform(args.true_transform) if args.true_transform else None
    den = make_denoiser(args.denoiser)
    try:
        rec = reconstruct(y, den, cfg, ground_truth=gt, true_transform=phi)
    finally:
        if isinstance(den, ExternalDenoiser):
            den.close()
    out.mkdir(parents=True, exist_ok=True)
    save_image(rec.x0, out / "x0.raw")
    save_image(rec.alpha, out / "alpha.raw")
    rec.trace.write_csv(out / "trace.csv")
    write_lut_csv(rec.lut, out / "lut.csv")
    if rec.trace.nonconverged:
        log.warning("%s: %d Sinkhorn solves did not converge", path, rec.trace.nonconverged)


def cmd_reconstruct(args) -> int:
    start = time.perf_counter()
    args.y = _paths(args.y)
    _check_denoiser_spec(args.denoiser)
    solver_config(args, args.seed)  # validate options before any work starts
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = [out] if len(args.y) == 1 else [out / f"slice{i:03d}" for i in range(len(args.y))]
    jobs = max(1, min(args.jobs, len(args.y)))
    if jobs == 1:
        for i, (p, d) in enumerate(zip(args.y, dirs)):
            _solve_slice(args, i, p, d)
    else:
        with ProcessPoolExecutor(jobs) as pool:
            futs = [pool.submit(_solve_slice, args, i, p, d)
                    for i, (p, d) in enumerate(zip(args.y, dirs))]
            for f in futs:
                f.result()
    outputs = [(d / name).relative_to(out).as_posix()
               for d in dirs for name in ("x0.raw", "alpha.raw", "trace.csv", "lut.csv")]
    keys = ["y", "denoiser", "T", "J", "eta_x", "eta_alpha", "lambda_t", "alpha_init",
            "optimizer", "k", "grad_mode", "T_train", "beta_start", "beta_end",
            "bins", "bandwidth", "epsilon", "max_iters", "tol", "relaxation",
            "gt", "true_transform", "jobs", "seed"]
    write_manifest(out / "manifest.txt",
                   _record("reconstruct", _config_items(args, keys), outputs, start))
    return EXIT_OK


def cmd_match_hist(args) -> int:
    start = time.perf_counter()
    src = load_image(args.source)
    ref = load_image(args.reference)
    kde = _kde_config(args)
    lut = match_lut(src, floored(soft_histogram(ref, kde)), kde, _sinkhorn_config(args))
    if not lut.plan.converged:
        raise NonConvergence(f"Sinkhorn stopped at marginal error {lut.plan.marginal_error:.3g}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(np.clip(apply_lut(src, lut), 0.0, 1.0), out / "matched.raw")
    write_lut_csv(lut, out / "lut.csv")
    keys = ["source", "reference", "bins", "bandwidth", "epsilon", "max_iters", "tol",
            "relaxation", "seed"]
    write_manifest(out / "manifest.txt", _record(
        "match-hist", _config_items(args, keys), ["matched.raw", "lut.csv"], start))
    return EXIT_OK


def write_lut_csv(lut, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["center", "value"])
        w.writerows((repr(float(c)), repr(float(v))) for c, v in zip(lut.centers, lut.values))


def read_lut_csv(path) -> Lut:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return Lut(np.array([float(r["center"]) for r in rows]),
               np.array([float(r["value"]) for r in rows]))


def cmd_eval(args) -> int:
    for p in (args.image, args.reference):
        if not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")
    rep = evaluate(load_image(args.image), load_image(args.reference))
    print(f"psnr={rep.psnr:.4f} ssim={rep.ssim:.6f} mse={rep.mse:.6g}")
    if args.csv:
        path = Path(args.csv)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(["label", "image", "reference", "psnr", "ssim", "mse"])
            w.writerow([args.label, args.image, args.reference,
                        repr(rep.psnr), repr(rep.ssim), repr(rep.mse)])
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "match-hist": cmd_match_hist,
    "eval": cmd_eval,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (NonFiniteError, NonConvergence)):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, ProtocolViolation, OSError)):
        return EXIT_IO
    return EXIT_USAGE


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"dact: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse: --help, --version, usage errors
        return int(exc.code or 0)
    except OSError as exc:
        print(f"dact: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DactError, ValueError, UsageError, OSError) as exc:
        print(f"dact: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
