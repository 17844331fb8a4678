"""Command-line surface tying simulation, solving, statistics and metrics
into reproducible runs.

Every command accepts --config FILE (TOML or JSON key/value pairs named
like the long flags, underscores for dashes); explicit flags override file
values.  A seed is mandatory for every stochastic command and the fully
resolved configuration is echoed into the output directory, so any run can
be reproduced from its artifacts alone.

Exit codes: 0 success, 2 usage/input error, 3 solver failure.
THERMAL_IR_THREADS caps internal worker threads (0 = auto).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import fileio, geometry, metrics, scene_models, sensor, solver, stats
from .scene_models import CoordMlpConfig, DeepDecoderConfig
from .sensor import NoiseConfig
from .solver import SolveConfig, SolverDivergence, SolverError

SCENE_MODEL_FLAGS = {"pixel": "pixel-grid", "deep-decoder": "deep-decoder",
                     "coord-mlp": "coord-mlp"}


class CliInputError(Exception):
    pass


def _load_config_file(path) -> dict:
    if not os.path.isfile(path):
        raise CliInputError(f"config file not found: {path}")
    if path.endswith(".json"):
        with open(path) as f:
            return json.load(f)
    try:
        import tomllib as toml_mod  # py >= 3.11
    except ImportError:
        import tomli as toml_mod
    with open(path, "rb") as f:
        return toml_mod.load(f)


def _apply_config_defaults(parser, argv, subcommand):
    """Pre-scan for --config and fold the file values into parser defaults so
    explicit flags keep precedence."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = _load_config_file(known.config)
    values.pop("command", None)
    valid = {a.dest for a in parser._actions}
    unknown = set(values) - valid
    if unknown:
        raise CliInputError(
            f"config file keys not recognized for '{subcommand}': {sorted(unknown)}")
    parser.set_defaults(**values)


def _require_seed(args):
    if args.seed is None:
        raise CliInputError("a --seed is required (flag or config file)")
    return int(args.seed)


def _read_scene(path) -> np.ndarray:
    if not os.path.isfile(path):
        raise CliInputError(f"scene file not found: {path}")
    try:
        return fileio.read_pfm(path)
    except fileio.FileFormatError as exc:
        raise CliInputError(str(exc)) from exc


def _read_stack(path):
    try:
        return fileio.read_stack(path)
    except (fileio.FileFormatError, OSError, KeyError, ValueError) as exc:
        raise CliInputError(f"cannot read stack {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# simulate


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="render a corrupted jittered frame stack")
    p.add_argument("--config")
    p.add_argument("--scene", required=True, help="clean scene PFM")
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--jitter-px", type=float, default=4.0)
    p.add_argument("--transform-kind", default="affine",
                   choices=["translation", "rigid", "affine", "perspective"])
    p.add_argument("--max-rot-deg", type=float, default=2.0)
    p.add_argument("--gain-col-sigma", type=float, default=0.0)
    p.add_argument("--gain-row-sigma", type=float, default=0.0)
    p.add_argument("--gain-corr-len", type=float, default=0.0)
    p.add_argument("--gain-corr-sigma", type=float, default=0.0)
    p.add_argument("--offset-amp", type=float, default=0.0)
    p.add_argument("--offset-smooth", type=float, default=0.0)
    p.add_argument("--narcissus-amp", type=float, default=0.0)
    p.add_argument("--poisson-scale", type=float, default=0.0)
    p.add_argument("--poisson-stage", default="post", choices=["pre", "post"])
    p.add_argument("--read-sigma", type=float, default=0.0)
    p.add_argument("--downsample", type=int, default=1, metavar="Q")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--export-pgm", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return p


def cmd_simulate(args) -> int:
    seed = _require_seed(args)
    scene = _read_scene(args.scene)
    if args.frames < 1:
        raise CliInputError("--frames must be >= 1")
    cfg = NoiseConfig(
        poisson_scale=args.poisson_scale, read_sigma=args.read_sigma,
        column_gain_sigma=args.gain_col_sigma, row_gain_sigma=args.gain_row_sigma,
        gain_correlation_length=args.gain_corr_len,
        corr_gain_sigma=args.gain_corr_sigma,
        offset_smoothness=args.offset_smooth, offset_amplitude=args.offset_amp,
        narcissus_amplitude=args.narcissus_amp,
        poisson_stage=args.poisson_stage, seed=seed)
    q = int(args.downsample)
    lr_shape = (scene.shape[0] // q, scene.shape[1] // q)
    nu = sensor.sample_nonuniformity(lr_shape, cfg)
    transforms = sensor.sample_jitter_transforms(
        args.frames, args.transform_kind, args.jitter_px,
        max_rot_deg=args.max_rot_deg, seed=seed)
    stack = sensor.simulate_capture(scene, nu, transforms, cfg, downsample_q=q)
    stack.meta.update({"scene_file": os.path.abspath(args.scene),
                       "jitter_px": args.jitter_px,
                       "transform_kind": args.transform_kind,
                       "max_rot_deg": args.max_rot_deg})
    fileio.write_stack(args.out, stack, export_pgm=args.export_pgm)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


# ----------------------------------------------------------------------------
# solve / superres


def _add_solve_flags(p, default_method=True):
    p.add_argument("--config")
    p.add_argument("--stack", required=True, help="frame-stack directory")
    if default_method:
        p.add_argument("--method", default="deepir",
                       choices=["average", "physics-tv", "deepir"])
    p.add_argument("--scene-model", default="deep-decoder",
                   choices=sorted(SCENE_MODEL_FLAGS))
    p.add_argument("--transform-kind", default="affine",
                   choices=["translation", "rigid", "affine", "perspective"])
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tv-image", type=float, default=1e-5)
    p.add_argument("--tv-offset", type=float, default=10.0)
    p.add_argument("--warmup-iters", type=int, default=200)
    p.add_argument("--no-opt-transforms", action="store_true")
    p.add_argument("--decoder-channels", type=int, default=64)
    p.add_argument("--decoder-layers", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--export-pgm", action="store_true")
    p.add_argument("--out", required=True)


def _solve_config(args, seed, q=1) -> SolveConfig:
    scene_kind = SCENE_MODEL_FLAGS[args.scene_model]
    scene_config = None
    if scene_kind == "deep-decoder":
        scene_config = DeepDecoderConfig(channels=args.decoder_channels,
                                         layers=args.decoder_layers)
    elif scene_kind == "coord-mlp":
        scene_config = CoordMlpConfig()
    return SolveConfig(
        scene_kind=scene_kind, transform_kind=args.transform_kind,
        iters=args.iters, lr=args.lr, tv_image_weight=args.tv_image,
        tv_offset_weight=args.tv_offset, downsample_q=q,
        optimize_transforms=not args.no_opt_transforms, seed=seed,
        warmup_iters=args.warmup_iters, scene_config=scene_config)


def _average_report(stack, config) -> solver.SolveReport:
    transforms = geometry.register_stack(stack.frames, kind=config.transform_kind) \
        if len(stack) > 1 else [solver.tf.TransformParams.identity(config.transform_kind)]
    avg = solver.average_baseline(stack, transforms)
    unknowns, equations = solver.unknown_equation_counts(
        avg.size, len(stack), config.transform_kind, stack.masks.sum())
    report = solver.SolveReport(
        method="average", x0_hat=avg,
        nu_hat=sensor.NonUniformity(np.ones(avg.shape), np.zeros(avg.shape)),
        transforms_hat=transforms, loss_curve={}, unknown_count=unknowns,
        equation_count=equations, config=config)
    if stack.truth is not None:
        report.psnr_vs_truth = metrics.psnr(avg, stack.truth.scene)
        report.psnr_gauge_aligned = metrics.psnr_gauge_aligned(avg, stack.truth.scene)
    return report


def _echo_config(args, config, extra=None) -> dict:
    echo = {"command": args.command, "stack": os.path.abspath(args.stack),
            "method": getattr(args, "method", "deepir")}
    echo.update(config.to_dict())
    if extra:
        echo.update(extra)
    return echo


def _run_solver(args, stack, config, method):
    if method == "average":
        return _average_report(stack, config)
    if method == "physics-tv":
        return solver.solve_physics_tv(stack, config)
    if method == "deepir" and config.downsample_q > 1:
        return solver.solve_superres(stack, config)
    if method == "deepir":
        return solver.solve_deepir(stack, config)
    raise CliInputError(f"unknown method {method!r}")


def cmd_solve(args) -> int:
    seed = _require_seed(args)
    stack = _read_stack(args.stack)
    config = _solve_config(args, seed)
    report = _run_solver(args, stack, config, args.method)
    if stack.truth is not None and args.method != "average":
        baseline = _average_report(stack, config)
        report.extras["psnr_average_baseline"] = baseline.psnr_vs_truth
    fileio.write_solve_results(args.out, report, _echo_config(args, config),
                               export_pgm=args.export_pgm)
    if report.psnr_vs_truth is not None:
        print(f"{args.method}: PSNR vs truth {report.psnr_vs_truth:.2f} dB")
    print(f"results in {args.out}")
    return 0


def cmd_superres(args) -> int:
    seed = _require_seed(args)
    if args.factor not in (2, 4):
        raise CliInputError("--factor must be 2 or 4")
    stack = _read_stack(args.stack)
    config = _solve_config(args, seed, q=args.factor)
    report = solver.solve_superres(stack, config)
    extra = {"factor": args.factor}
    if stack.truth is not None:
        avg = report.extras["average_baseline_lr"]
        bicubic = solver._bicubic_upsample(avg, args.factor)
        report.extras["psnr_bicubic_baseline"] = metrics.psnr(
            bicubic, stack.truth.scene)
    for msg in report.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    fileio.write_solve_results(args.out, report,
                               _echo_config(args, config, extra),
                               export_pgm=args.export_pgm)
    if report.psnr_vs_truth is not None:
        print(f"superres x{args.factor}: PSNR vs truth "
              f"{report.psnr_vs_truth:.2f} dB")
    print(f"results in {args.out}")
    return 0


def _add_superres(sub):
    p = sub.add_parser("superres", help="recover the scene at Q x resolution")
    _add_solve_flags(p, default_method=False)
    p.add_argument("--factor", type=int, default=4, choices=[2, 4])
    p.set_defaults(func=cmd_superres, method="deepir")
    return p


# ----------------------------------------------------------------------------
# stats / metrics


def _add_stats(sub):
    p = sub.add_parser("stats", help="jitter statistics from a flat-field stack")
    p.add_argument("--config")
    p.add_argument("--stack", required=True)
    p.add_argument("--max-lag", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)
    return p


def cmd_stats(args) -> int:
    seed = _require_seed(args)
    stack = _read_stack(args.stack)
    result = stats.estimate_jitter_stats(stack, max_lag=args.max_lag, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    fileio.write_pfm(os.path.join(args.out, "spatial_autocorr.pfm"),
                     result.spatial_autocorr)
    fileio.dump_json(os.path.join(args.out, "temporal_autocorr.json"), {
        "lags": list(range(result.temporal_autocorr.size)),
        "autocorrelation": [float(v) for v in result.temporal_autocorr],
    })
    fileio.dump_json(os.path.join(args.out, "report.json"), {
        "recommended_shift_px": result.recommended_shift_px,
        "recommended_max_frames": result.recommended_max_frames,
        "max_lag": result.max_lag,
        "warnings": result.warnings,
        "config": {"command": "stats", "stack": os.path.abspath(args.stack),
                   "max_lag": args.max_lag, "seed": seed},
    })
    for msg in result.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"recommended shift: {result.recommended_shift_px:.1f} px; "
          f"usable frames: {result.recommended_max_frames}")
    return 0


def _add_metrics(sub):
    p = sub.add_parser("metrics", help="PSNR/MSE between two PFM images")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_metrics)
    return p


def cmd_metrics(args) -> int:
    est = _read_scene(args.estimate)
    truth = _read_scene(args.truth)
    if est.shape != truth.shape:
        raise CliInputError(
            f"shape mismatch: estimate {est.shape} vs truth {truth.shape}")
    p = metrics.psnr(est, truth)
    out = {"psnr_db": "inf" if math.isinf(p) else p,
           "mse": metrics.mse(est, truth)}
    print(json.dumps(out, sort_keys=True))
    return 0


# ----------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="thermal-ir",
        description="Simulate microbolometer captures and recover scene "
                    "radiance from jittered frame stacks.")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {
        "simulate": _add_simulate(sub),
        "superres": _add_superres(sub),
        "stats": _add_stats(sub),
        "metrics": _add_metrics(sub),
    }
    p_solve = sub.add_parser("solve", help="recover the scene from a stack")
    _add_solve_flags(p_solve)
    p_solve.set_defaults(func=cmd_solve)
    parsers["solve"] = p_solve
    return parser, parsers


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, parsers = build_parser()
    try:
        if argv and argv[0] in parsers:
            _apply_config_defaults(parsers[argv[0]], argv[1:], argv[0])
        args = parser.parse_args(argv)
    except CliInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliInputError, SolverError, sensor.SimulationError,
            stats.StatsError, scene_models.SceneModelError,
            fileio.FileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverDivergence, scene_models.FitError) as exc:
        msg = f"solver failure: {exc}"
        out = getattr(args, "out", None)
        if out:
            os.makedirs(out, exist_ok=True)
            diag_path = os.path.join(out, "failure.json")
            fileio.dump_json(diag_path, {"error": str(exc)})
            msg += f" (diagnostics: {diag_path})"
        print(msg, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
