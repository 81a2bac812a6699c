"""Command-line entry point: decode, render, gradcheck, optimize, eval.

Exit codes: 0 ok, 2 input error, 3 invariant violation, 4 size guard,
5 optimizer divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import evaluation, io, polar, scenes
from .errors import (ConfigurationError, DegenerateGeometryError, DimensionError, DomainError,
                     EmptyAggregationError, NumericalError, PolarDepthError)
from .geometry import DisparityMap, RigidPose, field_angles, relative_pose
from .optimize import gradient_check, refine_depth, smooth_perturbation
from .simulator import render_sequence

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT, EXIT_SIZE, EXIT_DIVERGED = 0, 2, 3, 4, 5
GRADCHECK_MAX_SIDE = 32
GLOBAL_DEFAULTS = {"config": None, "seed": None, "threads": None, "output": Path("polardepth-out")}


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _exit_code(exc) -> int:
    if isinstance(exc, CommandError):
        return exc.code
    if isinstance(exc, (DomainError, DegenerateGeometryError, NumericalError, EmptyAggregationError)):
        return EXIT_INVARIANT
    return EXIT_INPUT


@contextmanager
def staged_output(out_dir):
    """Collect outputs in a sibling temporary directory, move them in on success."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        yield stage
        out_dir.mkdir(parents=True, exist_ok=True)
        for src in sorted(stage.rglob("*")):
            dst = out_dir / src.relative_to(stage)
            if src.is_dir():
                dst.mkdir(parents=True, exist_ok=True)
            else:
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dst)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _write_manifest(directory, payload):
    io.write_json(Path(directory) / "manifest.json", payload)


def _config(args, **extra):
    overrides = {"seed": args.seed, "threads": args.threads}
    overrides.update(extra)
    return io.load_config(args.config, overrides)


# ---------------------------------------------------------------- decode

def cmd_decode(args) -> int:
    pattern = polar.parse_pattern(args.pattern)
    pixels = io.read_pfm(args.input)
    if pixels.ndim != 2:
        raise DimensionError("mosaic file must hold a single channel")
    img = polar.decode(polar.MosaicFrame(pixels, pattern), args.convention)
    with staged_output(args.output) as stage:
        for name in ("iota", "alpha", "rho"):
            io.write_pfm(stage / f"{name}.pfm", getattr(img, name))
        io.write_pfm(stage / "confidence.pfm", img.confidence)
        _write_manifest(stage, {"command": "decode", "pattern": polar.pattern_token(pattern),
                                "convention": args.convention, "width": pixels.shape[1],
                                "height": pixels.shape[0], "alpha_units": "radians",
                                "files": ["iota.pfm", "alpha.pfm", "rho.pfm", "confidence.pfm"]})
    print(f"decoded {pixels.shape[1]}x{pixels.shape[0]} mosaic into {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------- render

def _scene_from_args(args):
    if args.scene in scenes.BENCHMARKS:
        scene, K, poses = scenes.benchmark(args.scene, args.width, args.height)
        kappa = 1.0
    else:
        scene, poses = io.load_scene(args.scene)
        if args.camera is None:
            raise ConfigurationError("a scene file needs --camera")
        K, kappa = None, 1.0
    if args.camera is not None:
        K, kappa = io.load_camera(args.camera)
    if args.poses is not None:
        poses = io.poses_from_mapping(io.load_yaml(args.poses).get("poses"), str(args.poses))
    if poses is None:
        poses = scenes.lateral_track()
    return scene, K, poses, kappa


def selfcheck_residual(view) -> float:
    """Largest angular residual (radians) between rendered and recomputed angles."""
    fa = field_angles(view.disparity_gt, view.camera)
    mask = view.polar.confidence & fa.scoreable
    if not mask.any():
        return 0.0
    diff = polar.wrap_half_pi(fa.angle - view.polar.alpha)
    return float(np.max(np.abs(diff[mask])))


def cmd_render(args) -> int:
    cfg = _config(args)
    scene, K, poses, kappa = _scene_from_args(args)
    views = render_sequence(scene, K, poses, kappa, threads=cfg.threads)
    target = len(views) // 2
    with staged_output(args.output) as stage:
        for i, v in enumerate(views):
            d = stage / f"view_{i:03d}"
            io.write_pfm(d / "iota.pfm", v.polar.iota)
            io.write_pfm(d / "alpha.pfm", v.polar.alpha)
            io.write_pfm(d / "rho.pfm", v.polar.rho)
            io.write_pfm(d / "confidence.pfm", v.polar.confidence)
            io.write_pfm(d / "disparity_gt.pfm", v.disparity_gt.values)
            io.write_pfm(d / "sky_mask.pfm", v.sky_mask)
            mosaic = polar.mosaic_from_stack(polar.synthesize_analyzers(v.polar))
            io.write_pfm(d / "mosaic.pfm", mosaic.pixels)
            _write_manifest(d, {"pose": v.pose.flat(), "kappa": kappa})
        _write_manifest(stage, {"command": "render", "scene": str(args.scene),
                                "camera": io.camera_to_mapping(K, kappa),
                                "views": [f"view_{i:03d}" for i in range(len(views))],
                                "target": target,
                                "mosaic_pattern": polar.pattern_token(polar.DEFAULT_PATTERN)})
    print(f"rendered {len(views)} views of {args.scene} at {K.width}x{K.height} into {args.output}")
    if args.selfcheck:
        worst = max(selfcheck_residual(v) for v in views)
        print(f"selfcheck: max angular residual {worst:.3e} rad")
        if worst > 1e-4:
            raise CommandError("forward-consistency selfcheck failed", EXIT_INVARIANT)
    return EXIT_OK


# ---------------------------------------------------------------- loading rendered runs

class RenderedRun:
    """A rendered sequence read back from disk."""

    def __init__(self, directory):
        self.directory = Path(directory)
        try:
            manifest = json.loads((self.directory / "manifest.json").read_text())
            self.K, self.kappa = io.camera_from_mapping(manifest["camera"], "manifest.camera")
            self.names = list(manifest["views"])
            self.target = int(manifest["target"])
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise io.FormatError(f"{directory}: not a rendered sequence ({exc})") from exc
        if len(self.names) < 2 or not 0 <= self.target < len(self.names):
            raise io.FormatError(f"{directory}: need at least two views and a valid target")
        self.poses = []
        for name in self.names:
            vm = json.loads((self.directory / name / "manifest.json").read_text())
            self.poses.append(RigidPose.from_flat(vm["pose"]))

    def read(self, view, name):
        arr = io.read_pfm(self.directory / self.names[view] / f"{name}.pfm")
        if arr.shape != self.K.shape:
            raise DimensionError(f"{name}.pfm of view {view} does not match the camera size")
        return arr

    def polar(self, view=None):
        view = self.target if view is None else view
        return polar.PolarImage(self.read(view, "iota"), self.read(view, "alpha"),
                                self.read(view, "rho"), self.read(view, "confidence") > 0.5)

    def disparity_gt(self):
        vals = self.read(self.target, "disparity_gt")
        return DisparityMap(vals, self.kappa, vals > 0)

    def sky_mask(self):
        return self.read(self.target, "sky_mask") > 0.5

    def problem(self, rows=slice(None), cols=slice(None), K=None):
        """(target image, sources, polar image, camera) restricted to a crop."""
        tp = self.polar().crop(rows, cols)
        sources = [(self.read(i, "iota")[rows, cols], relative_pose(self.poses[self.target], p))
                   for i, p in enumerate(self.poses) if i != self.target]
        return tp.iota, sources, tp, K or self.K


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    run = RenderedRun(args.input)
    h, w = run.K.shape
    side = args.crop
    if side is None:
        if max(h, w) > GRADCHECK_MAX_SIDE:
            raise CommandError(f"{w}x{h} field exceeds the {GRADCHECK_MAX_SIDE}x{GRADCHECK_MAX_SIDE} "
                               "brute-force bound; pass --crop", EXIT_SIZE)
        ch, cw = h, w
    else:
        if side > GRADCHECK_MAX_SIDE:
            raise CommandError(f"crop {side} exceeds the brute-force bound {GRADCHECK_MAX_SIDE}",
                               EXIT_SIZE)
        if side < 3 or side > min(h, w):
            raise ConfigurationError(f"crop size {side} does not fit a {w}x{h} image")
        ch = cw = side
    rng = np.random.default_rng(cfg.seed)
    r0 = int(rng.integers(0, h - ch + 1)) if args.row is None else args.row
    c0 = int(rng.integers(0, w - cw + 1)) if args.col is None else args.col
    if not (0 <= r0 <= h - ch and 0 <= c0 <= w - cw):
        raise ConfigurationError("crop origin lies outside the image")
    rows, cols = slice(r0, r0 + ch), slice(c0, c0 + cw)
    target, sources, tp, Kc = run.problem(rows, cols, run.K.crop(r0, c0, ch, cw))
    gt = run.disparity_gt().crop(rows, cols)
    if not gt.valid.any():
        raise EmptyAggregationError("crop contains no valid disparity")
    disp = gt.with_values(gt.values * (1.0 + smooth_perturbation(rng, gt.shape, args.perturb)))
    report = gradient_check(target, sources, disp, tp, Kc, cfg.weights)
    print(f"gradient check on {cw}x{ch} crop at row {r0}, col {c0}")
    print(report.table())
    with staged_output(args.output) as stage:
        _write_manifest(stage, {"command": "gradcheck", "row": r0, "col": c0, "size": [ch, cw],
                                "max_rel_error": report.max_rel_error,
                                "central_max_rel_error": report.plain_max_rel_error,
                                "checked": report.checked, "excluded": report.excluded,
                                "passed": report.passed})
    return EXIT_OK if report.passed else EXIT_INVARIANT


# ---------------------------------------------------------------- optimize

def _semantic_config(cfg):
    # The thread count cannot change any result, so it stays out of the outputs.
    mapping = io.config_to_mapping(cfg)
    mapping["simulator"].pop("threads", None)
    return mapping


def _initial_disparity(spec, gt: DisparityMap, rng, floor):
    if spec == "gt":
        return gt
    if spec.startswith("noisy-gt:"):
        try:
            sigma = float(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigurationError(f"malformed --init {spec!r}") from exc
        if not sigma >= 0:
            raise ConfigurationError("noise level must be non-negative")
        mean = float(gt.values[gt.valid].mean())
        noisy = gt.values + rng.normal(0.0, sigma * mean, gt.shape)
        return gt.with_values(np.where(gt.valid, np.maximum(noisy, floor), gt.values))
    vals = io.read_pfm(spec)
    if vals.shape != gt.shape:
        raise DimensionError("initial disparity does not match the camera size")
    return DisparityMap(vals, gt.kappa, gt.valid & (vals > 0))


def cmd_optimize(args) -> int:
    weights = {"disable_lpol": True} if args.disable_lpol else {}
    optimizer = {k: v for k, v in (("step_size", args.step_size),
                                   ("max_iterations", args.max_iterations)) if v is not None}
    cfg = _config(args, weights=weights, optimizer=optimizer)
    run = RenderedRun(args.input)
    target, sources, tp, K = run.problem()
    gt = run.disparity_gt()
    rng = np.random.default_rng(cfg.seed)
    init = _initial_disparity(args.init, gt, rng, cfg.optimizer.disparity_floor)
    result, trace = refine_depth(init, target, sources, tp, K, cfg.weights, cfg.optimizer)
    print(f"initial Lambda {trace.Lambda[0]:.9e}")
    print(f"final Lambda   {trace.Lambda[trace.best_iteration]:.9e}")
    print(f"iterations {trace.iterations_run}, terminated by {trace.terminated_by}")
    with staged_output(args.output) as stage:
        io.write_pfm(stage / "disparity.pfm", np.where(result.valid, result.values, 0.0))
        io.write_text_atomic(stage / "trace.csv", trace.to_csv())
        _write_manifest(stage, {"command": "optimize", "init": args.init, "kappa": gt.kappa,
                                "iterations_run": trace.iterations_run,
                                "terminated_by": trace.terminated_by,
                                "best_iteration": trace.best_iteration,
                                "initial_Lambda": trace.Lambda[0],
                                "final_Lambda": trace.Lambda[trace.best_iteration],
                                "config": _semantic_config(cfg)})
    if trace.terminated_by == "diverged":
        raise CommandError("optimizer diverged; best iterate written", EXIT_DIVERGED)
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    protocols = None if args.protocols is None else tuple(p for p in args.protocols.split(",") if p)
    cfg = _config(args, protocols=protocols, median_scaling=args.median_scaling or None,
                  gt_sky_disp_ceiling=args.sky_ceiling)
    pred = io.read_pfm(args.pred)
    gt = io.read_pfm(args.gt)
    sky = io.read_pfm(args.sky) > 0.5
    rho = io.read_pfm(args.rho)
    if not (pred.shape == gt.shape == sky.shape == rho.shape):
        raise DimensionError("prediction, ground truth, sky mask and rho files differ in shape")
    valid = gt > 0
    masks = evaluation.protocol_masks(valid, sky, rho)
    kappa = args.kappa
    pred_depth = np.where(pred > 0, kappa / np.where(pred > 0, pred, 1.0), 0.0)
    gt_depth = np.where(valid, kappa / np.where(valid, gt, 1.0), 0.0)
    reports = evaluation.evaluate(pred_depth, gt_depth, masks, cfg.protocols, cfg.median_scaling)
    sky_report = (evaluation.sky_accuracy(pred, sky, cfg.gt_sky_disp_ceiling) if sky.any() else None)
    print(evaluation.format_table(reports, sky_report))
    with staged_output(args.output) as stage:
        io.write_text_atomic(stage / "metrics.csv", evaluation.reports_to_csv(reports, sky_report))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given before it.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                        help="YAML run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (default 1)")
    common.add_argument("--output", type=Path, default=argparse.SUPPRESS,
                        help="output directory (default polardepth-out)")

    parser = argparse.ArgumentParser(prog="polardepth", parents=[common],
                                     description="Polarimetry-constrained depth refinement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", parents=[common], help="decode a mosaic frame into iota/alpha/rho")
    p.add_argument("input", type=Path)
    p.add_argument("--pattern", default=polar.pattern_token(polar.DEFAULT_PATTERN))
    p.add_argument("--convention", choices=("standard", "printed"), default="standard")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", parents=[common], help="render a scene into polarimetric views")
    p.add_argument("--scene", required=True, help=f"benchmark name {sorted(scenes.BENCHMARKS)} or YAML file")
    p.add_argument("--camera", type=Path)
    p.add_argument("--poses", type=Path)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--selfcheck", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--input", type=Path, required=True, help="rendered sequence directory")
    p.add_argument("--crop", type=int)
    p.add_argument("--row", type=int)
    p.add_argument("--col", type=int)
    p.add_argument("--perturb", type=float, default=3e-3,
                   help="relative amplitude of the smooth disparity perturbation")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("optimize", parents=[common], help="refine disparity by gradient descent")
    p.add_argument("--input", type=Path, required=True, help="rendered sequence directory")
    p.add_argument("--init", default="gt", help="gt, noisy-gt:SIGMA or a disparity PFM")
    p.add_argument("--disable-lpol", action="store_true")
    p.add_argument("--step-size", type=float)
    p.add_argument("--max-iterations", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", parents=[common], help="depth metrics and sky accuracy")
    p.add_argument("--pred", type=Path, required=True, help="predicted disparity PFM")
    p.add_argument("--gt", type=Path, required=True, help="ground-truth disparity PFM")
    p.add_argument("--sky", type=Path, required=True, help="sky mask PFM")
    p.add_argument("--rho", type=Path, required=True, help="degree of polarization PFM")
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--protocols", help="comma list of raw,cropped,specular")
    p.add_argument("--median-scaling", action="store_true")
    p.add_argument("--sky-ceiling", type=float)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        return args.func(args)
    except (CommandError, PolarDepthError, OSError, ValueError) as exc:
        print(f"polardepth {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
