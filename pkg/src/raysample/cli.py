"""Command-line entry point: ``raysample {sample,moments,bluenoise,resample-importance,eval}``.

Exit codes: 0 success, 2 bad arguments, 3 scene load failure, 4 empty
surface, 5 volume requested for an unsigned field.

Every output embeds the run configuration, its SHA-256 and the library
version.  The thread count is excluded from the hash because it does not
change any output.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from raysample import __version__
from raysample.errors import EmptySurfaceError, GridLoadError, MeshLoadError, UnsignedFieldError
from raysample.evaluation import (
    ground_truth_mesh_sampler,
    mesh_partition,
    rejection_baseline,
    sphere_partition,
    sphere_uniform_sampler,
    torus_partition,
    torus_uniform_sampler,
    tv_result,
    write_eval_csv,
)
from raysample.fields import ImplicitField, Sphere, Torus, WithLipschitz
from raysample.io import SceneError, config_hash, load_grid, load_scene, write_json, write_ply_points, write_xyz
from raysample.mesh import load_mesh
from raysample.moments import convergence_series, estimate_area_stratified, estimate_moments, write_series_csv
from raysample.postprocess import blue_noise_subsample, curvature_weights, importance_resample
from raysample.rays import RayMode, RayStreamConfig
from raysample.sampler import (
    SampleMode,
    SampleSet,
    build_voxels,
    sample_keep_all,
    sample_keep_one,
    sample_resampled,
    sample_stratified,
    trace_stratified,
)
from raysample.tracer import TraceConfig

log = logging.getLogger("raysample")

EXIT_OK, EXIT_ARGS, EXIT_SCENE, EXIT_EMPTY, EXIT_UNSIGNED = 0, 2, 3, 4, 5
EVAL_METHODS = ("ours", "rejection", "ground-truth")
# options that never influence output bytes
_UNHASHED = {"threads", "out", "report", "series", "func", "verbose"}


class UsageError(Exception):
    pass


class SceneLoadFailure(Exception):
    pass


# -- argument parsing ------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        value = int(float(text)) if "e" in text.lower() else int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _add_scene(p: argparse.ArgumentParser, required: bool = True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--scene", help="JSON scene description")
    g.add_argument("--mesh", help="OBJ or binary PLY mesh")
    g.add_argument("--grid", help="ISGF grid file")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=_positive_float, default=1e-4, help="hit tolerance")
    p.add_argument("--lambda", dest="lipschitz", type=_positive_float, help="override the Lipschitz bound")
    p.add_argument("--lds", action="store_true", help="low-discrepancy (scrambled Halton) rays")
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--report", help="JSON report path (default: stdout)")
    p.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raysample", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"raysample {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="surface samples from traced rays")
    _add_scene(p)
    _add_common(p)
    n = p.add_mutually_exclusive_group(required=True)
    n.add_argument("--rays", type=int, help="number of rays M")
    n.add_argument("--samples", type=int, help="number of output samples N")
    p.add_argument("--mode", choices=[m.value for m in SampleMode], default=SampleMode.KEEP_ALL.value)
    p.add_argument("--voxel-res", type=_positive_int, default=16, help="stratified mode grid resolution")
    p.add_argument("--normals", action="store_true", help="store gradient normals (PLY)")
    p.add_argument("-o", "--out", required=True, help="points file (.ply or .xyz)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("moments", help="area, volume and centroids")
    _add_scene(p)
    _add_common(p)
    p.add_argument("--rays", type=int, required=True)
    p.add_argument("--volume", action="store_true", help="also estimate volume and solid centroid")
    p.add_argument("--voxel-res", type=_positive_int, help="add a stratified area estimate")
    p.add_argument("--series", help="CSV of estimates over ray-count prefixes")
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("bluenoise", help="white-noise samples subsampled to blue noise")
    _add_scene(p)
    _add_common(p)
    p.add_argument("--samples", type=_positive_int, required=True, help="white-noise input count")
    p.add_argument("--target", type=_positive_int, required=True, help="output count")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_bluenoise)

    p = sub.add_parser("resample-importance", help="importance resampling of white-noise samples")
    _add_scene(p)
    _add_common(p)
    p.add_argument("--samples", type=_positive_int, required=True, help="white-noise input count")
    p.add_argument("--count", type=_positive_int, help="output count (default: --samples)")
    p.add_argument("--weights", default="curvature", help="constant | curvature | file:PATH (one weight per line)")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_resample_importance)

    p = sub.add_parser("eval", help="TV and evaluation counts against reference samplers")
    shape = p.add_mutually_exclusive_group(required=True)
    shape.add_argument("--shape", choices=["sphere", "torus"])
    shape.add_argument("--mesh")
    p.add_argument("--methods", default=",".join(EVAL_METHODS))
    p.add_argument("--samples", type=_positive_int, action="append", help="N (repeatable; default 50000)")
    p.add_argument("--seeds", type=_positive_int, default=1, help="seeds 0..k-1 offset by --seed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=_positive_float, default=1e-2, help="rejection band")
    p.add_argument("--epsilon", type=_positive_float, default=1e-4)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("-o", "--out", help="CSV path (default: stdout)")
    p.add_argument("--report", help="JSON summary path")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


# -- shared helpers --------------------------------------------------------------


def run_config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _UNHASHED}
    for key in ("scene", "mesh", "grid"):
        if cfg.get(key):
            cfg[key] = Path(cfg[key]).name
    return cfg


def provenance(args) -> dict:
    cfg = run_config(args)
    return {"config": cfg, "config_hash": config_hash(cfg), "version": __version__}


def _comments(prov: dict) -> list[str]:
    return [f"raysample {prov['version']}", f"config_hash {prov['config_hash']}", f"seed {prov['config']['seed']}"]


def load_field(args) -> ImplicitField:
    try:
        if args.scene:
            field = load_scene(args.scene)
        elif args.mesh:
            field = load_mesh(args.mesh)
        else:
            field = load_grid(args.grid)
    except (SceneError, MeshLoadError, GridLoadError, OSError) as exc:
        raise SceneLoadFailure(str(exc)) from exc
    if getattr(args, "lipschitz", None):
        bounds = field.bounds
        field = WithLipschitz(field, args.lipschitz)
        field.bounds = bounds
    return field


def ray_config(args, field: ImplicitField) -> RayStreamConfig:
    mode = RayMode.LOW_DISCREPANCY if getattr(args, "lds", False) else RayMode.UNIFORM
    return RayStreamConfig(mode, args.seed, field.bounds)


def trace_config(args) -> TraceConfig:
    return TraceConfig(epsilon=args.epsilon, threads=args.threads)


def write_points(path, samples: SampleSet, prov: dict, field: ImplicitField | None = None, normals: bool = False):
    comments = _comments(prov)
    if str(path).lower().endswith(".xyz"):
        write_xyz(path, samples.points, comments)
        return
    nrm = None
    if normals and field is not None:
        nrm = samples.with_normals(field).normals
    write_ply_points(path, samples.points, nrm, comments)


def _white_noise(field, rays, trace, n):
    samples, report = sample_keep_all(field, rays, trace=trace, n_samples=n)
    return samples, report


# -- commands --------------------------------------------------------------------


def cmd_sample(args) -> int:
    mode = SampleMode(args.mode)
    if args.rays is not None and args.rays < 1:
        raise UsageError("--rays must be >= 1")
    if args.samples is not None and args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if mode is SampleMode.RESAMPLE and args.samples is None:
        raise UsageError("resample mode needs --samples")
    if mode is SampleMode.STRATIFIED and args.rays is None:
        raise UsageError("stratified mode needs --rays (total over occupied voxels)")
    field = load_field(args)
    rays, trace = ray_config(args, field), trace_config(args)
    prov = provenance(args)
    extra = {}
    if mode is SampleMode.KEEP_ALL:
        samples, report = sample_keep_all(field, rays, args.rays, trace, args.samples)
    elif mode is SampleMode.KEEP_ONE:
        samples, report = sample_keep_one(field, rays, args.rays, trace, args.samples)
    elif mode is SampleMode.RESAMPLE:
        samples, report = sample_resampled(field, rays, None, args.samples, trace)
    else:
        grid = build_voxels(field, args.voxel_res)
        occupied = int(grid.occupied.sum())
        if occupied == 0:
            raise EmptySurfaceError("no occupied voxels")
        per_voxel = args.rays // occupied
        if per_voxel < 1:
            raise UsageError(f"--rays {args.rays} is fewer than the {occupied} occupied voxels")
        samples, report, st = sample_stratified(field, rays, grid, per_voxel, trace)
        area, area_se = estimate_area_stratified(st)
        extra = {"rays_per_voxel": per_voxel, "stratified_area": area, "stratified_area_se": area_se}
    if len(samples) == 0:
        raise EmptySurfaceError(f"no ray hit the surface ({report.M} rays)")
    write_points(args.out, samples, prov, field, args.normals)
    write_json(args.report, {**prov, **report.to_dict(), **extra, "field_evals": field.eval_count})
    return EXIT_OK


def cmd_moments(args) -> int:
    if args.rays < 1:
        raise UsageError("--rays must be >= 1")
    field = load_field(args)
    if args.volume and not field.is_signed:
        raise UnsignedFieldError("--volume needs a signed field")
    rays, trace = ray_config(args, field), trace_config(args)
    report = estimate_moments(field, rays, args.rays, trace, volume=args.volume)
    out = {**provenance(args), **report.to_dict()}
    if args.voxel_res:
        grid = build_voxels(field, args.voxel_res)
        occupied = int(grid.occupied.sum())
        if occupied:
            st = trace_stratified(field, grid, rays, max(1, args.rays // occupied), trace.replace(chords=False))
            out["stratified_area"], out["stratified_area_se"] = estimate_area_stratified(st)
    if args.series:
        counts = sorted({int(c) for c in np.unique(np.geomspace(min(1000, args.rays), args.rays, 13).astype(int))})
        write_series_csv(args.series, convergence_series(field, rays, counts, trace))
    write_json(args.report, out)
    return EXIT_OK


def cmd_bluenoise(args) -> int:
    if args.target > args.samples:
        raise UsageError("--target must not exceed --samples")
    field = load_field(args)
    rays, trace = ray_config(args, field), trace_config(args)
    white, report = _white_noise(field, rays, trace, args.samples)
    # the same rays give a Crofton area estimate for r_max
    area = rays.bounding.surface_area / 2.0 * report.K / report.M
    blue = blue_noise_subsample(white, args.target, area=area)
    prov = provenance(args)
    write_points(args.out, blue, prov)
    write_json(args.report, {**prov, **report.to_dict(), "area_estimate": area, "output": len(blue)})
    return EXIT_OK


def _weights(spec: str, field, samples: SampleSet):
    if spec == "constant":
        return np.ones(len(samples))
    if spec == "curvature":
        return curvature_weights(field)(samples.points)
    if spec.startswith("file:"):
        w = np.loadtxt(spec[5:], ndmin=1)
        if len(w) != len(samples):
            raise UsageError(f"weights file has {len(w)} entries for {len(samples)} samples")
        return w
    raise UsageError(f"unknown weight function {spec!r}")


def cmd_resample_importance(args) -> int:
    field = load_field(args)
    rays, trace = ray_config(args, field), trace_config(args)
    white, report = _white_noise(field, rays, trace, args.samples)
    w = _weights(args.weights, field, white)
    try:
        out = importance_resample(white, w, args.count or args.samples, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    prov = provenance(args)
    write_points(args.out, out, prov)
    write_json(args.report, {**prov, **report.to_dict(), "output": len(out), "weights": args.weights})
    return EXIT_OK


def _eval_target(args):
    """(field, partition, reference sampler, shape name)."""
    if args.shape == "sphere":
        return Sphere(radius=0.5), sphere_partition(0.5, 10, 20, epsilon=args.epsilon), \
            lambda n, s: sphere_uniform_sampler(n, s, 0.5), "sphere"
    if args.shape == "torus":
        return Torus(), torus_partition(epsilon=args.epsilon), lambda n, s: torus_uniform_sampler(n, s), "torus"
    try:
        mesh = load_mesh(args.mesh)
    except (MeshLoadError, OSError) as exc:
        raise SceneLoadFailure(str(exc)) from exc
    return mesh, mesh_partition(mesh, args.epsilon), \
        lambda n, s: ground_truth_mesh_sampler(mesh.vertices, mesh.faces, n, s), Path(args.mesh).stem


def cmd_eval(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = sorted(set(methods) - set(EVAL_METHODS))
    if unknown or not methods:
        raise UsageError(f"unknown method(s) {unknown}; choose from {EVAL_METHODS}")
    sizes = args.samples or [50_000]
    field, partition, reference, shape = _eval_target(args)
    trace = trace_config(args)
    rows = []
    for n in sizes:
        for k in range(args.seeds):
            seed = args.seed + k
            for method in methods:
                if method == "ours":
                    field.reset_counter()
                    samples, rep = sample_keep_all(field, RayStreamConfig(seed=seed, bounding=field.bounds), trace=trace, n_samples=n)
                    pts, evals = samples.points, rep.evals
                elif method == "rejection":
                    res = rejection_baseline(field, n, args.delta, seed)
                    pts, evals = res.points, res.evals
                else:
                    pts, evals = reference(n, seed), 0
                tv = tv_result(pts, partition)
                rows.append({"method": method, "shape": shape, "N": n, "TV": tv.tv, "evals": int(evals), "seed": seed,
                             "excluded": tv.excluded})
                log.info("%s %s N=%d seed=%d TV=%.4f evals=%d", method, shape, n, seed, tv.tv, evals)
    prov = provenance(args)
    out = args.out or "/dev/stdout"
    write_eval_csv(out, rows, _comments(prov))
    if args.report:
        write_json(args.report, {**prov, "rows": rows})
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"raysample: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except SceneLoadFailure as exc:
        print(f"raysample: cannot load scene: {exc}", file=sys.stderr)
        return EXIT_SCENE
    except EmptySurfaceError as exc:
        print(f"raysample: empty surface: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except UnsignedFieldError as exc:
        print(f"raysample: {exc}", file=sys.stderr)
        return EXIT_UNSIGNED


if __name__ == "__main__":
    sys.exit(main())
