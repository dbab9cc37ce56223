"""Command-line interface: generate clouds, build plans, fit, grid-search,
evaluate, and export level sets.

Exit codes: 0 success, 1 data/validation error, 2 capacity/configuration
error, 3 numerical failure.  All randomness flows from --seed; unseeded
generation draws a seed and prints it.  Inputs are never mutated.
"""

from __future__ import annotations

import argparse
import json
import secrets
import sys
from pathlib import Path

import numpy as np

from . import evaluation, plots, shapes
from .basis import BasisSpec
from .compensation import build_plan, load_plan, save_plan
from .errors import ConfigError, DataError, MomentfitError, NumericalError
from .fitter import FitConfig, GridSpec, fit, grid_search_theta
from .noise import NoiseModel


def _parse_basis(text: str) -> BasisSpec:
    """Inline JSON or a path to a JSON file."""
    text = text.strip()
    if text.startswith("{"):
        return BasisSpec.from_json(text)
    path = Path(text)
    if not path.exists():
        raise ConfigError(f"basis spec file not found: {path}")
    return BasisSpec.from_json(path.read_text())


def _parse_grid(text: str) -> GridSpec:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--grid expects lo:hi:step, got {text!r}") from exc
    return GridSpec(lo=lo, hi=hi, step=step)


def _parse_bbox(text: str):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--bbox expects lo:hi, got {text!r}") from exc
    return (lo, hi)


def _require_inputs(*paths) -> None:
    missing = [str(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise DataError("input file(s) not found: " + ", ".join(missing))


def _load_shape_arg(name: str) -> shapes.ImplicitShape:
    if name in shapes.BUILTIN_SHAPES:
        return shapes.builtin_shape(name)
    path = Path(name)
    if path.exists():
        return shapes.load_shape(path)
    raise DataError(f"unknown shape {name!r} (builtins: {', '.join(shapes.BUILTIN_SHAPES)})")


def _load_config(args, require_theta_or_grid: bool = True) -> FitConfig:
    if args.config:
        _require_inputs(args.config)
        cfg = FitConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        if args.basis is None:
            raise ConfigError("either --config or --basis is required")
        cfg = FitConfig(basis=_parse_basis(args.basis))
    # flags override config-file values
    if getattr(args, "theta", None) is not None:
        cfg.theta = args.theta
        cfg.grid = None
    if getattr(args, "grid", None) is not None:
        cfg.grid = _parse_grid(args.grid)
        cfg.theta = None
    if getattr(args, "mode", None) is not None:
        cfg.mode = {"plain": "plain", "smoothed": "smoothed"}[args.mode]
    if getattr(args, "smoothing_c", None) is not None:
        cfg.smoothing_c = args.smoothing_c
    if getattr(args, "normalize", False):
        cfg.normalize = True
    if getattr(args, "no_compensation", False):
        cfg.compensate = False
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if require_theta_or_grid and cfg.theta is None and cfg.grid is None:
        raise ConfigError("specify --theta or --grid (or put one in --config)")
    cfg.__post_init__()
    return cfg


def cmd_generate(args) -> int:
    seed = args.seed if args.seed is not None else secrets.randbits(32)
    if args.seed is None:
        print(f"generate: drew seed {seed}")
    shape = _load_shape_arg(args.shape)
    bbox = _parse_bbox(args.bbox) if args.bbox else None
    cloud = shapes.sample_zero_set(shape, args.count, seed=seed, bbox=bbox)
    pts = cloud.points
    if not args.no_normalize:
        pts, _ = shapes.normalize(pts)
    noisy = shapes.add_noise(pts, args.noise_level, seed=seed + 1)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    stem = shape.name or "shape"
    clean_path = out / f"{stem}_noiseless.csv"
    noisy_path = out / f"{stem}_noisy.csv"
    shapes.write_points(pts, clean_path)
    shapes.write_points(noisy.points, noisy_path)
    meta = {
        "shape": shape.name,
        "basis_spec": shape.spec.to_dict(),
        "a_star": list(shape.coefficients),
        "count": int(pts.shape[0]),
        "noise_level": args.noise_level,
        "u_actual": noisy.u_actual,
        "max_abs": float(np.abs(pts).max()),
        "normalized": not args.no_normalize,
        "seed": seed,
    }
    meta_path = out / f"{stem}_meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    if not args.no_plot:
        if pts.shape[1] in (2, 3):
            plots.plot_cloud(noisy.points, out / f"{stem}_noisy.png",
                             title=f"{stem}: {100 * args.noise_level:.0f}% noise")
    print(f"generate: wrote {clean_path}, {noisy_path}, {meta_path}")
    return 0


def cmd_build_plan(args) -> int:
    spec = _parse_basis(args.basis)
    plan = build_plan(spec)
    payload = save_plan(plan)
    Path(args.output).write_bytes(payload)
    print(f"build-plan: {spec.feature_count} features, "
          f"{len(payload)} bytes -> {args.output}")
    return 0


def _plan_for(cfg: FitConfig, plan_path):
    if plan_path:
        _require_inputs(plan_path)
        plan = load_plan(Path(plan_path).read_bytes())
        if plan.spec != cfg.basis:
            raise ConfigError("plan basis does not match the requested basis")
        return plan
    return build_plan(cfg.basis)


def cmd_fit(args) -> int:
    _require_inputs(args.input, args.config, args.plan)
    cfg = _load_config(args)
    points = shapes.read_points(args.input)
    plan = _plan_for(cfg, args.plan)
    result = fit(points, cfg, plan=plan)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = result.to_dict()
    doc["config"] = cfg.to_dict()
    out.write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"fit: sigma_min={result.sigma_min:.3e} theta={result.theta_used:.4g} "
          f"mode={result.mode} -> {out}")
    if args.export_level_set:
        frame_pts = result.transform.apply(points) if cfg.normalize else points
        bbox = _parse_bbox(args.bbox) if args.bbox else _auto_bbox(frame_pts)
        shape = evaluation.as_shape(cfg.basis, result)
        level = evaluation.extract_level_set(shape, bbox=bbox, resolution=args.resolution)
        _export_level_set(level, Path(args.export_level_set), frame_pts, args.no_plot)
    return 0


def _auto_bbox(points) -> tuple:
    m = float(np.abs(points).max())
    return (-1.2 * m, 1.2 * m)


def _export_level_set(level, path: Path, points, no_plot: bool) -> None:
    if level.dim == 2:
        evaluation.export_polylines_csv(level, path)
        if not no_plot:
            plots.plot_level_set_2d(level, path.with_suffix(".png"), points=points)
    else:
        evaluation.export_obj(level, path)
        if not no_plot:
            plots.plot_mesh_3d(level, path.with_suffix(".png"), points=points)
    print(f"level set -> {path}" + ("" if no_plot else f", {path.with_suffix('.png')}"))


def cmd_grid_search(args) -> int:
    _require_inputs(args.input, args.config, args.plan, args.metadata)
    cfg = _load_config(args, require_theta_or_grid=False)
    if cfg.grid is None:
        cfg.grid = GridSpec()
    points = shapes.read_points(args.input)
    plan = _plan_for(cfg, args.plan)
    reference = None
    if args.metadata:
        meta = json.loads(Path(args.metadata).read_text())
        reference = float(meta.get("max_abs")) if "max_abs" in meta else None
    gs = grid_search_theta(points, plan, family=cfg.family,
                           levels=cfg.grid.levels(), reference=reference,
                           threads=cfg.threads)
    prefix = Path(args.output)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path = prefix.with_suffix(".json")
    doc = gs.to_dict()
    doc["config"] = cfg.to_dict()
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    csv_path = prefix.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        fh.write("level,theta,sigma_min\n")
        for lv, th, sg in zip(gs.levels, gs.thetas, gs.sigma_curve):
            fh.write(f"{lv:.17g},{th:.17g},{sg:.17g}\n")
    outputs = [str(json_path), str(csv_path)]
    if not args.no_plot:
        png_path = prefix.with_suffix(".png")
        plots.plot_sigma_curve(gs.levels, gs.sigma_curve, gs.level_star, png_path)
        outputs.append(str(png_path))
    print(f"grid-search: theta*={gs.theta_star:.4g} (level {100 * gs.level_star:.0f}%) "
          f"-> {', '.join(outputs)}")
    return 0


def cmd_eval(args) -> int:
    _require_inputs(args.noiseless, args.fit_result, args.metadata)
    points = shapes.read_points(args.noiseless)
    doc = json.loads(Path(args.fit_result).read_text())
    from .fitter import AffineTransform, FitResult
    result = FitResult(
        coefficients=np.asarray(doc["coefficients"], dtype=float),
        sigma_min=doc["sigma_min"], spectrum=np.asarray(doc["spectrum"]),
        theta_used=doc["theta_used"], gap=doc["gap"], mode=doc["mode"])
    spec = BasisSpec.from_dict(doc["config"]["basis"]) if "config" in doc \
        else _parse_basis(args.basis)
    a_star = None
    if args.metadata:
        meta = json.loads(Path(args.metadata).read_text())
        if "a_star" in meta:
            a_star = np.asarray(meta["a_star"], dtype=float)
    bbox = _parse_bbox(args.bbox) if args.bbox else _auto_bbox(points)
    report = evaluation.evaluate_fit(result, spec, a_star=a_star,
                                     noiseless_points=points, bbox=bbox,
                                     resolution=args.resolution)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    if not args.no_plot and spec.n == 2:
        level = evaluation.extract_level_set(evaluation.as_shape(spec, result),
                                             bbox=bbox, resolution=args.resolution or 512)
        plots.plot_level_set_2d(level, out.with_suffix(".png"), points=points)
    print(f"eval: {report.to_dict()} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="momentfit",
                                description="Implicit surface fitting from noisy point clouds")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic surface and add noise")
    g.add_argument("--shape", required=True, help="builtin name or shape JSON file")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--noise-level", type=float, default=0.0)
    g.add_argument("--seed", type=int)
    g.add_argument("--bbox", help="sampling box lo:hi (pre-normalization)")
    g.add_argument("--no-normalize", action="store_true")
    g.add_argument("--no-plot", action="store_true")
    g.add_argument("--output", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("build-plan", help="derive and persist a compensation plan")
    b.add_argument("--basis", required=True, help="basis JSON (inline or file)")
    b.add_argument("--output", required=True)
    b.set_defaults(func=cmd_build_plan)

    def add_fit_flags(sp, with_mode=True):
        sp.add_argument("--input", required=True, help="point cloud CSV/XYZ")
        sp.add_argument("--config", help="fit config JSON file")
        sp.add_argument("--basis", help="basis JSON (inline or file)")
        sp.add_argument("--plan", help="prebuilt plan file")
        sp.add_argument("--theta", type=float, help="known absolute noise bound")
        sp.add_argument("--grid", help="noise-level grid lo:hi:step (fractions)")
        if with_mode:
            sp.add_argument("--mode", choices=["plain", "smoothed"])
            sp.add_argument("--smoothing-c", dest="smoothing_c", type=float)
        sp.add_argument("--normalize", action="store_true")
        sp.add_argument("--no-compensation", action="store_true")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--no-plot", action="store_true")

    f = sub.add_parser("fit", help="fit coefficients to a noisy cloud")
    add_fit_flags(f)
    f.add_argument("--output", required=True, help="fit result JSON")
    f.add_argument("--export-level-set", help="CSV (2-D) or OBJ (3-D) path")
    f.add_argument("--resolution", type=int, default=0)
    f.add_argument("--bbox", help="extraction box lo:hi")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("grid-search", help="scan noise-bound candidates")
    add_fit_flags(s, with_mode=False)
    s.add_argument("--metadata", help="generation metadata JSON (level reference)")
    s.add_argument("--output", required=True, help="output prefix (.json/.csv/.png)")
    s.set_defaults(func=cmd_grid_search)

    e = sub.add_parser("eval", help="metrics against noiseless points / ground truth")
    e.add_argument("--noiseless", required=True)
    e.add_argument("--fit-result", required=True)
    e.add_argument("--metadata", help="generation metadata JSON (ground-truth coefficients)")
    e.add_argument("--basis", help="basis JSON when the fit result lacks a config")
    e.add_argument("--bbox")
    e.add_argument("--resolution", type=int, default=0)
    e.add_argument("--no-plot", action="store_true")
    e.add_argument("--output", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MomentfitError as exc:  # safety net for new subclasses
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
