"""Command line interface: ``thedra reconstruct | generate | curves``.

Exit status: 0 on success, 2 for usage errors and missing input, 1 when a
pipeline stage fails (artifacts produced so far are written with a
``.partial`` suffix).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .beta_curves import CurveError, SampledCurve2, beta_evolute, beta_involute, evolute_singular_params
from .cloud_io import CloudFormatError, read_cloud, write_ply_ascii, write_xyz
from .geom_core import GeometryError
from .pipeline import Reconstruction, RunConfig, StageError, reconstruct, _jsonable
from .svg import polylines_svg
from .thedron import THedron, export_obj
from .tsurface_gen import add_noise, benchmark_spec, sample_tsurface, sample_tsurface_points

log = logging.getLogger("thedra")

EXIT_OK, EXIT_STAGE, EXIT_USAGE = 0, 1, 2


def _axis_arg(text: str) -> np.ndarray:
    try:
        v = np.array([float(t) for t in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError("axis must be three comma-separated numbers") from None
    if v.shape != (3,) or not np.all(np.isfinite(v)) or np.linalg.norm(v) == 0:
        raise argparse.ArgumentTypeError("axis must be a non-zero vector x,y,z")
    return v / np.linalg.norm(v)


def _float_list(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thedra", description="T-hedron reconstruction from point clouds")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="fit a T-hedron to a point cloud")
    r.add_argument("--input", required=True, help="cloud file (.xyz, .ply, .obj)")
    r.add_argument("--out", required=True, help="output prefix")
    r.add_argument("-m", type=int, default=30, help="profile segments (default 30)")
    r.add_argument("-n", type=int, default=30, help="trajectory segments (default 30)")
    r.add_argument("--slice-q1", type=float, default=0.3)
    r.add_argument("--slice-q2", type=float, default=0.7)
    r.add_argument("--eps-frac", type=float, default=0.01, help="slab half-width over bbox diagonal")
    r.add_argument("--pencil-step-deg", type=float, default=1.0)
    r.add_argument("--beta-regression-degree", type=int, default=5)
    r.add_argument("--alpha", type=float, default=0.5, help="dimensionless learning rate")
    r.add_argument("--max-iters", type=int, default=200)
    r.add_argument("--elapses", type=int, default=0, help="axis re-registration rounds")
    r.add_argument("--axis", type=_axis_arg, default=None, help='skip estimation, e.g. "0,0,1"')
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--point-to-plane", action="store_true")
    r.add_argument("--manifest", default=None, help="generator manifest (default: <input>.manifest.json)")

    g = sub.add_parser("generate", help="sample a synthetic T-surface cloud")
    g.add_argument("--out", required=True, help="output prefix")
    g.add_argument("--preset", default="benchmark", choices=["benchmark"])
    g.add_argument("--points", type=int, default=10000)
    g.add_argument("--variance", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-m", type=int, default=30, help="profile segments of the ground-truth mesh")
    g.add_argument("-n", type=int, default=30, help="trajectory segments of the ground-truth mesh")
    g.add_argument("--format", choices=["xyz", "ply"], default="xyz")

    c = sub.add_parser("curves", help="beta-evolutes and beta-involutes of planar curves")
    c.add_argument("--out", required=True, help="output prefix")
    c.add_argument("--curve", choices=["circle", "ellipse"], default="circle")
    c.add_argument("--axes", type=_float_list, default=[2.0, 1.0], help="ellipse semi-axes a,b")
    c.add_argument("--mode", choices=["evolute", "involute"], default="evolute")
    c.add_argument("--beta", type=_float_list, default=[0.0], help="beta values in radians")
    c.add_argument("--d", type=_float_list, default=[1.0, 2.0, 3.0], help="involute constants")
    c.add_argument("--t-range", type=_float_list, default=None, help="parameter range t0,t1")
    c.add_argument("--samples", type=int, default=2001)
    return p


# --- reconstruct -----------------------------------------------------------------

def _write(path: Path, data, partial: bool):
    path = Path(str(path) + ".partial") if partial else path
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)
    return path


def _manifest_for(args) -> dict | None:
    cand = Path(args.manifest) if args.manifest else Path(args.input).with_suffix(".manifest.json")
    if cand.exists():
        try:
            return json.loads(cand.read_text())
        except json.JSONDecodeError:
            log.warning("ignoring unreadable manifest %s", cand)
    return None


def cmd_reconstruct(args) -> int:
    inp = Path(args.input)
    if not inp.exists():
        print(f"error: input not found: {inp}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cloud = read_cloud(inp)
    except (CloudFormatError, GeometryError, ValueError) as exc:
        print(f"error: [io] {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest = _manifest_for(args)
    truth = None
    if manifest and "axis" in manifest:
        truth = np.asarray(manifest["axis"], float)
    cfg = RunConfig(m=args.m, n=args.n, slice_q1=args.slice_q1, slice_q2=args.slice_q2,
                    eps_frac=args.eps_frac, pencil_step_deg=args.pencil_step_deg,
                    beta_regression_degree=args.beta_regression_degree, alpha=args.alpha,
                    max_iters=args.max_iters, elapses=args.elapses, axis=args.axis, seed=args.seed,
                    point_to_plane=args.point_to_plane, truth_axis=truth)
    np.random.seed(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    state = Reconstruction()
    t0 = time.perf_counter()
    error = None
    try:
        reconstruct(cloud, cfg, log=log.info, iteration_log=rows.append, partial=state)
    except StageError as exc:
        error = exc
    except GeometryError as exc:
        error = StageError("config", str(exc))
    partial = error is not None
    written = []
    if state.initial is not None:
        written.append(_write(Path(f"{out}_initial.obj"), export_obj(state.initial.thedron), partial))
    if state.final is not None:
        written.append(_write(Path(f"{out}_final.obj"), export_obj(state.final), partial))
    csv_text = state.fits[-1].csv_log() if state.fits else None
    if state.fits and len(state.fits) > 1:
        csv_text = _elapse_csv(state.fits)
    if csv_text is not None:
        written.append(_write(Path(f"{out}_iterations.csv"), csv_text, partial))
    metrics = dict(state.metrics)
    if not metrics:
        metrics = {"axis_candidates": [{"direction": c.direction.tolist(), "cost": float(c.cost)}
                                       for c in state.candidates],
                   "axis": None if state.axis is None else state.axis.tolist()}
    metrics["angular_deviation_table"] = _deviation_table(state.deviations) if truth is not None else "n/a"
    metrics["input"] = str(inp)
    metrics["config"] = _jsonable({k: v for k, v in vars(args).items() if k != "func"})
    metrics["runtime_seconds"] = time.perf_counter() - t0
    if error is not None:
        metrics["error"] = {"stage": error.stage, "message": str(error), "hint": error.hint}
    written.append(_write(Path(f"{out}_metrics.json"), json.dumps(_jsonable(metrics), indent=2), partial))
    for w in written:
        log.info("wrote %s", w)
    if error is not None:
        print(f"error: {error}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


def _elapse_csv(fits) -> str:
    lines = []
    for e, f in enumerate(fits):
        body = f.csv_log().splitlines()
        if e == 0:
            lines.append("elapse," + body[0])
        lines.extend(f"{e},{row}" for row in body[1:])
    return "\n".join(lines) + "\n"


def _deviation_table(devs) -> dict:
    names = ["Angular Deviation Before Elapse", "After 1st Elapse", "After 2nd Elapse"]
    table = {}
    for k, d in enumerate(devs):
        name = names[k] if k < len(names) else f"After {k}th Elapse"
        table[name] = "n/a" if d is None else float(d)
    return table


# --- generate ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.points < 10 or args.variance < 0 or args.m < 1 or args.n < 1:
        print("error: need --points >= 10, --variance >= 0, -m/-n >= 1", file=sys.stderr)
        return EXIT_USAGE
    spec = benchmark_spec(n_s=args.m + 1, n_t=args.n + 1)
    pts = sample_tsurface_points(spec, args.points, seed=args.seed)
    cloud = add_noise(pts, args.variance, args.seed + 1)
    grid = sample_tsurface(spec).grid
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cloud_path = out.with_name(out.name + "." + args.format)
    (write_xyz if args.format == "xyz" else write_ply_ascii)(cloud_path, cloud.points)
    mesh_path = out.with_name(out.name + ".truth.obj")
    mesh_path.write_bytes(export_obj(THedron(grid)))
    manifest = {"preset": args.preset, "points": args.points, "variance": args.variance, "seed": args.seed,
                "noise_seed": args.seed + 1, "axis": [0.0, 0.0, 1.0], "spec": _jsonable(spec.meta),
                "truth_mesh": mesh_path.name, "cloud": cloud_path.name, "m": args.m, "n": args.n}
    out.with_name(out.name + ".manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %s, %s and manifest", cloud_path, mesh_path)
    return EXIT_OK


# --- curves ------------------------------------------------------------------------

def _base_curve(args):
    if args.curve == "circle":
        t0, t1 = args.t_range or [0.0, 2 * np.pi]
        closed = args.t_range is None
        t = np.linspace(t0, t1, args.samples, endpoint=not closed)
        v = np.stack([np.cos(t), np.sin(t)], axis=1)
    else:
        if len(args.axes) != 2 or min(args.axes) <= 0:
            raise CurveError("ellipse semi-axes must be two positive numbers")
        a, b = args.axes
        t0, t1 = args.t_range or [0.0, 2 * np.pi]
        closed = args.t_range is None
        t = np.linspace(t0, t1, args.samples, endpoint=not closed)
        v = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
    return SampledCurve2(v, t, closed)


def cmd_curves(args) -> int:
    try:
        if args.samples < 5:
            raise CurveError("need at least 5 samples")
        if not args.beta or any(abs(b) >= np.pi / 2 for b in args.beta):
            raise CurveError("beta values must lie in (-pi/2, pi/2)")
        curve = _base_curve(args)
        layers = [{"points": curve.vertices, "label": args.curve, "color": "#000000"}]
        data = {"curve": args.curve, "t": curve.t.tolist(), "vertices": curve.vertices.tolist(),
                "mode": args.mode, "results": []}
        if args.mode == "evolute":
            for b in args.beta:
                pts, sing = beta_evolute(curve, b)
                rep = evolute_singular_params(curve, b)
                if len(pts) and np.ptp(pts, axis=0).max() < 1e-9 * max(1.0, np.abs(pts).max()):
                    layers.append({"points": pts[:1], "label": f"evolute beta={b:g} (point)", "markers": True})
                else:
                    layers.append({"points": pts, "label": f"evolute beta={b:g}"})
                data["results"].append({"beta": b, "points": pts.tolist(), "pole_indices": sing.tolist(),
                                        "singular_params": list(rep.params),
                                        "identically_singular": bool(rep.identically_singular)})
                log.info("beta=%g: %d singular parameter(s)%s", b, len(rep.params),
                         " (every point singular)" if rep.identically_singular else "")
        else:
            b = args.beta[0]
            for d in args.d:
                inv = beta_involute(curve, b, d)
                layers.append({"points": inv, "label": f"involute beta={b:g} d={d:g}"})
                data["results"].append({"beta": b, "d": d, "points": inv.tolist()})
    except CurveError as exc:
        print(f"error: [curves] {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_name(out.name + ".svg").write_text(polylines_svg(layers, title=f"{args.curve} {args.mode}"))
    out.with_name(out.name + ".json").write_text(json.dumps(data))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    handler = {"reconstruct": cmd_reconstruct, "generate": cmd_generate, "curves": cmd_curves}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
