"""End-to-end reconstruction driver used by the CLI and the demos."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .axis_estimation import AxisCandidate, angle_between_axes, estimate_axis
from .geom_core import GeometryError, KNNIndex, PointCloud, auto_normals, bbox_diagonal, jet_roughness
from .global_opt import OptimizerConfig, correspondences, fit, run_elapses
from .initial_guess import (InitialGuess, InitialGuessConfig, detect_layers, find_layers,
                            initial_guess_candidates, layered_initial_guess, symmetric_fit_score)
from .thedron import THedron

__all__ = ["StageError", "RunConfig", "Reconstruction", "reconstruct", "mesh_rms"]


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it, ``hint`` suggests a fix."""

    def __init__(self, stage: str, message: str, hint: str = ""):
        super().__init__(f"[{stage}] {message}" + (f" (hint: {hint})" if hint else ""))
        self.stage = stage
        self.hint = hint


_HINTS = {
    "axis": "pass --axis x,y,z to skip estimation",
    "initial_guess": "try a larger --eps-frac or different --slice-q1/--slice-q2",
    "fit": "lower --alpha or --max-iters",
}


@dataclass
class RunConfig:
    m: int = 30
    n: int = 30
    slice_q1: float = 0.3
    slice_q2: float = 0.7
    eps_frac: float = 0.01
    pencil_step_deg: float = 1.0
    beta_regression_degree: int = 5
    alpha: float = 0.5
    max_iters: int = 200
    elapses: int = 0
    axis: Optional[np.ndarray] = None
    seed: int = 0
    point_to_plane: bool = False
    truth_axis: Optional[np.ndarray] = None
    trial_iters: int = 30
    outer_tol: float = 1e-4

    def validate(self):
        if self.m < 2 or self.n < 2:
            raise StageError("config", "mesh resolution m, n must be at least 2")
        for q in (self.slice_q1, self.slice_q2):
            if not 0 < q < 1:
                raise StageError("config", "slice quantiles must lie in (0, 1)")
        if self.slice_q1 == self.slice_q2:
            raise StageError("config", "slice quantiles must differ")

    def initial_config(self) -> InitialGuessConfig:
        return InitialGuessConfig(m=self.m, n=self.n, slice_q1=self.slice_q1, slice_q2=self.slice_q2,
                                  eps_frac=self.eps_frac, pencil_step_deg=self.pencil_step_deg,
                                  beta_regression_degree=self.beta_regression_degree)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(alpha=self.alpha, max_iters=self.max_iters, elapses=self.elapses,
                               point_to_plane=self.point_to_plane, outer_tol=self.outer_tol)


@dataclass
class Reconstruction:
    candidates: list = field(default_factory=list)
    axis: Optional[np.ndarray] = None
    axis_source: str = ""
    initial: Optional[InitialGuess] = None
    final: Optional[THedron] = None
    fits: list = field(default_factory=list)
    deviations: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def mesh_rms(vertices, points, index: Optional[KNNIndex] = None) -> float:
    """RMS distance from mesh vertices to their closest cloud points."""
    V = np.asarray(vertices, float).reshape(-1, 3)
    index = index or KNNIndex(np.asarray(points, float))
    y, _ = correspondences(V[None], index)
    return float(np.sqrt(np.mean(np.sum((V - y[0]) ** 2, axis=1))))


def reconstruct(cloud: PointCloud, config: Optional[RunConfig] = None,
                log: Optional[Callable[[str], None]] = None,
                iteration_log: Optional[Callable[[dict], None]] = None,
                partial: Optional[Reconstruction] = None) -> Reconstruction:
    """Axis, initial guess, constrained fit and optional axis elapses.

    Meshes in the result are in world coordinates.  ``partial`` (if given)
    is filled in place so a caller still sees the finished stages when a
    later stage raises.
    """
    cfg = config or RunConfig()
    cfg.validate()
    say = log or (lambda msg: None)
    out = partial if partial is not None else Reconstruction()
    timings = {}
    pts = cloud.points
    diag = bbox_diagonal(pts)
    t0 = time.perf_counter()
    layers = None
    if cfg.axis is not None:
        axis = np.asarray(cfg.axis, float)
        axis = axis / np.linalg.norm(axis)
        out.axis_source = "override"
        say("axis override given; estimation skipped")
        layers = detect_layers(pts, axis)
    else:
        layers = find_layers(pts)
    if layers is not None and cfg.axis is None:
        axis = layers.axis
        out.axis_source = "layers"
        say(f"cloud lies in {len(layers.heights)} parallel layers; axis {np.round(axis, 6).tolist()} "
            "taken from them")
    if layers is None and cloud.normals is None:
        cloud = auto_normals(cloud)
    if out.axis_source == "":
        try:
            out.candidates = estimate_axis(cloud)
        except GeometryError as exc:
            raise StageError("axis", str(exc), _HINTS["axis"]) from exc
        axis = out.candidates[0].direction
        out.axis_source = "estimated"
        say(f"axis {np.round(axis, 6).tolist()} (cost {out.candidates[0].cost:.3e}, "
            f"{len(out.candidates)} candidate(s))")
    out.axis = axis
    timings["axis"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    try:
        if layers is not None:
            ig = layered_initial_guess(cloud, layers, cfg.initial_config())
        else:
            ig = _select_candidate(initial_guess_candidates(cloud, axis, cfg.initial_config()),
                                   cloud, cfg, say)
    except GeometryError as exc:
        raise StageError("initial_guess", str(exc), _HINTS["initial_guess"]) from exc
    out.initial = ig
    timings["initial_guess"] = time.perf_counter() - t1
    index = KNNIndex(pts)
    init_rms = mesh_rms(ig.thedron.vertices, pts, index)
    say(f"initial guess rms {init_rms:.6g} ({init_rms / diag:.3%} of bbox diagonal)")
    t2 = time.perf_counter()
    P = ig.frame.to_local(pts)
    nrm = None if cloud.normals is None else cloud.normals @ ig.frame.rotation.T
    ocfg = cfg.optimizer_config()
    deviations = []

    def dev_of(R):
        if cfg.truth_axis is None:
            return None
        w = (R @ ig.frame.rotation).T @ np.array([0.0, 0.0, 1.0])
        return angle_between_axes(w, cfg.truth_axis)

    deviations.append(dev_of(np.eye(3)))
    R_tot, t_tot = np.eye(3), np.zeros(3)
    try:
        if ocfg.elapses > 0:
            def on_elapse(e, res):
                deviations.append(dev_of(res.rotation))
                say(f"elapse {e}: F {res.fits[-1].history[-1]['F']:.6g}"
                    + ("" if deviations[-1] is None else f", axis deviation {deviations[-1]:.4f} deg"))

            el = run_elapses(P, ig.local, ocfg, nrm, on_elapse=on_elapse)
            fits, local_mesh, R_tot, t_tot = el.fits, el.mesh, el.rotation, el.translation
        else:
            res = fit(P, ig.local, ocfg, nrm, log=iteration_log)
            fits, local_mesh = [res], res.mesh
    except (GeometryError, FloatingPointError) as exc:
        raise StageError("fit", str(exc), _HINTS["fit"]) from exc
    timings["fit"] = time.perf_counter() - t2
    # local mesh lives in the moved frame p' = R (Rf (p - o)) + t
    Rw = R_tot @ ig.frame.rotation
    V = local_mesh.vertices.reshape(-1, 3)
    world = (V - t_tot) @ Rw + ig.frame.origin
    final = THedron(world.reshape(local_mesh.vertices.shape), etas=local_mesh.etas,
                    thetas=local_mesh.thetas, report=dict(local_mesh.report))
    out.final = final
    out.fits = fits
    out.deviations = deviations
    final_rms = mesh_rms(final.vertices, pts, index)
    say(f"final rms {final_rms:.6g} ({final_rms / diag:.3%} of bbox diagonal)")
    hist = fits[-1].history[-1]
    out.metrics = {
        "points": int(len(pts)),
        "bbox_diagonal": diag,
        "roughness": jet_roughness(pts),
        "axis_candidates": [{"direction": c.direction.tolist(), "cost": float(c.cost)} for c in out.candidates],
        "axis": axis.tolist(),
        "axis_source": out.axis_source,
        "final_axis": (Rw.T @ np.array([0.0, 0.0, 1.0])).tolist(),
        "angular_deviation": {"before_elapse": _na(deviations[0]),
                              "after_elapses": [_na(d) for d in deviations[1:]]},
        "initial_rms": init_rms,
        "final_rms": final_rms,
        "final_rms_relative": final_rms / diag,
        "max_G1": hist["max_G1"],
        "max_G2": hist["max_G2"],
        "iterations": [f.iterations for f in fits],
        "stop_reasons": [f.stop_reason for f in fits],
        "initial_guess": _jsonable(ig.report),
        "timings": timings,
        "mesh": {"m": cfg.m, "n": cfg.n},
    }
    return out


def _select_candidate(cands, cloud, cfg: RunConfig, say) -> InitialGuess:
    """Keep the candidate whose mesh scores best after a short trial fit.

    Raw initial meshes can look alike while one of them sits in a poor basin
    of the constrained fit; a few iterations separate them.
    """
    if len(cands) == 1 or cfg.trial_iters <= 0:
        return cands[0]
    ocfg = cfg.optimizer_config()
    ocfg.max_iters = cfg.trial_iters
    scores = []
    for ig in cands:
        P = ig.frame.to_local(cloud.points)
        nrm = None if cloud.normals is None else cloud.normals @ ig.frame.rotation.T
        try:
            mesh = fit(P, ig.local, ocfg, nrm).mesh
            scores.append(symmetric_fit_score(mesh.vertices, P))
        except (GeometryError, FloatingPointError):
            scores.append(np.inf)
    best = int(np.argmin(scores))
    for ig, sc in zip(cands, scores):
        ig.report["trial_score"] = float(sc)
    say("initial guess models: " + ", ".join(f"{ig.report['beta_model']} {sc:.4g}"
                                              for ig, sc in zip(cands, scores))
        + f"; keeping {cands[best].report['beta_model']}")
    return cands[best]


def _na(v):
    return "n/a" if v is None else float(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj
