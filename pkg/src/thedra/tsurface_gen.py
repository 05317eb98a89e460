"""Synthetic T-surfaces and point clouds with known ground truth.

A T-surface sweeps a planar profile p(s) = (p_x, p_z) through a family of
vertical planes that envelope a cylinder over the directrix d(t), while the
profile is scaled by xi(t):

    x(s,t) = d(t) - xi(t) * (int_0^t |d'|/xi + p_x(s)) * d'(t)/|d'(t)|
    z(s,t) = p_z(s)

with d(0) = 0 and d'(0) pointing along -x, so x(s,0) = (p_x(s), 0, p_z(s)).
xi comes either directly from the caller or from beta as
exp(int kappa tan(beta)).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .geom_core import GeometryError, PointCloud
from .thedron import THedron, build_thedron

__all__ = [
    "TSurfaceSpec",
    "SampledSurface",
    "sample_tsurface",
    "sample_tsurface_points",
    "sample_axial",
    "add_noise",
    "shuffle_and_flatten",
    "benchmark_spec",
    "circle_directrix",
    "half_circle_profile",
    "random_thedron",
]

Curve = Callable[[np.ndarray], np.ndarray]


@dataclass
class TSurfaceSpec:
    """Inputs of the T-surface parametrization.

    ``directrix(t)`` and ``profile(s)`` return (N, 2) arrays.  Give either
    ``beta(t)`` or ``xi(t)``; with neither, beta = 0 (moulding surface).
    ``refine`` sets how many quadrature sub-steps lie between grid values of t.
    """

    directrix: Curve
    profile: Curve
    t_range: tuple[float, float]
    s_range: tuple[float, float]
    n_t: int = 60
    n_s: int = 40
    beta: Optional[Callable[[np.ndarray], np.ndarray]] = None
    xi: Optional[Callable[[np.ndarray], np.ndarray]] = None
    directrix_derivative: Optional[Curve] = None
    refine: int = 16
    meta: dict = field(default_factory=dict)


@dataclass
class SampledSurface:
    """Grid x(s_i, t_j) of shape (n_s, n_t, 3) plus the parameter values."""

    grid: np.ndarray
    s: np.ndarray
    t: np.ndarray
    xi: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.grid.reshape(-1, 3)


def circle_directrix(radius: float = 1.0):
    """Circle through the origin with initial tangent (-1, 0), turning left."""
    def d(t):
        t = np.asarray(t, float)
        return radius * np.stack([-np.sin(t), np.cos(t) - 1.0], axis=-1)

    def dd(t):
        t = np.asarray(t, float)
        return radius * np.stack([-np.cos(t), -np.sin(t)], axis=-1)

    return d, dd


def half_circle_profile(center_x: float = 2.5, radius: float = 1.0):
    """Half circle bulging toward the directrix: p = (c - r sin s, r cos s), s in [0, pi].

    With the profile nearer the axis at mid-height the swept surface has a
    waist, i.e. negative Gaussian curvature everywhere.
    """
    def p(s):
        s = np.asarray(s, float)
        return np.stack([center_x - radius * np.sin(s), radius * np.cos(s)], axis=-1)

    return p


def benchmark_spec(n_s: int = 40, n_t: int = 60, t_max: float = np.pi,
                   center_x: float = 2.5, radius: float = 1.0) -> TSurfaceSpec:
    """Unit-circle directrix, xi(t) = 1 + t/2, half-circle profile."""
    d, dd = circle_directrix(1.0)
    return TSurfaceSpec(
        directrix=d, directrix_derivative=dd,
        profile=half_circle_profile(center_x, radius),
        t_range=(0.0, t_max), s_range=(0.0, np.pi), n_t=n_t, n_s=n_s,
        xi=lambda t: 1.0 + np.asarray(t, float) / 2.0,
        meta={"preset": "benchmark", "center_x": center_x, "radius": radius, "t_max": t_max},
    )


class _Sweep:
    """Directrix quantities on a fine t grid, normalized to the initial frame."""

    def __init__(self, spec: TSurfaceSpec, t_fine: np.ndarray):
        d = np.asarray(spec.directrix(t_fine), float).reshape(-1, 2)
        if spec.directrix_derivative is not None:
            dd = np.asarray(spec.directrix_derivative(t_fine), float).reshape(-1, 2)
        elif len(t_fine) >= 3:
            dd = np.gradient(d, t_fine, axis=0, edge_order=2)
        else:
            h = 1e-6 * max(1.0, abs(t_fine[0]))
            dd = (np.asarray(spec.directrix(t_fine + h)) - np.asarray(spec.directrix(t_fine - h))).reshape(-1, 2) / (2 * h)
        speed = np.linalg.norm(dd, axis=1)
        if np.any(speed <= 1e-14 * max(1.0, np.max(np.abs(d)))):
            raise GeometryError("directrix is not regular (zero derivative)")
        # rigid normalization: d(t0) -> 0, d'(t0) -> direction (-1, 0)
        u = dd[0] / speed[0]
        ang = np.arctan2(u[1], u[0])
        c, s = np.cos(np.pi - ang), np.sin(np.pi - ang)
        R = np.array([[c, -s], [s, c]])
        self.d = (d - d[0]) @ R.T
        self.dd = dd @ R.T
        self.speed = speed
        self.T = self.dd / speed[:, None]
        self.t = t_fine
        if spec.xi is not None:
            xi = np.broadcast_to(np.asarray(spec.xi(t_fine), float), t_fine.shape).copy()
        elif spec.beta is not None and len(t_fine) >= 3:
            ddd = np.gradient(self.dd, t_fine, axis=0, edge_order=2)
            turning = (self.dd[:, 0] * ddd[:, 1] - self.dd[:, 1] * ddd[:, 0]) / speed**2
            b = np.broadcast_to(np.asarray(spec.beta(t_fine), float), t_fine.shape)
            xi = np.exp(cumulative_trapezoid(turning * np.tan(b), t_fine, initial=0.0))
        else:
            xi = np.ones_like(t_fine)
        if np.any(xi <= 0):
            raise GeometryError("scaling xi must stay positive")
        self.xi = xi
        self.I = (cumulative_trapezoid(speed / xi, t_fine, initial=0.0)
                  if len(t_fine) > 1 else np.zeros(1))

    def evaluate(self, idx_or_t, px, pz, interpolate=False):
        """Surface points for parameter pairs (broadcast over px/pz rows)."""
        if interpolate:
            tq = idx_or_t
            dq = np.stack([np.interp(tq, self.t, self.d[:, k]) for k in range(2)], -1)
            Tq = np.stack([np.interp(tq, self.t, self.T[:, k]) for k in range(2)], -1)
            Tq /= np.linalg.norm(Tq, axis=-1, keepdims=True)
            xiq = np.interp(tq, self.t, self.xi)
            Iq = np.interp(tq, self.t, self.I)
        else:
            dq, Tq, xiq, Iq = (self.d[idx_or_t], self.T[idx_or_t], self.xi[idx_or_t], self.I[idx_or_t])
        lam = xiq * (Iq + px)
        xy = dq - lam[..., None] * Tq
        return np.concatenate([xy, np.broadcast_to(pz, lam.shape)[..., None]], axis=-1)


def sample_tsurface(spec: TSurfaceSpec) -> SampledSurface:
    """Evaluate the T-surface on an (n_s, n_t) parameter grid."""
    if spec.n_t < 1 or spec.n_s < 1:
        raise GeometryError("grid sizes must be positive")
    t_grid = np.linspace(*spec.t_range, spec.n_t) if spec.n_t > 1 else np.array([spec.t_range[0]])
    s_grid = np.linspace(*spec.s_range, spec.n_s) if spec.n_s > 1 else np.array([spec.s_range[0]])
    if spec.n_t > 1:
        r = max(1, int(spec.refine))
        t_fine = np.linspace(*spec.t_range, (spec.n_t - 1) * r + 1)
        pick = np.arange(spec.n_t) * r
    else:
        t_fine, pick = t_grid, np.array([0])
    sw = _Sweep(spec, t_fine)
    prof = np.asarray(spec.profile(s_grid), float).reshape(-1, 2)
    grid = sw.evaluate(pick[None, :], prof[:, 0:1], prof[:, 1:2])
    return SampledSurface(grid, s_grid, t_grid, sw.xi[pick])


def sample_tsurface_points(spec: TSurfaceSpec, q: int, seed: int = 0, fine: int = 4001) -> np.ndarray:
    """q points at uniformly random parameters (s, t); returns (q, 3)."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(*spec.t_range, size=q)
    s = rng.uniform(*spec.s_range, size=q)
    t_fine = np.linspace(*spec.t_range, fine)
    sw = _Sweep(spec, t_fine)
    prof = np.asarray(spec.profile(s), float).reshape(-1, 2)
    return sw.evaluate(t, prof[:, 0], prof[:, 1], interpolate=True)


def sample_axial(xi, theta, profile) -> SampledSurface:
    """Stretch-rotation surface x = (-xi p_x cos th, -xi p_x sin th, p_z).

    ``xi`` and ``theta`` are per-t samples, ``profile`` an (n_s, 2) array.
    """
    xi = np.asarray(xi, float)
    th = np.asarray(theta, float)
    prof = np.asarray(profile, float).reshape(-1, 2)
    if np.any(xi <= 0):
        raise GeometryError("xi must be positive")
    r = -xi[None, :] * prof[:, 0:1]
    grid = np.stack([r * np.cos(th)[None, :], r * np.sin(th)[None, :],
                     np.broadcast_to(prof[:, 1:2], r.shape)], axis=-1)
    return SampledSurface(grid, np.arange(len(prof), dtype=float), th.copy(), xi.copy())


def add_noise(cloud, variance: float, seed: int) -> PointCloud:
    """i.i.d. N(0, variance) added to every coordinate."""
    if variance < 0:
        raise GeometryError("variance must be non-negative")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    if variance == 0:
        return PointCloud(pts.copy())
    rng = np.random.default_rng(seed)
    return PointCloud(pts + rng.normal(0.0, np.sqrt(variance), size=pts.shape))


def shuffle_and_flatten(surface, seed: int) -> PointCloud:
    pts = surface.points if isinstance(surface, SampledSurface) else np.asarray(surface, float).reshape(-1, 3)
    perm = np.random.default_rng(seed).permutation(len(pts))
    return PointCloud(pts[perm])


def random_thedron(seed: int, m: int = 12, n: int = 20) -> THedron:
    """A random T-hedron for round-trip tests.

    Ranges: profile heights rise by 0.15 to 0.3 per row; the profile sits at
    distance 2 to 3 from the directrix with a sine/cosine wiggle of at most
    0.4 and 0.2; directrix edges are 0.25 to 0.45 long and turn by 5 to 12
    degrees each; scalings eta lie in [0.97, 1.05].
    """
    rng = np.random.default_rng(seed)
    z = np.cumsum(np.r_[0.0, rng.uniform(0.15, 0.3, m)])
    s = np.linspace(0, np.pi, m + 1)
    px = -rng.uniform(2, 3) + rng.uniform(-0.4, 0.4) * np.sin(s) + rng.uniform(-0.2, 0.2) * np.cos(s)
    heading = np.cumsum(np.radians(rng.uniform(5, 12, n)))
    steps = rng.uniform(0.25, 0.45, n)[:, None] * np.c_[np.cos(heading), np.sin(heading)]
    d = np.vstack([[-1.0, 0.0], [0.0, 0.0], np.cumsum(steps, axis=0)])
    return build_thedron(np.c_[px, z], d, np.r_[1.0, rng.uniform(0.97, 1.05, n)])
