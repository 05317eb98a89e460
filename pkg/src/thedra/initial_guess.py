"""Initial T-hedron from a point cloud and an axis direction.

Pipeline: two horizontal slices give trajectory polylines t1 and t2; a pencil
of lines through each t1 vertex locates the line meeting t2 under the same
angle to both normals (the beta-path); consecutive beta-rotated normal lines
intersect in the directrix; the ratios and oriented angles about those points
give the stretch-rotations; a profile extracted near the first profile plane
is swept by them.

All work happens in a local frame whose third axis is the given axis
(:class:`AxisFrame`), so slices are planes z = h.  Plane-to-plane maps are
stored as complex affine maps w -> alpha w + beta acting on the xy-part
(w = x + iy), which covers stretch-rotations (beta = g (1 - alpha)) and the
translation limit (alpha = 1) alike.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .beta_curves import (CurveError, _project_to_polyline, curve_order, emst_path_indices,
                          enforce_sign_consistency, euclidean_mst, vpo_denoise)
from .geom_core import GeometryError, PointCloud, Plane, auto_normals, bbox_diagonal, orthonormal_frame
from .thedron import THedron

__all__ = [
    "InitialGuessError",
    "InitialGuessConfig",
    "AxisFrame",
    "TrajectoryPair",
    "BetaPath",
    "ProfileResult",
    "InitialGuess",
    "slice_cloud",
    "choose_slice_height",
    "thin_curve_samples",
    "resample_polyline",
    "prepare_trajectory",
    "extract_trajectories",
    "edge_normals",
    "beta_path",
    "zero_beta_path",
    "directrix_from_normals",
    "scaling_factors",
    "rotation_signs",
    "profile_planes",
    "extract_profile",
    "build_initial_guess", "initial_guess_candidates", "symmetric_fit_score",
    "LayerStructure",
    "layer_axis",
    "find_layers",
    "detect_layers",
    "layered_initial_guess",
]


class InitialGuessError(GeometryError):
    """Failure of one phase-1 stage; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class InitialGuessConfig:
    m: int = 30
    n: int = 30
    slice_q1: float = 0.3
    slice_q2: float = 0.7
    eps_frac: float = 0.01
    pencil_step_deg: float = 1.0
    zero_threshold_deg: float = 2.0
    beta_regression_degree: Optional[int] = 5
    trajectory_vertices: int = 40
    profile_vertices: int = 120
    vpo_w1: float = 0.05
    superposition: bool = True
    snap_slices: bool = True
    link_tol_deg: float = 10.0
    slope_correction: bool = True
    beta_fallback: bool = True
    beta_model: str = "auto"
    min_separation_frac: float = 0.015

    def validate(self):
        if self.m < 1 or self.n < 1:
            raise InitialGuessError("config", "m and n must be positive")
        for q in (self.slice_q1, self.slice_q2):
            if not 0.0 < q < 1.0:
                raise InitialGuessError("config", "slice quantiles must lie in (0, 1)")
        if self.slice_q1 == self.slice_q2:
            raise InitialGuessError("config", "slice quantiles must differ")
        if self.eps_frac <= 0:
            raise InitialGuessError("config", "eps_frac must be positive")
        if self.beta_model not in ("auto", "path", "zero"):
            raise InitialGuessError("config", "beta_model must be 'auto', 'path' or 'zero'")
        step = self.pencil_step_deg
        if step <= 0 or abs(180.0 / step - round(180.0 / step)) > 1e-9:
            raise InitialGuessError("config", "pencil step must divide 180 degrees")


@dataclass(frozen=True)
class AxisFrame:
    """Rows of ``rotation`` are (e1, e2, axis); ``origin`` is the local zero."""

    rotation: np.ndarray
    origin: np.ndarray

    @classmethod
    def from_axis(cls, axis, points) -> "AxisFrame":
        return cls(orthonormal_frame(axis), np.asarray(points, float).mean(axis=0))

    def to_local(self, pts) -> np.ndarray:
        return (np.asarray(pts, float) - self.origin) @ self.rotation.T

    def to_world(self, pts) -> np.ndarray:
        return np.asarray(pts, float) @ self.rotation + self.origin


@dataclass
class TrajectoryPair:
    t1: np.ndarray
    t2: np.ndarray
    h1: float
    h2: float
    n1: np.ndarray
    n2: np.ndarray
    reports: dict = field(default_factory=dict)


@dataclass
class BetaPath:
    """beta per t1 vertex except the last (radians), plus regression data."""

    betas: np.ndarray
    coeffs: Optional[np.ndarray]
    degree: Optional[int]
    support: np.ndarray
    raw: np.ndarray
    gaps: list
    terminal: Optional[float]
    cells_below: int
    alternatives: int = 0
    weights: Optional[np.ndarray] = None
    line_fit: object = field(default=None, repr=False)
    terminal_phi: Optional[float] = None
    fallback: bool = False

    @property
    def last_index(self) -> float:
        """Largest (fractional) t1 index the path covers."""
        n = len(self.betas)
        if self.terminal_phi is not None and self.support[-1] == n - 1:
            return float(n)
        return float(self.support[-1])

    def line_angle(self, x) -> np.ndarray:
        """Angle (deg) of the profile-plane trace at fractional t1 index x."""
        x = np.asarray(x, float)
        out = self.line_fit(x)
        n = len(self.betas)
        if self.terminal_phi is not None:
            a = self.line_fit(n - 1)
            b = _near_mod180(self.terminal_phi, a)
            f = np.clip(x - (n - 1), 0.0, 1.0)
            out = np.where(x > n - 1, a + f * (b - a), out)
        return out


@dataclass
class ProfileResult:
    polyline: np.ndarray
    ambiguous: bool
    components: int


@dataclass
class InitialGuess:
    thedron: THedron  # world coordinates
    local: THedron  # axis frame coordinates
    frame: AxisFrame
    trajectories: TrajectoryPair
    path: BetaPath
    columns: np.ndarray
    anchors: np.ndarray
    alphas: np.ndarray
    axial: bool
    report: dict = field(default_factory=dict)


# --- slicing and trajectories --------------------------------------------

def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)


def slice_cloud(local_points, h: float, eps: float, min_points: int = 8,
                normals=None, min_slope: float = 0.2) -> np.ndarray:
    """xy-coordinates of the points with |z - h| <= eps (local frame, z = axis).

    Without ``normals`` the points are dropped vertically onto z = h.  With
    (local-frame) normals each point instead slides within its tangent plane
    to height h, which collapses the band a sloped surface leaves in a thick
    slab; points whose normal is within ``min_slope`` of vertical are skipped.
    """
    if eps <= 0:
        raise InitialGuessError("slice", "eps must be positive")
    P = np.asarray(local_points, float)
    sel = np.abs(P[:, 2] - h) <= eps
    if normals is None:
        out = P[sel, :2]
    else:
        N = np.asarray(normals, float)[sel]
        nxy2 = np.sum(N[:, :2] ** 2, axis=1)
        ok = nxy2 >= min_slope**2
        dz = h - P[sel, 2][ok]
        out = P[sel, :2][ok] - (N[ok, 2] * dz / nxy2[ok])[:, None] * N[ok, :2]
    if len(out) < min_points:
        raise InitialGuessError("slice", f"only {len(out)} points within eps={eps:.3g} of h={h:.3g}; "
                                f"try eps={2 * eps:.3g}")
    return out


def choose_slice_height(z: np.ndarray, q: float, eps: float, snap: bool = True) -> float:
    """Quantile height, optionally moved to the densest slab within +-5% quantile."""
    z = np.asarray(z, float)
    h0 = float(np.quantile(z, q))
    if not snap:
        return h0
    lo, hi = np.quantile(z, [max(q - 0.05, 0.0), min(q + 0.05, 1.0)])
    cand = np.unique(np.r_[np.linspace(lo, hi, 41), z[(z >= lo) & (z <= hi)]])
    zs = np.sort(z)
    counts = np.searchsorted(zs, cand + eps, "right") - np.searchsorted(zs, cand - eps, "left")
    best = counts.max()
    # a genuine density peak (layered samples) must beat the typical count clearly
    if best < 1.5 * np.median(counts):
        return h0
    top = cand[counts == best]
    return float(top[np.argmin(np.abs(top - h0))])


def _local_line_fit(pts, k):
    _, nb = cKDTree(pts).query(pts, k=k)
    hood = pts[nb]
    ctr = hood.mean(axis=1)
    rel = hood - ctr[:, None, :]
    cov = np.einsum("nki,nkj->nij", rel, rel)
    w, v = np.linalg.eigh(cov)
    ratio = np.sqrt(np.maximum(w[:, 0], 0) / np.maximum(w[:, -1], 1e-300))
    return ctr, v[:, :, -1], ratio


def thin_curve_samples(pts, k: Optional[int] = None, iters: int = 3) -> np.ndarray:
    """Pull noisy curve samples onto local regression lines (moving least squares)."""
    P = np.asarray(pts, float).copy()
    if len(P) < 4:
        return P
    k = int(np.clip(len(P) // 15, 6, 40)) if k is None else k
    k = min(k, len(P))
    for _ in range(iters):
        ctr, u, _ = _local_line_fit(P, k)
        P = ctr + np.sum((P - ctr) * u, axis=1, keepdims=True) * u
    return P


def _thickness(pts) -> float:
    if len(pts) < 10:
        return 0.0
    k = int(np.clip(len(pts) // 15, 6, 40))
    return float(np.median(_local_line_fit(pts, min(k, len(pts)))[2]))


def resample_polyline(poly, count: int) -> np.ndarray:
    """``count`` points equally spaced in arc length along ``poly``."""
    p = np.asarray(poly, float)
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    s = np.r_[0.0, np.cumsum(seg)]
    if s[-1] == 0:
        return np.repeat(p[:1], count, axis=0)
    tq = np.linspace(0.0, s[-1], count)
    return np.stack([np.interp(tq, s, p[:, c]) for c in range(p.shape[1])], axis=1)


def _bin_average(poly, bins: int) -> np.ndarray:
    """Average consecutive samples in equal arc-length bins; keeps both ends."""
    p = np.asarray(poly, float)
    if len(p) <= bins:
        return p
    s = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))]
    lab = np.minimum((s / max(s[-1], 1e-300) * bins).astype(int), bins - 1)
    out = np.array([p[lab == b].mean(axis=0) for b in range(bins) if np.any(lab == b)])
    out[0], out[-1] = p[0], p[-1]
    return out


def _dedupe(poly, tol):
    keep = [0]
    for i in range(1, len(poly)):
        if np.linalg.norm(poly[i] - poly[keep[-1]]) > tol:
            keep.append(i)
    return poly[keep]


def _ordered_curve(pts2, max_vertices):
    """Order unorganized samples of an open curve and reduce them to a polyline."""
    pts = np.asarray(pts2, float)
    noisy = _thickness(pts) > 0.15
    work = thin_curve_samples(pts) if noisy else pts
    order = curve_order(work)
    poly = work[order]
    poly = _bin_average(poly, max_vertices) if noisy or len(poly) > max_vertices else poly
    span = float(np.max(np.ptp(poly, axis=0))) or 1.0
    return _dedupe(poly, 1e-9 * span), noisy


def prepare_trajectory(pts2, max_vertices: int = 40, w1: float = 0.05, max_shift: float = 0.01):
    """Ordered, reduced, faired and sign-consistent trajectory polyline plus a report.

    Sign smoothing that would move a vertex by more than ``max_shift`` times
    the curve length is rejected; the faired polyline is kept and flagged.
    """
    try:
        poly, noisy = _ordered_curve(pts2, max_vertices)
    except CurveError as exc:
        raise InitialGuessError("trajectories", f"ordering failed: {exc}") from exc
    if len(poly) < 3:
        raise InitialGuessError("trajectories", "fewer than 3 distinct trajectory vertices")
    sigma = float(np.sqrt(np.mean(np.diff(poly, 3, axis=0) ** 2) / 20.0)) if len(poly) > 4 else 0.0
    poly, w_fair = vpo_denoise(poly, sigma)
    length = float(np.sum(np.linalg.norm(np.diff(poly, axis=0), axis=1)))
    out, rep = enforce_sign_consistency(poly, w1=w1)
    fallback = False
    if not rep.consistent:
        # jitter produced runs no smoothing can honour; use the dominant sign
        out, rep = enforce_sign_consistency(poly, w1=w1, window=len(poly))
        fallback = True
    moved = float(np.max(np.linalg.norm(out - poly, axis=1)))
    distorted = moved > max_shift * length
    if distorted:
        out = poly
    return out, {"vertices": len(out), "noisy": noisy, "fairing_w2": w_fair, "noise_sigma": sigma,
                 "smoothing_doublings": rep.doublings, "sign_consistent": rep.consistent and not distorted,
                 "dominant_sign_fallback": fallback, "smoothing_rejected": distorted}


def edge_normals(poly) -> np.ndarray:
    """Each edge rotated clockwise by 90 degrees and normalized: one per vertex but the last."""
    e = np.diff(np.asarray(poly, float), axis=0)
    n = np.stack([e[:, 1], -e[:, 0]], axis=1)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _trajectory_at(P, z, q, eps, config, normals=None, levels=4):
    """Slice and prepare one trajectory at quantile q.

    Slabs of half-width eps, eps/2, ... are tried.  Thinner slabs cut the
    band a sloped or flat region leaves, thicker ones average more noise; the
    one whose polyline shows the least third-difference noise wins.  Slabs
    whose samples cannot be ordered are skipped.
    """
    h = choose_slice_height(z, q, eps, config.snap_slices)
    best, last_err = None, None
    for level in range(levels):
        e = eps * 0.5**level
        try:
            pts = slice_cloud(P, h, e, min_points=max(8, 3 * config.trajectory_vertices), normals=normals)
            poly, rep = prepare_trajectory(pts, config.trajectory_vertices, config.vpo_w1)
        except InitialGuessError as exc:
            last_err = exc
            continue
        rep.update(slice_points=len(pts), slice_eps=e, quantile=q, height=h)
        if best is None or rep["noise_sigma"] < best[1]["noise_sigma"]:
            best = (poly, rep)
    if best is None:
        raise last_err
    return h, best[0], best[1]


def _separation(t1, t2) -> float:
    """Median distance of t2's vertices to the polyline t1."""
    _, d = _project_to_polyline(t2, t1)
    return float(np.median(d))


_ALT_Q2 = (0.8, 0.2, 0.5, 0.85, 0.15, 0.6, 0.4)


def extract_trajectories(local_points, config: InitialGuessConfig, normals=None) -> TrajectoryPair:
    """Both trajectories, ordered and sign-consistent, run in the same direction.

    When the second slice projects (almost) onto the first, as for slices
    mirrored about the waist of a symmetric profile, no equal-angle line is
    well defined; the second height is then moved to the alternative
    quantile giving the widest separation.
    """
    P = np.asarray(local_points, float)
    diag = bbox_diagonal(P)
    eps = config.eps_frac * diag
    z = P[:, 2]
    h1, t1, r1 = _trajectory_at(P, z, config.slice_q1, eps, config, normals)
    h2, t2, r2 = _trajectory_at(P, z, config.slice_q2, eps, config, normals)
    sep = _separation(t1, t2)
    adjusted = None
    if sep < config.min_separation_frac * diag:
        best = (sep, h2, t2, r2, None)
        for q in _ALT_Q2:
            if abs(q - config.slice_q1) < 0.1:
                continue
            try:
                hq, tq, rq = _trajectory_at(P, z, q, eps, config, normals)
            except InitialGuessError:
                continue
            sq = _separation(t1, tq)
            if sq > best[0]:
                best = (sq, hq, tq, rq, q)
            if sq >= 2 * config.min_separation_frac * diag:
                break
        sep, h2, t2, r2, adjusted = best
    same = np.linalg.norm(t2[0] - t1[0]) + np.linalg.norm(t2[-1] - t1[-1])
    flip = np.linalg.norm(t2[-1] - t1[0]) + np.linalg.norm(t2[0] - t1[-1])
    if flip < same:
        t2 = t2[::-1].copy()
    return TrajectoryPair(t1, t2, h1, h2, edge_normals(t1), edge_normals(t2),
                          {"t1": r1, "t2": r2, "eps": eps, "separation": sep, "q2_adjusted": adjusted})


# --- beta-path ---------------------------------------------------------------

def _wrap90(deg):
    return (np.asarray(deg, float) + 90.0) % 180.0 - 90.0


def _ang(v):
    return np.degrees(np.arctan2(v[..., 1], v[..., 0]))


def _nearest_hits(P, phis_deg, A, D):
    """Nearest intersection of lines through P (angles phis) with segments A + s D.

    Returns (segment index, s) per line, index -1 where nothing is hit.
    """
    u = np.stack([np.cos(np.radians(phis_deg)), np.sin(np.radians(phis_deg))], axis=-1)
    AP = A - P
    den = u[:, None, 0] * D[None, :, 1] - u[:, None, 1] * D[None, :, 0]
    num_r = AP[None, :, 0] * D[None, :, 1] - AP[None, :, 1] * D[None, :, 0]
    num_s = AP[None, :, 0] * u[:, None, 1] - AP[None, :, 1] * u[:, None, 0]
    ok = np.abs(den) > 1e-14 * (np.linalg.norm(D, axis=1)[None] + 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(ok, num_r / den, np.inf)
        s = np.where(ok, num_s / den, np.nan)
    valid = ok & (s >= -1e-12) & (s <= 1 + 1e-12)
    dist = np.where(valid, np.abs(r), np.inf)
    k = np.argmin(dist, axis=1)
    rows = np.arange(len(u))
    hit = np.isfinite(dist[rows, k])
    return np.where(hit, k, -1), np.clip(np.where(hit, s[rows, k], 0.0), 0.0, 1.0)


def _t2_vertex_normals(t2):
    n = edge_normals(t2)
    return np.vstack([n, n[-1:]])


def _delta(P, nP, phis, t2, nv2):
    """Signed angle from n2(hit) to n at P (wrapped to [-90, 90)), nan where no hit."""
    A = t2[:-1]
    D = np.diff(t2, axis=0)
    k, s = _nearest_hits(P, phis, A, D)
    nh = (1 - s)[:, None] * nv2[np.maximum(k, 0)] + s[:, None] * nv2[np.maximum(k, 0) + 1]
    g = _wrap90(_ang(nP) - _ang(nh))
    return np.where(k >= 0, g, np.nan), k


def _roots_at_vertex(P, nP, t2, nv2, step):
    """Pencil angles (deg, in [0, 180)) where the equal-angle condition holds.

    Sign changes of the angle difference between neighbouring pencil lines
    are refined by bisection; brackets straddling a jump of the nearest hit
    are ignored.  Also returns how many pencil cells were within 2 steps of zero.
    """
    phis = np.arange(0.0, 180.0, step)
    g, k = _delta(P, nP, phis, t2, nv2)
    below = int(np.sum(np.abs(g) <= 2.0 * step))
    roots = []
    nxt = np.roll(np.arange(len(phis)), -1)
    for j in range(len(phis)):
        j2 = nxt[j]
        g1, g2 = g[j], g[j2]
        if not (np.isfinite(g1) and np.isfinite(g2)):
            continue
        if g1 == 0.0:
            roots.append(phis[j])
            continue
        if np.sign(g1) == np.sign(g2) or abs(g1) + abs(g2) > 45.0 or abs(k[j] - k[j2]) > 1:
            continue
        lo, hi = phis[j], phis[j] + step
        glo = g1
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            gm = _delta(P, nP, np.array([mid]), t2, nv2)[0][0]
            if not np.isfinite(gm):
                break
            if np.sign(gm) == np.sign(glo):
                lo, glo = mid, gm
            else:
                hi = mid
        roots.append((0.5 * (lo + hi)) % 180.0)
    return roots, below


def _near_mod180(values, ref):
    """Representatives of ``values`` (mod 180) closest to ``ref``."""
    return ref + _wrap90(np.asarray(values, float) - ref)


class _AnglePoly:
    """Line angle phi (deg) as a polynomial in the vertex index, or raw interpolation."""

    def __init__(self, x, phi, degree, weights=None):
        self.lo, self.hi = float(x[0]), float(x[-1])
        self.raw = degree is None or len(x) == 1
        if self.raw:
            self.x, self.phi, self.coeffs, self.degree = x, phi, None, None
        else:
            self.degree = int(min(degree, len(x) - 1))
            self.scale = max(self.hi - self.lo, 1.0) / 2.0
            self.mid = (self.lo + self.hi) / 2.0
            w = None if weights is None else np.sqrt(weights)
            self.coeffs = np.polyfit((x - self.mid) / self.scale, phi, self.degree, w=w)

    def _inside(self, xq):
        if self.raw:
            return np.interp(xq, self.x, self.phi)
        return np.polyval(self.coeffs, (xq - self.mid) / self.scale)

    def __call__(self, xq):
        # tangent-line continuation outside the support; clamping would hand
        # an uncovered vertex its neighbour's line
        xq = np.asarray(xq, float)
        xc = np.clip(xq, self.lo, self.hi)
        out = self._inside(xc)
        if self.hi == self.lo:
            return out
        h = min(1.0, self.hi - self.lo)
        lo_slope = (self._inside(self.lo + h) - self._inside(self.lo)) / h
        hi_slope = (self._inside(self.hi) - self._inside(self.hi - h)) / h
        return out + np.where(xq < self.lo, lo_slope * (xq - self.lo), 0.0) \
            + np.where(xq > self.hi, hi_slope * (xq - self.hi), 0.0)


def beta_path(pair: TrajectoryPair, pencil_step_deg: float = 1.0, zero_threshold_deg: float = 2.0,
              degree: Optional[int] = 5, link_tol_deg: float = 10.0,
              min_support: float = 0.3) -> BetaPath:
    """Equal-angle line per t1 vertex, regressed along the trajectory.

    For every t1 vertex the pencil roots give candidate lines (bisection
    brings them far below ``zero_threshold_deg``).  Neighbouring candidates
    whose angles differ by at most ``link_tol_deg`` are linked and the
    component covering most vertices seeds a Tukey-weighted polynomial fit
    of the line angle against the vertex index; each round re-picks, per
    vertex, the candidate nearest the fit.  Vertices with zero weight are
    outliers and left out of ``support``.  ``degree=None`` interpolates the
    selected raw angles instead.  beta is the line angle relative to the t1
    normal.  Raises when the support covers less than ``min_support`` of the
    vertices.
    """
    if pencil_step_deg <= 0 or abs(180.0 / pencil_step_deg - round(180.0 / pencil_step_deg)) > 1e-9:
        raise InitialGuessError("beta_path", "pencil step must divide 180 degrees")
    t1, t2 = pair.t1, pair.t2
    nv2 = _t2_vertex_normals(t2)
    N = len(t1) - 1
    vi, vphi = [], []
    cells = 0
    for i in range(N):
        roots, below = _roots_at_vertex(t1[i], pair.n1[i], t2, nv2, pencil_step_deg)
        cells += below
        vi += [i] * len(roots)
        vphi += roots
    if not vi:
        raise InitialGuessError("beta_path", "no line meets both trajectories under equal angles")
    vi, vphi = np.array(vi), np.array(vphi)
    parent = np.arange(len(vi))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(len(vi)):
        nxt = np.nonzero((vi == vi[a] + 1) & (np.abs(_wrap90(vphi - vphi[a])) <= link_tol_deg))[0]
        for b in nxt:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[rb] = ra
    roots = np.array([find(a) for a in range(len(vi))])
    comps = np.unique(roots)
    best = max(comps, key=lambda r: len(np.unique(vi[roots == r])))
    comp = np.nonzero(roots == best)[0]
    # seed: one angle per vertex of the component, unwrapped along i
    seed_x, seed_phi = [], []
    for i in np.unique(vi[comp]):
        cand = vphi[comp][vi[comp] == i]
        ref = seed_phi[-1] if seed_phi else cand[0]
        c = _near_mod180(cand, ref)
        seed_x.append(i)
        seed_phi.append(float(c[np.argmin(np.abs(c - ref))]))
    fit = _AnglePoly(np.array(seed_x, float), np.array(seed_phi), degree if degree is not None else 5)
    xs = np.arange(N, dtype=float)
    sel_phi = np.full(N, np.nan)
    weights = np.zeros(N)
    for _ in range(12):
        pred = fit(xs)
        for i in range(N):
            c = vphi[vi == i]
            if len(c) == 0:
                sel_phi[i] = np.nan
                continue
            c = _near_mod180(c, pred[i])
            sel_phi[i] = c[np.argmin(np.abs(c - pred[i]))]
        have = np.isfinite(sel_phi)
        r = sel_phi[have] - pred[have]
        scale = max(1.4826 * np.median(np.abs(r)), 0.25)
        u = r / (4.685 * scale)
        w = np.where(np.abs(u) < 1, (1 - u**2) ** 2, 0.0)
        weights[:] = 0.0
        weights[have] = w
        keep = weights > 0
        if keep.sum() < 2:
            break
        fit = _AnglePoly(xs[keep], sel_phi[keep], degree if degree is not None else 5, weights[keep])
    support = np.nonzero(weights > 0)[0]
    if len(support) < max(2, min_support * N):
        raise InitialGuessError("beta_path", f"equal-angle lines found at only {len(support)} of {N} "
                                "trajectory vertices")
    if degree is None:
        fit = _AnglePoly(xs[support], sel_phi[support], None)
    phi = fit(xs)
    lim = 90.0 - 1e-6
    betas = np.radians(np.clip(_wrap90(phi - _ang(pair.n1)), -lim, lim))
    raw = np.radians(_wrap90(sel_phi[support] - _ang(pair.n1[support])))
    gaps = [int(i) for i in range(support[0], support[-1] + 1) if weights[i] == 0]
    term = None
    if support[-1] == N - 1:
        roots_t, _ = _roots_at_vertex(t1[N], pair.n1[N - 1], t2, nv2, pencil_step_deg)
        if roots_t:
            ext = fit(N - 1) if degree is None else np.polyval(fit.coeffs, (N - fit.mid) / fit.scale)
            c = _near_mod180(roots_t, ext)
            pick = c[np.argmin(np.abs(c - ext))]
            if abs(pick - ext) <= link_tol_deg:
                term = float(pick)
    term_beta = None if term is None else float(np.radians(np.clip(_wrap90(term - _ang(pair.n1[N - 1])),
                                                                    -lim, lim)))
    return BetaPath(betas, None if fit.raw else fit.coeffs, fit.degree, support, raw, gaps, term_beta,
                    cells, len(comps) - 1, weights, fit, term)


def zero_beta_path(pair: TrajectoryPair, degree: Optional[int] = 5) -> BetaPath:
    """Fallback path with the profile planes along smoothed t1 normals (beta = 0 up to smoothing)."""
    N = len(pair.t1) - 1
    xs = np.arange(N, dtype=float)
    phi = np.degrees(np.unwrap(np.radians(_ang(pair.n1)), period=np.pi))
    fit = _AnglePoly(xs, phi, degree)
    betas = np.radians(_wrap90(fit(xs) - _ang(pair.n1)))
    return BetaPath(betas, None if fit.raw else fit.coeffs, fit.degree, np.arange(N), np.zeros(N), [],
                    None, 0, 0, np.ones(N), fit, None, True)


# --- directrix, scalings, signs, planes --------------------------------------

def _rot(v, ang):
    c, s = np.cos(ang), np.sin(ang)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def _intersect_lines(p1, d1, p2, d2, sin_tol=1e-4):
    """Intersection of p1 + r d1 and p2 + s d2 (unit directions); None if near parallel."""
    cr = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(cr) < sin_tol:
        return None
    w = p2 - p1
    r = (w[0] * d2[1] - w[1] * d2[0]) / cr
    return p1 + r * d1


def directrix_from_normals(t1, betas, normals=None, sin_tol: float = 1e-4):
    """Intersections of consecutive beta-rotated normal lines.

    ``normals`` default to the edge normals of ``t1``; len(betas) lines give
    len(betas) - 1 vertices.  Returns (vertices, skipped) where near-parallel
    pairs are NaN rows with skipped = True.  Raises when every pair is near
    parallel: the directrix degenerates (axial limit at infinity).
    """
    t1 = np.asarray(t1, float)
    b = np.asarray(betas, float)
    nrm = edge_normals(t1) if normals is None else np.asarray(normals, float)
    nb = _rot(nrm[:len(b)], b)
    out = np.full((max(len(b) - 1, 0), 2), np.nan)
    skipped = np.zeros(len(out), bool)
    for i in range(len(out)):
        g = _intersect_lines(t1[i], nb[i], t1[i + 1], nb[i + 1], sin_tol)
        if g is None:
            skipped[i] = True
        else:
            out[i] = g
    if len(out) and skipped.all():
        raise InitialGuessError("directrix", "all consecutive rotated normals are near parallel")
    return out, skipped


def scaling_factors(t1, directrix) -> np.ndarray:
    """eta_0 = 1, eta_i = |t1(i) - d(i-1)| / |t1(i-1) - d(i-1)|."""
    t1 = np.asarray(t1, float)
    d = np.asarray(directrix, float).reshape(-1, 2)
    eta = np.ones(len(d) + 1)
    for i in range(1, len(d) + 1):
        den = np.linalg.norm(t1[i - 1] - d[i - 1])
        if den == 0:
            raise InitialGuessError("scalings", f"trajectory vertex {i - 1} sits on its directrix point")
        eta[i] = np.linalg.norm(t1[i] - d[i - 1]) / den
    return eta


def rotation_signs(t1, directrix, tol: float = 1e-12) -> np.ndarray:
    """sign det(t1(i) - d(i), t1(i+1) - d(i)); 0 marks (near) collinear triples."""
    t1 = np.asarray(t1, float)
    d = np.asarray(directrix, float).reshape(-1, 2)
    u = t1[:len(d)] - d
    v = t1[1:len(d) + 1] - d
    det = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    scale = np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
    return np.where(np.abs(det) <= tol * np.maximum(scale, 1e-300), 0, np.sign(det)).astype(int)


def profile_planes(t1, betas, axis=(0.0, 0.0, 1.0), height: float = 0.0, normals=None) -> list[Plane]:
    """Vertical planes through t1(j) with normals axis x n_beta(j).

    ``t1`` is given in the plane orthogonal to ``axis`` (local xy), the
    returned anchors are (x, y, height) in that frame.
    """
    t1 = np.asarray(t1, float)
    b = np.asarray(betas, float)
    nrm = edge_normals(t1) if normals is None else np.asarray(normals, float)
    nb = _rot(nrm[:len(b)], b)
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    out = []
    for j in range(len(b)):
        nv = np.cross(a, [nb[j, 0], nb[j, 1], 0.0])
        nv -= a * (a @ nv)
        out.append(Plane(np.array([t1[j, 0], t1[j, 1], height]), nv / np.linalg.norm(nv)))
    return out


def _cluster_components(pts, gap_factor=4.0, min_gap=0.0):
    adj = euclidean_mst(pts).tocoo()
    if adj.nnz == 0:
        return np.zeros(len(pts), int), 1
    lim = max(gap_factor * float(np.median(adj.data)), min_gap)
    keep = adj.data <= lim
    g = coo_matrix((adj.data[keep], (adj.row[keep], adj.col[keep])), shape=adj.shape)
    ncomp, lab = connected_components(g, directed=False)
    return lab, ncomp


def extract_profile(local_points, plane: Plane, eps: float, anchor=None,
                    max_vertices: int = 120, min_points: int = 8) -> ProfileResult:
    """Ordered polyline (bottom to top) lying exactly in a vertical ``plane``.

    Slab points are split into clusters by cutting long EMST edges; the cluster
    nearest to ``anchor`` (or the largest) is ordered along the EMST path
    between its highest and lowest point.  More than one sizeable cluster sets
    ``ambiguous``.
    """
    P = np.asarray(local_points, float)
    dist = plane.signed_distance(P)
    slab = P[np.abs(dist) <= eps]
    if len(slab) < min_points:
        raise InitialGuessError("profile", f"only {len(slab)} points within eps={eps:.3g} of the "
                                f"profile plane; try eps={2 * eps:.3g}")
    nz = plane.normal
    u = np.array([-nz[1], nz[0], 0.0])
    u /= np.linalg.norm(u)
    rz = np.stack([(slab - plane.anchor) @ u, slab[:, 2]], axis=1)
    lab, ncomp = _cluster_components(rz, min_gap=2.0 * eps)
    sizes = np.bincount(lab)
    if anchor is not None:
        a = np.asarray(anchor, float)
        ar = np.array([(a - plane.anchor) @ u, a[2]])
        c = lab[np.argmin(np.sum((rz - ar) ** 2, axis=1))]
    else:
        c = int(np.argmax(sizes))
    ambiguous = int(np.sum(sizes >= min_points)) > 1
    comp = rz[lab == c]
    if len(comp) < 3:
        raise InitialGuessError("profile", "profile cluster has fewer than 3 points")
    noisy = _thickness(comp) > 0.15
    work = thin_curve_samples(comp) if noisy else comp
    top, bot = int(np.argmax(work[:, 1])), int(np.argmin(work[:, 1]))
    if top == bot:
        raise InitialGuessError("profile", "profile cluster has no height extent")
    path = emst_path_indices(work, bot, top)
    s, _ = _project_to_polyline(work, work[path])
    poly = work[np.argsort(s, kind="stable")]
    poly[0], poly[-1] = work[bot], work[top]
    poly = _bin_average(poly, max_vertices) if noisy or len(poly) > max_vertices else poly
    span = float(np.max(np.ptp(poly, axis=0))) or 1.0
    poly = _dedupe(poly, 1e-9 * span)
    xyz = plane.anchor[None, :] * [1, 1, 0] + poly[:, :1] * u + poly[:, 1:2] * [0, 0, 1]
    return ProfileResult(xyz, ambiguous, int(ncomp))


# --- assembly ----------------------------------------------------------------

def _cx(v):
    v = np.asarray(v, float)
    return v[..., 0] + 1j * v[..., 1]


def _at_index(poly, x):
    """Point of ``poly`` at fractional vertex index x (piecewise linear)."""
    x = np.clip(np.asarray(x, float), 0.0, len(poly) - 1.0)
    i = np.minimum(np.floor(x).astype(int), len(poly) - 2)
    f = (x - i)[..., None]
    return (1 - f) * poly[i] + f * poly[i + 1]


def initial_guess_candidates(cloud, axis, config: Optional[InitialGuessConfig] = None) -> list:
    """One initial T-hedron per beta model (beta-path and/or beta = 0).

    Columns sit at n+1 equally spaced (fractional) t1 indices across the
    beta-path support, so the mesh resolution does not depend on the number
    of trajectory vertices.  Cloud normals (estimated when absent) drive the
    slope-corrected slicing.  Each candidate carries ``report["model_score"]``
    from :func:`symmetric_fit_score`; the list is sorted by it.
    """
    cfg = config or InitialGuessConfig()
    cfg.validate()
    if isinstance(cloud, PointCloud):
        pc = cloud
    else:
        pc = PointCloud(np.asarray(cloud, float))
    if pc.normals is None and cfg.slope_correction:
        pc = auto_normals(pc)
    pts = pc.points
    frame = AxisFrame.from_axis(axis, pts)
    P = frame.to_local(pts)
    normals = None
    if cfg.slope_correction and pc.normals is not None:
        normals = pc.normals @ frame.rotation.T
        normals[pc.normal_flags] = (0.0, 0.0, 1.0)
    pair = extract_trajectories(P, cfg, normals)
    paths = []
    path_note = None
    try:
        if cfg.beta_model == "zero":
            raise InitialGuessError("beta_path", "beta = 0 model requested")
        paths.append(beta_path(pair, cfg.pencil_step_deg, cfg.zero_threshold_deg,
                               cfg.beta_regression_degree, cfg.link_tol_deg))
    except InitialGuessError as exc:
        if not cfg.beta_fallback and cfg.beta_model != "zero":
            raise
        path_note = str(exc)
    if cfg.beta_model == "zero" or (cfg.beta_fallback and cfg.beta_model == "auto") or not paths:
        paths.append(zero_beta_path(pair, cfg.beta_regression_degree))
    built, errors = [], []
    for path in paths:
        try:
            ig = _assemble(P, pair, path, cfg, frame)
        except (InitialGuessError, CurveError) as exc:
            errors.append(str(exc))
            continue
        ig.report.update(beta_error=path_note, model_score=symmetric_fit_score(ig.local.vertices, P),
                         beta_model="zero" if path.fallback else "beta_path")
        ig.thedron.report.update(ig.report)
        ig.local.report.update(ig.report)
        built.append(ig)
    if not built:
        raise InitialGuessError("assembly", "; ".join(errors))
    built.sort(key=lambda ig: ig.report["model_score"])
    return built


def build_initial_guess(cloud, axis, config: Optional[InitialGuessConfig] = None) -> InitialGuess:
    """Phase-1 T-hedron with (m+1) x (n+1) vertices.

    With ``beta_fallback`` the mesh built from the beta-path competes with
    the beta = 0 mesh; the one that fits the cloud better in both directions
    (vertices to cloud, cloud to vertices) wins.
    """
    return initial_guess_candidates(cloud, axis, config)[0]


def symmetric_fit_score(V, P, sample: int = 4000, seed: int = 0) -> float:
    """RMS vertex-to-cloud distance plus RMS cloud-to-vertex distance.

    The second term punishes meshes that cover only part of the cloud.
    """
    V = np.asarray(V, float).reshape(-1, 3)
    d1, _ = cKDTree(P).query(V)
    rng = np.random.default_rng(seed)
    sub = P if len(P) <= sample else P[rng.choice(len(P), sample, replace=False)]
    d2, _ = cKDTree(V).query(sub)
    return float(np.sqrt(np.mean(d1**2)) + np.sqrt(np.mean(d2**2)))


def _assemble(P, pair, path, cfg, frame) -> InitialGuess:
    diag = bbox_diagonal(P)
    t1 = pair.t1
    xs = np.linspace(float(path.support[0]), path.last_index, cfg.n + 1)
    base_pts = _at_index(t1, xs)
    phi = np.radians(path.line_angle(xs))
    dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    anchors, skipped = [], []
    for k in range(len(xs) - 1):
        g = _intersect_lines(base_pts[k], dirs[k], base_pts[k + 1], dirs[k + 1], 1e-6)
        skipped.append(g is None)
        anchors.append(np.full(2, np.nan) if g is None else g)
    anchors = np.array(anchors)
    skipped = np.array(skipped)
    good = ~skipped
    axial = False
    if good.sum() >= max(2, int(np.ceil(0.9 * len(good)))):
        ctr = anchors[good].mean(axis=0)
        if np.max(np.linalg.norm(anchors[good] - ctr, axis=1)) <= 0.01 * diag:
            axial = True
            anchors[good] = ctr
    # complex affine maps column k-1 -> column k
    w = _cx(base_pts)
    alphas = np.ones(len(xs), complex)
    shifts = np.zeros(len(xs), complex)
    for k in range(1, len(xs)):
        if skipped[k - 1]:
            shifts[k] = w[k] - w[k - 1]
        else:
            g = _cx(anchors[k - 1])
            alphas[k] = (w[k] - g) / (w[k - 1] - g)
            shifts[k] = g * (1 - alphas[k])
    A = np.cumprod(alphas)
    B = np.zeros(len(xs), complex)
    for k in range(1, len(xs)):
        B[k] = alphas[k] * B[k - 1] + shifts[k]
    eps = pair.reports["eps"]
    planes = _planes_for(base_pts, dirs, pair.h1)
    m1 = cfg.m + 1
    base = extract_profile(P, planes[0], eps, np.r_[base_pts[0], pair.h1], cfg.profile_vertices)
    profiles = [resample_polyline(base.polyline, m1)]
    if cfg.superposition and len(xs) > 2:
        zlo, zhi = base.polyline[:, 2].min(), base.polyline[:, 2].max()
        tol = 0.1 * max(zhi - zlo, 1e-12)
        for k in range(1, len(xs)):
            try:
                pr = extract_profile(P, planes[k], eps, np.r_[base_pts[k], pair.h1], cfg.profile_vertices)
            except (InitialGuessError, CurveError):
                continue
            z = pr.polyline[:, 2]
            if abs(z.min() - zlo) > tol or abs(z.max() - zhi) > tol:
                continue
            back = (_cx(pr.polyline) - B[k]) / A[k]
            profiles.append(resample_polyline(np.stack([back.real, back.imag, z], axis=1), m1))
    prof = planes[0].project(np.mean(profiles, axis=0))
    w0 = _cx(prof)
    V = np.empty((m1, len(xs), 3))
    for k in range(len(xs)):
        wk = A[k] * w0 + B[k]
        V[:, k, 0], V[:, k, 1] = wk.real, wk.imag
    V[:, :, 2] = prof[:, 2:3]
    etas = np.abs(alphas)
    thetas = np.angle(alphas)
    rep = {"column_positions": xs.tolist(), "axial": axial, "skipped_pairs": int(skipped.sum()),
           "profile_ambiguous": base.ambiguous, "profiles_averaged": len(profiles),
           "beta_fallback": path.fallback, "beta_gaps": path.gaps,
           "beta_support": [int(path.support[0]), int(path.support[-1])], "beta_vertices": len(path.support),
           "h1": pair.h1, "h2": pair.h2, "trajectories": pair.reports}
    local = THedron(V, etas=etas, thetas=thetas, report=dict(rep))
    world = THedron(frame.to_world(V.reshape(-1, 3)).reshape(V.shape), etas=etas, thetas=thetas,
                    report=dict(rep))
    return InitialGuess(world, local, frame, pair, path, xs, anchors, alphas, axial, rep)


def _planes_for(points2, nb, h):
    out = []
    for p, d in zip(points2, nb):
        nv = np.array([-d[1], d[0], 0.0])
        out.append(Plane(np.array([p[0], p[1], h]), nv / np.linalg.norm(nv)))
    return out


# --- layered clouds (vertex sets of T-hedra) --------------------------------

@dataclass
class LayerStructure:
    """Horizontal layers of a cloud along ``axis``: ``labels`` per point,
    ``heights`` per layer (ascending), ``counts`` per layer."""

    axis: np.ndarray
    labels: np.ndarray
    heights: np.ndarray
    counts: np.ndarray


def layer_axis(points, k: int = 12, tol: float = 1e-6, max_points: int = 4000, seed: int = 0,
               max_candidates: int = 100):
    """Candidate normals of planar point rows, most supported first.

    Every pair of neighbour offsets spans a plane; three samples from one
    planar row span that row's plane.  Candidate normals are the modes of
    the pair normals (agreement within ``tol`` rad), merged when closer than
    1e-3 rad.  Returns a list of (axis, support fraction).
    """
    pts = np.asarray(points, float)
    rng = np.random.default_rng(seed)
    sel = pts if len(pts) <= max_points else pts[rng.choice(len(pts), max_points, replace=False)]
    kk = min(k, len(pts) - 1)
    if kk < 2:
        return []
    _, nb = cKDTree(pts).query(sel, k=kk + 1)
    off = pts[nb[:, 1:]] - sel[:, None, :]
    ii, jj = np.triu_indices(kk, 1)
    cr = np.cross(off[:, ii], off[:, jj]).reshape(-1, 3)
    lens = np.linalg.norm(off, axis=2)
    scale = (lens[:, ii] * lens[:, jj]).ravel()
    ok = np.linalg.norm(cr, axis=1) > 1e-3 * scale
    if ok.sum() < 3:
        return []
    dirs = cr[ok] / np.linalg.norm(cr[ok], axis=1, keepdims=True)
    cand = dirs if len(dirs) <= 1500 else dirs[rng.choice(len(dirs), 1500, replace=False)]
    thr = 0.5 * tol**2
    count = np.zeros(len(cand), int)
    for lo in range(0, len(dirs), 8192):
        count += (1.0 - np.abs(dirs[lo:lo + 8192] @ cand.T) <= thr).sum(axis=0)
    out = []
    for c in np.argsort(-count, kind="stable"):
        if count[c] < 3 or len(out) == max_candidates:
            break
        if any(1.0 - abs(cand[c] @ a) <= 0.5e-6 for a, _ in out):
            continue
        inl = dirs[1.0 - np.abs(dirs @ cand[c]) <= thr]
        inl = inl * np.sign(inl @ cand[c])[:, None]
        a = inl.mean(axis=0)
        out.append((a / np.linalg.norm(a), float(count[c]) / len(dirs)))
    return out


def find_layers(points, **kwargs):
    """LayerStructure along the first candidate of :func:`layer_axis` that
    splits the cloud into parallel layers, or None."""
    for a, _ in layer_axis(points, **kwargs):
        layers = detect_layers(points, a)
        if layers is not None:
            return layers
    return None


def detect_layers(points, axis, rel_tol: float = 1e-7, min_layers: int = 3, min_count: int = 3):
    """Group points into planes orthogonal to ``axis`` when they all lie in
    a few such planes (spread below ``rel_tol`` * diag, gaps far larger).
    Returns a LayerStructure or None."""
    pts = np.asarray(points, float)
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    h = pts @ a
    diag = bbox_diagonal(pts)
    order = np.argsort(h)
    gaps = np.diff(h[order])
    tol = rel_tol * diag
    cut = gaps > tol
    nlayers = int(cut.sum()) + 1
    if nlayers < min_layers or nlayers > len(pts) // min_count:
        return None
    if np.min(gaps[cut]) < 1e3 * max(np.max(gaps[~cut], initial=0.0), 1e-12 * diag):
        return None
    lab_sorted = np.r_[0, np.cumsum(cut)]
    labels = np.empty(len(pts), int)
    labels[order] = lab_sorted
    counts = np.bincount(labels, minlength=nlayers)
    if counts.min() < min_count:
        return None
    heights = np.array([h[labels == i].mean() for i in range(nlayers)])
    return LayerStructure(a, labels, heights, counts)


def layered_initial_guess(cloud, layers: LayerStructure, config: Optional[InitialGuessConfig] = None
                          ) -> InitialGuess:
    """T-hedron read directly off a layered cloud.

    Each layer is one trajectory row.  Rows are ordered along their MST
    diameter and oriented so that corresponding edges of all rows point the
    same way (trapezoid faces have parallel trajectory edges).  The mesh has
    one row per layer and one column per point of a layer, so the requested
    resolution must match.
    """
    cfg = config or InitialGuessConfig()
    pts = _points(cloud)
    K = len(layers.heights)
    counts = set(layers.counts.tolist())
    if len(counts) != 1:
        raise InitialGuessError("layers", f"layers hold different point counts {sorted(counts)}; "
                                "not the vertex set of a grid")
    N = counts.pop()
    if (cfg.m + 1, cfg.n + 1) != (K, N):
        raise InitialGuessError("layers", f"cloud is a layered {K} x {N} grid; rerun with "
                                f"-m {K - 1} -n {N - 1}")
    frame = AxisFrame.from_axis(layers.axis, pts)
    P = frame.to_local(pts)
    rows = []
    for i in range(K):
        Q = P[layers.labels == i]
        try:
            Q = Q[curve_order(Q[:, :2])]
        except CurveError as exc:
            raise InitialGuessError("layers", f"row {i} cannot be ordered: {exc}") from exc
        rows.append(Q)
    e0 = np.diff(rows[0][:, :2], axis=0)
    for i in range(1, K):
        ei = np.diff(rows[i][:, :2], axis=0)
        if np.sum(e0 * ei) < 0:
            rows[i] = rows[i][::-1]
    V = np.stack(rows)
    V[:, :, 2] = (layers.heights - frame.origin @ frame.rotation[2])[:, None]
    local = THedron(V, report={"layered": True})
    world = THedron(frame.to_world(V.reshape(-1, 3)).reshape(V.shape), report={"layered": True})
    rep = {"layered": True, "layers": K, "points_per_layer": N,
           "max_trapezoid_residual": local.max_trapezoid_residual()}
    return InitialGuess(world, local, frame, None, None, np.arange(N, dtype=float), np.zeros((0, 2)),
                        np.ones(N, complex), False, rep)
