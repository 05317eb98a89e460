"""Planar curve toolkit: beta-evolutes, beta-involutes and polyline utilities.

A beta-evolute is the envelope of the curve normals rotated by a (possibly
varying) angle beta(t); a beta-involute is the inverse construction.  The
module also carries the discrete tools used to turn slices of a point cloud
into ordered, fair polylines: curvature signs, variational smoothing (VPO),
MST-based ordering of unorganized samples.

Curves are sampled; derivatives are second-order finite differences in the
curve parameter and integrals are cumulative trapezoids on the same grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.integrate import cumulative_trapezoid
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

__all__ = [
    "CurveError",
    "SampledCurve2",
    "CurveFrames",
    "SingularityReport",
    "SignReport",
    "rot2",
    "curvature_and_frames",
    "beta_evolute",
    "beta_involute",
    "involute_ode_residual",
    "evolute_singular_params",
    "discrete_curvature_signs",
    "chord_reference",
    "sign_runs",
    "vpo_smooth",
    "vpo_denoise",
    "enforce_sign_consistency",
    "euclidean_mst",
    "emst_path",
    "emst_path_indices",
    "curve_order",
    "order_curve_points",
]

# |kappa + beta'| below this (times 1 + |kappa|) marks an evolute sample singular
SINGULAR_TOL = 1e-8


class CurveError(ValueError):
    """Invalid curve input or a curve operation that cannot succeed."""


@dataclass(frozen=True)
class SampledCurve2:
    """Planar curve samples c(t_i).  ``closed`` curves are periodic with uniform t."""

    vertices: np.ndarray
    t: np.ndarray
    closed: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, float)
        t = np.asarray(self.t, float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise CurveError("vertices must be (N, 2)")
        if len(v) < 3:
            raise CurveError("a sampled curve needs at least 3 vertices")
        if t.shape != (len(v),):
            raise CurveError("one parameter value per vertex is required")
        if np.any(np.diff(t) <= 0):
            raise CurveError("parameters must be strictly increasing")
        if np.any(np.linalg.norm(np.diff(v, axis=0), axis=1) == 0):
            raise CurveError("consecutive vertices must be distinct")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "t", t)

    def __len__(self):
        return len(self.t)


@dataclass(frozen=True)
class CurveFrames:
    """Per-sample differential data.

    ``kappa`` is the signed curvature, ``speed`` = |c'(t)| and
    ``turning`` = kappa * speed is the derivative of the tangent angle with
    respect to t.  ``normal`` is the tangent rotated by +90 degrees.
    """

    kappa: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    speed: np.ndarray
    d1: np.ndarray
    d2: np.ndarray

    @property
    def turning(self) -> np.ndarray:
        return self.kappa * self.speed


@dataclass
class SingularityReport:
    params: list
    identically_singular: bool = False
    residual: Optional[np.ndarray] = None


@dataclass
class SignReport:
    doublings: int
    w2: float
    consistent: bool
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))


def rot2(angle) -> np.ndarray:
    """2x2 rotation matrix (or a stack of them for array input)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]]) if np.ndim(angle) == 0 else np.stack(
        [np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _deriv(values: np.ndarray, t: np.ndarray, closed: bool) -> np.ndarray:
    if not closed:
        return np.gradient(values, t, axis=0, edge_order=2)
    h = t[1] - t[0]
    return (np.roll(values, -1, axis=0) - np.roll(values, 1, axis=0)) / (2 * h)


def _beta_samples(beta, n) -> np.ndarray:
    b = np.broadcast_to(np.asarray(beta, float), (n,)).copy()
    if np.any(np.abs(b) >= np.pi / 2):
        raise CurveError("beta samples must lie strictly inside (-pi/2, pi/2)")
    return b


def curvature_and_frames(curve: SampledCurve2) -> CurveFrames:
    """Signed curvature and Frenet frames from finite differences."""
    if len(curve) < 3:
        raise CurveError("curvature needs at least 3 samples")
    c1 = _deriv(curve.vertices, curve.t, curve.closed)
    c2 = _deriv(c1, curve.t, curve.closed)
    speed = np.linalg.norm(c1, axis=1)
    if np.any(speed == 0):
        raise CurveError("curve is not regular")
    tangent = c1 / speed[:, None]
    normal = tangent @ rot2(np.pi / 2).T
    kappa = (c1[:, 0] * c2[:, 1] - c1[:, 1] * c2[:, 0]) / speed**3
    return CurveFrames(kappa, tangent, normal, speed, c1, c2)


def beta_evolute(curve: SampledCurve2, beta) -> tuple[np.ndarray, np.ndarray]:
    """Evolute vertices c + cos(b)/(k + b_s) R(b) n for every regular sample.

    Returns ``(points, singular_indices)``; ``points`` holds only the
    nonsingular samples, in order.
    """
    fr = curvature_and_frames(curve)
    b = _beta_samples(beta, len(curve))
    b_s = _deriv(b, curve.t, curve.closed) / fr.speed
    denom = fr.kappa + b_s
    singular = np.abs(denom) < SINGULAR_TOL * (1 + np.abs(fr.kappa))
    ok = ~singular
    rn = np.einsum("nij,nj->ni", rot2(b[ok]), fr.normal[ok])
    pts = curve.vertices[ok] + (np.cos(b[ok]) / denom[ok])[:, None] * rn
    return pts, np.nonzero(singular)[0]


def _involute_lambda(curve: SampledCurve2, b: np.ndarray, d: float, fr: CurveFrames):
    xi = np.exp(cumulative_trapezoid(fr.turning * np.tan(b), curve.t, initial=0.0))
    lam = xi * (cumulative_trapezoid(fr.speed / xi, curve.t, initial=0.0) + d)
    return lam, xi


def beta_involute(curve: SampledCurve2, beta, d: float) -> np.ndarray:
    """Vertices of the beta-involute with integration constant ``d``."""
    fr = curvature_and_frames(curve)
    b = _beta_samples(beta, len(curve))
    lam, _ = _involute_lambda(curve, b, d, fr)
    return curve.vertices - lam[:, None] * fr.tangent


def involute_ode_residual(curve: SampledCurve2, beta, involute: np.ndarray) -> np.ndarray:
    """lambda' - lambda * turning * tan(beta) - |c'| with lambda read off the involute."""
    fr = curvature_and_frames(curve)
    b = _beta_samples(beta, len(curve))
    lam = np.sum((curve.vertices - np.asarray(involute, float)) * fr.tangent, axis=1)
    lam_t = np.gradient(lam, curve.t, edge_order=2)
    return lam_t - lam * fr.turning * np.tan(b) - fr.speed


def evolute_singular_params(curve: SampledCurve2, beta, rel_tol: float = 1e-5) -> SingularityReport:
    """Parameters where the beta-evolute has a singular point.

    A sample is singular when d/ds[cos b / (k + b_s)] = sin b.  We bracket sign
    changes of that condition multiplied by (k + b_s)^2, which removes the
    poles of the evolute radius:

        g = -sin b * b_s (k + b_s) - cos b (k_s + b_ss) - sin b (k + b_s)^2

    If g vanishes on the whole grid (circle with b = 0, or the closed-form
    family k = cos b / (s sin b + C cos b)) every point is singular; the
    report then carries ``identically_singular`` and no isolated roots.
    """
    fr = curvature_and_frames(curve)
    b = _beta_samples(beta, len(curve))
    t, cl = curve.t, curve.closed
    b_s = _deriv(b, t, cl) / fr.speed
    b_ss = _deriv(b_s, t, cl) / fr.speed
    k_s = _deriv(fr.kappa, t, cl) / fr.speed
    sb, cb = np.sin(b), np.cos(b)
    s = fr.kappa + b_s
    g = -sb * b_s * s - cb * (k_s + b_ss) - sb * s**2
    # on open curves the outer samples carry three nested one-sided stencils
    trim = 0 if cl or len(t) < 12 else 3
    inner = slice(trim, len(t) - trim)
    scale = 1.0 + np.max(fr.kappa[inner] ** 2) + np.max(np.abs(k_s[inner]))
    if np.max(np.abs(g[inner])) < rel_tol * scale:
        return SingularityReport([], True, g)
    gg = np.append(g, g[0]) if cl else g[inner]
    tt = np.append(t, t[-1] + (t[1] - t[0])) if cl else t[inner]
    roots = []
    for i in range(len(gg) - 1):
        g0, g1 = gg[i], gg[i + 1]
        if g0 == 0.0 and (i == 0 or gg[i - 1] * g1 < 0):
            roots.append(float(tt[i]))
        elif g0 * g1 < 0:
            roots.append(float(tt[i] - g0 * (tt[i + 1] - tt[i]) / (g1 - g0)))
    return SingularityReport(roots, False, g)


# --- discrete polylines -----------------------------------------------------

def chord_reference(poly: np.ndarray) -> np.ndarray:
    """Reference direction for curvature signs: the chord rotated by -90 deg.

    With this reference the edge angles of an arc that turns less than a half
    turn stay inside (0, pi), so the sign equals the turning direction.
    """
    c = poly[-1] - poly[0]
    n = np.linalg.norm(c)
    if n == 0:
        c = poly[1] - poly[0]
        n = np.linalg.norm(c)
    return np.array([c[1], -c[0]]) / n


def discrete_curvature_signs(poly, reference=(1.0, 0.0), tol: float = 1e-12) -> np.ndarray:
    """Sign of theta_i - theta_{i-1} for each interior vertex.

    theta_i is the unsigned angle between edge i and ``reference``.  The
    result has ``len(poly) - 2`` entries (endpoints carry no sign).
    """
    p = np.asarray(poly, float)
    if len(p) < 3:
        raise CurveError("curvature signs need at least 3 vertices")
    e = np.diff(p, axis=0)
    ln = np.linalg.norm(e, axis=1)
    if np.any(ln == 0):
        raise CurveError("polyline has a zero-length edge")
    r = np.asarray(reference, float)
    r = r / np.linalg.norm(r)
    theta = np.arccos(np.clip(e @ r / ln, -1.0, 1.0))
    dth = np.diff(theta)
    out = np.sign(dth).astype(int)
    out[np.abs(dth) <= tol] = 0
    return out


def sign_runs(signs: np.ndarray, window: Optional[int] = None, min_run: int = 3) -> np.ndarray:
    """Group labels for a sign sequence: windowed majority, short runs merged.

    Zeros abstain from the vote.  Runs shorter than ``min_run`` are absorbed
    by the longer neighbouring run.
    """
    s = np.asarray(signs, int)
    n = len(s)
    if n == 0:
        return s.copy()
    if window is None:
        window = max(5, (n // 10) | 1)
    window = int(window) | 1
    if window > n:
        window = n if n % 2 else max(1, n - 1)
    half = window // 2
    pad = np.pad(s.astype(float), half, mode="edge")
    votes = np.convolve(pad, np.ones(window), mode="valid")[:n]
    labels = np.sign(votes).astype(int)
    # ties: inherit the previous decided label (or the next one)
    for i in range(n):
        if labels[i] == 0:
            labels[i] = labels[i - 1] if i > 0 else 0
    for i in range(n - 2, -1, -1):
        if labels[i] == 0:
            labels[i] = labels[i + 1]
    if np.all(labels == 0):
        return labels
    changed = True
    while changed:
        changed = False
        starts = np.r_[0, np.nonzero(np.diff(labels))[0] + 1]
        ends = np.r_[starts[1:], n]
        if len(starts) <= 1:
            break
        lengths = ends - starts
        k = int(np.argmin(lengths))
        if lengths[k] >= min_run:
            break
        left = lengths[k - 1] if k > 0 else -1
        right = lengths[k + 1] if k + 1 < len(starts) else -1
        donor = starts[k - 1] if left >= right else starts[k + 1]
        labels[starts[k]:ends[k]] = labels[donor]
        changed = True
    return labels


def vpo_smooth(poly, w1: float, w2: float, fix_endpoints: bool = True,
               fidelity: float = 1.0) -> np.ndarray:
    """Variational path optimization.

    Minimizes  fidelity * sum|c_i - p_i|^2 + w1 * E + w2 * B  with
    E = sum|c_i - c_{i-1}|^2 and B = sum|c_{i+1} - 2c_i + c_{i-1}|^2,
    optionally keeping the endpoints fixed.  Works in any dimension.
    """
    p = np.asarray(poly, float)
    if w1 < 0 or w2 < 0 or (w1 == 0 and w2 == 0):
        raise CurveError("VPO weights must be non-negative and not both zero")
    n = len(p)
    if n < 3:
        return p.copy()
    d1 = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))
    d2 = sparse.diags([np.ones(n - 2), -2 * np.ones(n - 2), np.ones(n - 2)], [0, 1, 2], shape=(n - 2, n))
    H = (fidelity * sparse.identity(n) + w1 * (d1.T @ d1) + w2 * (d2.T @ d2)).tocsc()
    rhs = fidelity * p
    if not fix_endpoints:
        return np.asarray(spsolve(H, rhs)).reshape(p.shape)
    inner = np.arange(1, n - 1)
    Hii = H[inner][:, inner]
    Hib = H[inner][:, [0, n - 1]]
    rhs_i = rhs[inner] - Hib @ p[[0, n - 1]]
    out = p.copy()
    out[inner] = np.asarray(spsolve(Hii.tocsc(), rhs_i)).reshape(len(inner), -1)
    return out


def vpo_denoise(poly, sigma: Optional[float] = None, iters: int = 60):
    """Bending-only VPO with free ends, weight set by the discrepancy principle.

    ``sigma`` is the per-coordinate noise level; by default it is estimated
    from third differences (variance 20 sigma^2 for white noise, while a
    smooth curve contributes only O(h^3)).  The bending weight is bisected
    (log scale) until the RMS displacement matches sigma * sqrt(dim).
    Returns (smoothed polyline, w2).
    """
    p = np.asarray(poly, float)
    n, dim = p.shape
    if n < 5:
        return p.copy(), 0.0
    if sigma is None:
        d3 = np.diff(p, 3, axis=0)
        sigma = float(np.sqrt(np.mean(d3**2) / 20.0))
    target = sigma * np.sqrt(dim)
    span = float(np.max(np.ptp(p, axis=0))) or 1.0
    if target <= 1e-12 * span:
        return p.copy(), 0.0

    def disp(w2):
        c = vpo_smooth(p, 0.0, w2, fix_endpoints=False)
        return float(np.sqrt(np.mean(np.sum((c - p) ** 2, axis=1)))), c

    lo, hi = -8.0, 8.0
    if disp(10.0**hi)[0] <= target:
        return disp(10.0**hi)[1], 10.0**hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if disp(10.0**mid)[0] < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-3:
            break
    w2 = 10.0**lo
    return disp(w2)[1], w2


def vpo_energy(poly, w1: float, w2: float) -> float:
    p = np.asarray(poly, float)
    return float(w1 * np.sum(np.diff(p, axis=0) ** 2) + w2 * np.sum(np.diff(p, 2, axis=0) ** 2))


def enforce_sign_consistency(poly, w1: float = 0.05, reference=None, window: Optional[int] = None,
                             min_run: int = 3, max_doublings: int = 30):
    """Smooth with growing bending weight until signs agree with their runs.

    Group labels come from the input's signs.  Each attempt smooths the
    original polyline (endpoints fixed) with w2 = w1/10 * 2^k.  Returns the
    polyline and a :class:`SignReport`; a polyline already consistent is
    returned unchanged, and so is one that never becomes consistent
    (``report.consistent`` is then False).
    """
    p = np.asarray(poly, float)
    ref = chord_reference(p) if reference is None else np.asarray(reference, float)
    signs = discrete_curvature_signs(p, ref)
    labels = sign_runs(signs, window, min_run)

    def consistent(s):
        return bool(np.all((s == labels) | (s == 0) | (labels == 0)))

    if consistent(signs):
        return p.copy(), SignReport(0, 0.0, True, labels)
    w2 = w1 / 10.0
    for k in range(max_doublings + 1):
        sm = vpo_smooth(p, w1, w2)
        try:
            s = discrete_curvature_signs(sm, ref)
        except CurveError:
            s = None
        if s is not None and consistent(s):
            return sm, SignReport(k, w2, True, labels)
        if k < max_doublings:
            w2 *= 2.0
    return p.copy(), SignReport(max_doublings, w2, False, labels)


# --- ordering unorganized samples ------------------------------------------

def euclidean_mst(points: np.ndarray, dense_limit: int = 1500) -> sparse.csr_matrix:
    """Symmetric adjacency (with lengths) of the Euclidean MST.

    Small sets use the complete graph.  Larger sets use k-NN graphs with k
    doubled until the graph is connected.
    """
    pts = np.asarray(points, float)
    n = len(pts)
    if n < 2:
        return sparse.csr_matrix((n, n))
    span = float(np.max(np.ptp(pts, axis=0))) or 1.0
    tiny = 1e-300 + 1e-15 * span
    if n <= dense_limit:
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt(np.sum(diff**2, axis=2)) + tiny
        np.fill_diagonal(dist, 0.0)
        mst = minimum_spanning_tree(dist)
    else:
        tree = cKDTree(pts)
        k = 10
        while True:
            kk = min(k + 1, n)
            d, idx = tree.query(pts, k=kk)
            rows = np.repeat(np.arange(n), kk - 1)
            g = sparse.coo_matrix((d[:, 1:].ravel() + tiny, (rows, idx[:, 1:].ravel())), shape=(n, n)).tocsr()
            g = g.maximum(g.T)
            if connected_components(g, directed=False)[0] == 1 or kk == n:
                break
            k *= 2
        mst = minimum_spanning_tree(g)
    mst = mst.tocsr()
    return (mst + mst.T).tocsr()


def _tree_path(adj, a: int, b: int) -> np.ndarray:
    _, pred = breadth_first_order(adj, a, directed=False, return_predecessors=True)
    path = [b]
    while path[-1] != a:
        nxt = pred[path[-1]]
        if nxt < 0:
            raise CurveError("points are not connected")
        path.append(nxt)
    return np.array(path[::-1], int)


def emst_path_indices(points, a_idx: int, b_idx: int) -> np.ndarray:
    """Indices along the EMST path from ``a_idx`` to ``b_idx``."""
    if a_idx == b_idx:
        raise CurveError("path endpoints must differ")
    return _tree_path(euclidean_mst(points), int(a_idx), int(b_idx))


def emst_path(points, a_idx: int, b_idx: int) -> np.ndarray:
    pts = np.asarray(points, float)
    return pts[emst_path_indices(pts, a_idx, b_idx)]


def _farthest(adj, src):
    order, pred = breadth_first_order(adj, src, directed=False, return_predecessors=True)
    dist = np.zeros(adj.shape[0])
    for node in order[1:]:
        dist[node] = dist[pred[node]] + adj[pred[node], node]
    return int(np.argmax(dist))


def _project_to_polyline(pts, path_pts):
    """Arc-length parameter and distance of each point's closest path location."""
    seg_a = path_pts[:-1]
    seg_d = np.diff(path_pts, axis=0)
    seg_len2 = np.maximum(np.sum(seg_d**2, axis=1), 1e-300)
    cum = np.r_[0.0, np.cumsum(np.sqrt(seg_len2))]
    best_s = np.empty(len(pts))
    best_d = np.full(len(pts), np.inf)
    step = max(1, 2_000_000 // max(1, len(seg_a)))
    for lo in range(0, len(pts), step):
        chunk = pts[lo:lo + step]
        rel = chunk[:, None, :] - seg_a[None]
        u = np.clip(np.sum(rel * seg_d[None], axis=2) / seg_len2, 0.0, 1.0)
        foot = seg_a[None] + u[..., None] * seg_d[None]
        dist = np.sum((chunk[:, None, :] - foot) ** 2, axis=2)
        j = np.argmin(dist, axis=1)
        r = np.arange(len(chunk))
        best_d[lo:lo + step] = np.sqrt(dist[r, j])
        best_s[lo:lo + step] = cum[j] + u[r, j] * np.sqrt(seg_len2[j])
    return best_s, best_d


def curve_order(points, blob_ratio: float = 0.5) -> np.ndarray:
    """Permutation ordering unorganized samples of an open curve.

    The endpoints are the two ends of the EMST diameter (maximal graph
    eccentricity); every point is sorted by its arc-length position on the
    tree path between them.  Raises :class:`CurveError` when the samples look
    like a 2D blob (local PCA spread close to isotropic).
    """
    pts = np.asarray(points, float)
    n = len(pts)
    if n < 3:
        raise CurveError("ordering needs at least 3 points")
    if np.all(np.ptp(pts, axis=0) == 0):
        raise CurveError("all points coincide")
    k = int(np.clip(n // 10, 8, 50))
    if n > k + 2:
        _, nb = cKDTree(pts).query(pts, k=k)
        hood = pts[nb] - pts[nb].mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", hood, hood)
        w = np.linalg.eigvalsh(cov)
        ratio = np.sqrt(np.maximum(w[:, -2], 0) / np.maximum(w[:, -1], 1e-300))
        if np.median(ratio) > blob_ratio:
            raise CurveError(f"samples look like a 2D blob (median thickness ratio "
                             f"{np.median(ratio):.2f} > {blob_ratio}); no curve structure")
    adj = euclidean_mst(pts)
    a = _farthest(adj, 0)
    b = _farthest(adj, a)
    if tuple(pts[b]) < tuple(pts[a]):
        a, b = b, a
    path = _tree_path(adj, a, b)
    s, _ = _project_to_polyline(pts, pts[path])
    on_path = np.full(n, -1.0)
    on_path[path] = np.arange(len(path))
    # points on the path keep their path rank; others slot in by arc length
    key_s = s.copy()
    cum = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(pts[path], axis=0), axis=1))]
    key_s[path] = cum
    return np.lexsort((np.where(on_path >= 0, on_path, np.inf), key_s))


def order_curve_points(points, blob_ratio: float = 0.5) -> np.ndarray:
    pts = np.asarray(points, float)
    return pts[curve_order(pts, blob_ratio)]
