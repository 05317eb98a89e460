"""Geometric primitives shared by every stage of the reconstruction.

Contents: the point-cloud container, line elements in extended Plücker
coordinates, projection along an axis, an exact k-nearest-neighbour index
and PCA or jet normal estimation with MST-propagated orientation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

__all__ = [
    "GeometryError",
    "PointCloud",
    "LineElement",
    "LinearComplexElement",
    "Plane",
    "plucker_line_element",
    "project_along",
    "KNNIndex",
    "nearest_neighbors",
    "estimate_normals",
    "jet_roughness",
    "auto_normals",
    "orthonormal_frame",
    "bbox_diagonal",
]


class GeometryError(ValueError):
    """Invalid input to a geometric routine."""


@dataclass(frozen=True)
class PointCloud:
    """Unorganized samples (q x 3) with optional unit normals.

    ``normal_flags`` marks points whose neighbourhood was too degenerate for
    a normal; they are kept in ``points`` but skipped by normal consumers.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    normal_flags: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must be (q, 3), got {pts.shape}")
        if pts.shape[0] < 4:
            raise GeometryError("a point cloud needs at least 4 points")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float)
            if nrm.shape != pts.shape:
                raise GeometryError("normals must match points in shape")
            flags = (np.zeros(len(pts), bool) if self.normal_flags is None
                     else np.asarray(self.normal_flags, bool))
            ok = ~flags
            if ok.any() and np.max(np.abs(np.linalg.norm(nrm[ok], axis=1) - 1.0)) > 1e-9:
                raise GeometryError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
            object.__setattr__(self, "normal_flags", flags)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def q(self) -> int:
        return self.points.shape[0]

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "PointCloud":
        """Apply x -> R x + t to points (and R to normals)."""
        pts = self.points @ R.T + t
        nrm = None if self.normals is None else self.normals @ R.T
        return PointCloud(pts, nrm, self.normal_flags)


@dataclass(frozen=True)
class LineElement:
    """A line (l, lbar) together with the point parameter lambda = <x, l>."""

    l: np.ndarray
    lbar: np.ndarray
    lam: float


@dataclass(frozen=True)
class LinearComplexElement:
    """Coefficients (a, abar, alpha) of a linear complex of line elements."""

    a: np.ndarray
    abar: np.ndarray
    alpha: float

    def __post_init__(self):
        if not (np.any(self.a) or np.any(self.abar) or self.alpha):
            raise GeometryError("linear complex coefficients must not all vanish")

    def evaluate(self, element: LineElement) -> float:
        return float(self.a @ element.lbar + self.abar @ element.l + self.alpha * element.lam)


@dataclass(frozen=True)
class Plane:
    anchor: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise GeometryError("plane normal must be a unit vector")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "anchor", np.asarray(self.anchor, float))

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, float) - self.anchor) @ self.normal

    def project(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, float)
        return pts - np.outer(self.signed_distance(pts), self.normal)


def plucker_line_element(x, l) -> LineElement:
    """Line element through point ``x`` with unit direction ``l``."""
    x = np.asarray(x, float)
    l = np.asarray(l, float)
    nl = np.linalg.norm(l)
    if nl == 0.0:
        raise GeometryError("line direction must be non-zero")
    if abs(nl - 1.0) > 1e-9:
        raise GeometryError("line direction must be a unit vector")
    return LineElement(l.copy(), np.cross(x, l), float(x @ l))


def project_along(v, a) -> np.ndarray:
    """Component of ``v`` orthogonal to ``a``.  Works row-wise on (k, 3) input."""
    v = np.asarray(v, float)
    a = np.asarray(a, float)
    aa = a @ a
    if aa == 0.0:
        raise GeometryError("projection axis must be non-zero")
    return v - np.multiply.outer(v @ a / aa, a)


def orthonormal_frame(a) -> np.ndarray:
    """Rows (e1, e2, a_hat) of a right-handed frame whose third axis is ``a``."""
    a = np.asarray(a, float)
    na = np.linalg.norm(a)
    if na == 0.0:
        raise GeometryError("axis must be non-zero")
    w = a / na
    helper = np.eye(3)[np.argmin(np.abs(w))]
    e1 = np.cross(helper, w)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(w, e1)
    return np.vstack([e1, e2, w])


def bbox_diagonal(points: np.ndarray) -> float:
    points = np.asarray(points, float)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


class KNNIndex:
    """Exact k-NN queries, ascending by distance, ties broken by lower index.

    A kd-tree proposes a few extra candidates; exact squared distances are
    then recomputed and sorted lexicographically by (distance, index).  A row
    whose k-th and last candidate tie falls back to a ball query so that no
    equidistant point with a smaller index can be missed.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(np.asarray(points, float))
        self.tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def query(self, queries: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
        """Indices (nq, k).  ``exclude_self`` drops exact index i for query row i."""
        q = len(self)
        queries = np.atleast_2d(np.asarray(queries, float))
        kk = k + (1 if exclude_self else 0)
        if k < 1 or kk > q:
            raise GeometryError(f"k={k} must lie in [1, {q - (1 if exclude_self else 0)}]")
        extra = min(q, kk + 4)
        _, cand = self.tree.query(queries, k=extra)
        cand = cand.reshape(len(queries), extra)
        d2 = np.sum((self.points[cand] - queries[:, None, :]) ** 2, axis=2)
        if exclude_self:
            rows = np.arange(len(queries))
            d2 = np.where(cand == rows[:, None], np.inf, d2)
        order = _rowwise_lexsort(d2, cand)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        out = cand[:, :k].copy()
        if extra < q:
            # a tie between the k-th candidate and the last one fetched may hide
            # an equal-distance point with a lower index
            last = np.max(np.where(np.isfinite(d2), d2, -np.inf), axis=1)
            risky = np.nonzero(d2[:, k - 1] >= last)[0]
            for r in risky:
                out[r] = self._slow_row(queries[r], k, r if exclude_self else None)
        return out

    def _slow_row(self, x, k, self_idx):
        d2 = np.sum((self.points - x) ** 2, axis=1)
        if self_idx is not None:
            d2[self_idx] = np.inf
        return np.lexsort((np.arange(len(d2)), d2))[:k]


def _rowwise_lexsort(primary: np.ndarray, secondary: np.ndarray) -> np.ndarray:
    # stable sort by secondary, then stable by primary
    o1 = np.argsort(secondary, axis=1, kind="stable")
    p1 = np.take_along_axis(primary, o1, axis=1)
    o2 = np.argsort(p1, axis=1, kind="stable")
    return np.take_along_axis(o1, o2, axis=1)


def nearest_neighbors(cloud, query, k: int) -> list[int]:
    """k nearest cloud indices of a single query point."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    return [int(i) for i in KNNIndex(pts).query(np.asarray(query, float)[None, :], k)[0]]


def estimate_normals(cloud: PointCloud, k: int = 12, index: Optional[KNNIndex] = None,
                     method: str = "pca", jet_order: int = 2) -> PointCloud:
    """Normals from k-neighbourhoods, oriented by MST propagation.

    ``method="pca"`` takes the smallest covariance eigenvector.  ``"jet"``
    refines it by fitting a height function of degree ``jet_order`` (2 or 3)
    over the PCA tangent plane, which removes the curvature bias of plain PCA
    on clean data.  Degenerate neighbourhoods (covariance rank < 2) are
    flagged; their normal is a (0, 0, 1) placeholder and must not be used.
    """
    normals, flags, nbr, _ = _normals_core(cloud.points, k, index, method, jet_order)
    normals = _orient_normals(cloud.points, normals, nbr, flags)
    return PointCloud(cloud.points, normals, flags)


def jet_roughness(points: np.ndarray, k: int = 20, index: Optional[KNNIndex] = None) -> float:
    """Median RMS residual of local cubic height fits, relative to the neighbourhood radius.

    Near zero on clean smooth samples, grows with noise.
    """
    _, flags, _, resid = _normals_core(np.asarray(points, float), k, index, "jet", 3)
    return float(np.median(resid[~flags])) if np.any(~flags) else float("inf")


def auto_normals(cloud: PointCloud, clean_threshold: float = 1e-3) -> PointCloud:
    """Normals tuned to the apparent noise level.

    Clean samples get cubic-jet normals on 20 neighbours.  Anything rougher
    gets quadratic jets on 60 neighbours: wide enough to average the noise
    out, and unlike PCA at that size free of the curvature bias.
    """
    index = KNNIndex(cloud.points)
    if jet_roughness(cloud.points, 20, index) < clean_threshold:
        return estimate_normals(cloud, 20, index, method="jet", jet_order=3)
    return estimate_normals(cloud, 60, index, method="jet", jet_order=2)


def _normals_core(pts, k, index, method, jet_order):
    if k < 3:
        raise GeometryError("normal estimation needs k >= 3")
    if method not in ("pca", "jet"):
        raise GeometryError(f"unknown normal method {method!r}")
    q = len(pts)
    k = min(k, q - 1)
    index = index or KNNIndex(pts)
    nbr = index.query(pts, k, exclude_self=True)
    hood = np.concatenate([pts[:, None, :], pts[nbr]], axis=1)
    centred = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("qki,qkj->qij", centred, centred) / hood.shape[1]
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    scale = np.maximum(w[:, 2], np.finfo(float).tiny)
    flags = w[:, 1] <= 1e-12 * scale
    normals[flags] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    resid = np.zeros(q)
    if method == "jet":
        normals, resid = _jet_refine(hood - pts[:, None, :], normals, v[:, :, 2], jet_order)
        normals[flags] = (0.0, 0.0, 1.0)
    return normals, flags, nbr, resid


def _jet_refine(rel, n0, t0, order):
    if order not in (2, 3):
        raise GeometryError("jet_order must be 2 or 3")
    e1 = t0 - np.sum(t0 * n0, axis=1, keepdims=True) * n0
    e1 /= np.maximum(np.linalg.norm(e1, axis=1, keepdims=True), 1e-300)
    e2 = np.cross(n0, e1)
    u = np.einsum("qkj,qj->qk", rel, e1)
    v = np.einsum("qkj,qj->qk", rel, e2)
    w = np.einsum("qkj,qj->qk", rel, n0)
    r = np.sqrt(np.max(u**2 + v**2, axis=1))[:, None] + 1e-300
    u, v, w = u / r, v / r, w / r
    cols = [np.ones_like(u), u, v, u * u, u * v, v * v]
    if order == 3:
        cols += [u**3, u * u * v, u * v * v, v**3]
    A = np.stack(cols, axis=-1)
    AtA = np.einsum("qki,qkj->qij", A, A) + 1e-12 * np.eye(A.shape[-1])
    c = np.linalg.solve(AtA, np.einsum("qki,qk->qi", A, w)[..., None])[..., 0]
    resid = np.sqrt(np.mean((np.einsum("qki,qi->qk", A, c) - w) ** 2, axis=1))
    n = n0 - c[:, 1:2] * e1 - c[:, 2:3] * e2
    return n / np.linalg.norm(n, axis=1, keepdims=True), resid


def _orient_normals(pts, normals, nbr, flags):
    q = len(pts)
    rows = np.repeat(np.arange(q), nbr.shape[1])
    cols = nbr.ravel()
    # weight 1 - |cos| favours propagation across nearly parallel normals
    wgt = 1.0 - np.abs(np.sum(normals[rows] * normals[cols], axis=1)) + 1e-9
    g = coo_matrix((wgt, (rows, cols)), shape=(q, q)).tocsr()
    g = g.maximum(g.T)
    mst = minimum_spanning_tree(g)
    mst = mst + mst.T
    ncomp, labels = connected_components(mst, directed=False)
    centroid = pts.mean(axis=0)
    out = normals.copy()
    for c in range(ncomp):
        members = np.nonzero(labels == c)[0]
        # root: farthest point from the centroid, normal pointing outward
        root = members[np.argmax(np.linalg.norm(pts[members] - centroid, axis=1))]
        if out[root] @ (pts[root] - centroid) < 0:
            out[root] = -out[root]
        order, pred = breadth_first_order(mst, root, directed=False, return_predecessors=True)
        for node in order[1:]:
            parent = pred[node]
            if out[node] @ out[parent] < 0:
                out[node] = -out[node]
    out[flags] = (0.0, 0.0, 1.0)
    return out
