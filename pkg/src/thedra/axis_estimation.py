"""Axis (ruling direction of the directing cylinder) from points and normals.

Project every sample along a candidate direction a.  On a T-surface the
projected normal lines of one profile are path normals of an instantaneous
planar equiform motion, so the four line elements formed by a point and its
three nearest neighbours satisfy one linear complex equation

    <a, nbar'> + <abar, n'> + alpha * nu = 0.

Eliminating (abar, alpha) leaves the determinant

    Q_i(a) = det [ det(a, x_k, n_k) | n'_k . e1 | n'_k . e2 | <a x x_k, a x n_k> ]_{k=0..3}

with (e1, e2, a) a right-handed orthonormal frame.  Expanded, Q_i is a
homogeneous quartic in a, so f(a) = sum_i Q_i(a)^2 = m(a)^T G m(a) with m(a)
the 15 quartic monomials and G a 15 x 15 Gram matrix.  Building G once makes
multi-start minimization on the sphere cheap.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .geom_core import GeometryError, KNNIndex, PointCloud, auto_normals, estimate_normals, project_along

__all__ = [
    "AxisError",
    "AxisCandidate",
    "ProjectedNormalElement",
    "projected_normal_element",
    "quartic_residual",
    "AxisObjective",
    "axis_cost",
    "fibonacci_sphere",
    "estimate_axis",
    "isotropic_distance",
    "greedy_refine",
    "angle_between_axes",
    "auto_normals",
]


class AxisError(GeometryError):
    pass


@dataclass(frozen=True)
class AxisCandidate:
    direction: np.ndarray
    cost: float
    merged: int = 1


@dataclass(frozen=True)
class ProjectedNormalElement:
    n_proj: np.ndarray
    nbar: np.ndarray
    nu: float
    index: int = -1


def projected_normal_element(x, n, a, index: int = -1, tol: float = 1e-12) -> ProjectedNormalElement:
    x = np.asarray(x, float)
    n = np.asarray(n, float)
    a = np.asarray(a, float)
    xp = project_along(x, a)
    npj = project_along(n, a)
    if np.linalg.norm(npj) <= tol * max(1.0, np.linalg.norm(n)):
        raise AxisError(f"normal of point {index} is parallel to the axis; element excluded")
    return ProjectedNormalElement(npj, np.cross(xp, npj), float(xp @ npj), index)


def angle_between_axes(a, b) -> float:
    """Angle in degrees between two undirected axes."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    return float(np.degrees(np.arccos(np.clip(abs(a @ b), 0.0, 1.0))))


def _frame_batch(A):
    """Right-handed (e1, e2) for each unit row of A."""
    A = np.atleast_2d(A)
    helper = np.eye(3)[np.argmin(np.abs(A), axis=1)]
    e1 = np.cross(helper, A)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(A, e1)
    return e1, e2


def _quartic_matrix(X4, N4, a, e1, e2):
    """4x4 elimination matrices for points (P, 4, 3) at one unit direction."""
    c1 = np.einsum("j,pkj->pk", a, np.cross(X4, N4))  # det(a, x, n)
    xa = X4 @ a
    na = N4 @ a
    c4 = np.einsum("pkj,pkj->pk", X4, N4) - xa * na  # <x', n'> at |a| = 1
    return np.stack([c1, N4 @ e1, N4 @ e2, c4], axis=-1)


def _quartic_values(X4, N4, dirs):
    """Q for every point (rows) and every unit direction (columns)."""
    e1, e2 = _frame_batch(dirs)
    out = np.empty((X4.shape[0], len(dirs)))
    for r, a in enumerate(dirs):
        out[:, r] = np.linalg.det(_quartic_matrix(X4, N4, a, e1[r], e2[r]))
    return out


def quartic_residual(x4, n4, a, pivot: Optional[tuple[int, int]] = None) -> float:
    """Q for one point and its neighbour triple.

    ``x4``/``n4``: (4, 3) with the point first.  ``a`` need not be unit; it is
    normalized.  With ``pivot=(u, v)`` the two in-plane columns are the
    coordinate components u and v of the projected normals instead of the
    frame components; the value then differs by the factor a_w (the third
    coordinate), so the zero set is unchanged.
    """
    a = np.asarray(a, float)
    a = a / np.linalg.norm(a)
    X4 = np.asarray(x4, float)[None]
    N4 = np.asarray(n4, float)[None]
    if pivot is None:
        e1, e2 = _frame_batch(a[None])
        M = _quartic_matrix(X4, N4, a, e1[0], e2[0])
    else:
        u, v = pivot
        npj = project_along(N4[0], a)
        c1 = np.cross(X4[0], N4[0]) @ a
        c4 = np.sum(X4[0] * N4[0], axis=1) - (X4[0] @ a) * (N4[0] @ a)
        M = np.stack([c1, npj[:, u], npj[:, v], c4], axis=-1)[None]
    return float(np.linalg.det(M[0]))


# --- quartic monomial basis --------------------------------------------------

_EXPONENTS = np.array([e for e in itertools.product(range(5), repeat=3) if sum(e) == 4])


def _sphere_moments():
    """M[r, c] = mean over the unit sphere of m_r(a) m_c(a) (closed form)."""
    E = _EXPONENTS[:, None, :] + _EXPONENTS[None, :, :]
    M = np.zeros(E.shape[:2])
    for r, c in np.ndindex(*M.shape):
        e = E[r, c]
        if np.all(e % 2 == 0):
            # surface integral 2 prod Gamma((k+1)/2) / Gamma((|e|+3)/2), over area 4 pi
            M[r, c] = math.prod(math.gamma((k + 1) / 2) for k in e) / math.gamma((e.sum() + 3) / 2) / (2 * math.pi)
    return M


_SPHERE_M = _sphere_moments()


def _monomials(a):
    a = np.atleast_2d(a)
    return np.prod(a[:, None, :] ** _EXPONENTS[None], axis=2)


def _monomial_jacobian(a):
    """d m / d a, shape (15, 3) for a single direction."""
    a = np.asarray(a, float)
    J = np.zeros((len(_EXPONENTS), 3))
    for c in range(3):
        e = _EXPONENTS.copy()
        coef = e[:, c].astype(float)
        e[:, c] = np.maximum(e[:, c] - 1, 0)
        J[:, c] = coef * np.prod(a[None, :] ** e, axis=1)
    return J


def fibonacci_sphere(n: int) -> np.ndarray:
    """n quasi-uniform unit vectors (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z**2)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@dataclass
class AxisObjective:
    """f(a) = sum_i w_i (Q_i(a) / r_i)^2 for a cloud with normals.

    Points are centred at their centroid and scaled to unit RMS radius
    first, which keeps the monomial coefficients well conditioned.  ``r_i``
    is the RMS of Q_i over the unit sphere.  Without it, one quadruple with
    a wide neighbour spacing and a poor normal can outweigh thousands of good
    ones, since Q_i grows fast with the spacing.  The RMS is rotation
    invariant and leaves the zero set of every Q_i alone.  ``coeffs`` (15, P)
    holds each raw Q_i in the quartic monomial basis; ``weights`` are the
    extra robust weights w_i (ones initially).
    """

    X4: np.ndarray
    N4: np.ndarray
    usable: np.ndarray
    centroid: np.ndarray
    scale: float
    coeffs: np.ndarray = field(repr=False, default=None)
    gram: np.ndarray = field(repr=False, default=None)
    fit_residual: float = 0.0
    row_norms: np.ndarray = field(repr=False, default=None)
    weights: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_cloud(cls, cloud: PointCloud, neighbors: Optional[np.ndarray] = None,
                   normal_k: Optional[int] = None, normalize_rows: bool = True) -> "AxisObjective":
        if cloud.normals is None:
            cloud = auto_normals(cloud) if normal_k is None else estimate_normals(cloud, normal_k)
        pts = cloud.points
        centroid = pts.mean(axis=0)
        scale = float(np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))) or 1.0
        P = (pts - centroid) / scale
        usable = ~cloud.normal_flags
        if neighbors is None:
            idx = np.nonzero(usable)[0]
            sub = KNNIndex(P[idx]).query(P[idx], 3, exclude_self=True)
            nb = np.full((len(P), 3), -1)
            nb[idx] = idx[sub]
        else:
            nb = np.asarray(neighbors, int)
        rows = np.nonzero(usable & np.all(nb >= 0, axis=1))[0]
        if len(rows) < 10:
            raise AxisError(f"only {len(rows)} usable points; need at least 10")
        quad = np.concatenate([rows[:, None], nb[rows]], axis=1)
        obj = cls(P[quad], cloud.normals[quad], rows, centroid, scale)
        obj._fit_coefficients(normalize_rows)
        return obj

    def _fit_coefficients(self, normalize_rows: bool = True):
        dirs = fibonacci_sphere(40)
        V = _monomials(dirs)  # (40, 15)
        Qv = _quartic_values(self.X4, self.N4, dirs)  # (P, 40)
        C, *_ = np.linalg.lstsq(V, Qv.T, rcond=None)
        self.coeffs = C
        if normalize_rows:
            r = np.sqrt(np.maximum(np.einsum("rp,rc,cp->p", C, _SPHERE_M, C), 0.0))
            self.row_norms = np.where(r > 0, r, 1.0)
        else:
            self.row_norms = np.ones(C.shape[1])
        self.reweight(np.ones(C.shape[1]))
        denom = np.max(np.abs(Qv)) + 1e-300
        self.fit_residual = float(np.max(np.abs(V @ C - Qv.T)) / denom)

    def reweight(self, weights: np.ndarray) -> None:
        """Use sum w_i (Q_i / r_i)^2 from now on."""
        w = np.asarray(weights, float)
        if w.shape != (self.coeffs.shape[1],) or np.any(w < 0):
            raise AxisError("weights must be non-negative, one per usable point")
        self.weights = w
        self.gram = (self.coeffs * (w / self.row_norms**2)) @ self.coeffs.T

    def q_fast(self, a) -> np.ndarray:
        """Q_i(a) for unit a from the monomial coefficients."""
        return _monomials(np.asarray(a, float))[0] @ self.coeffs

    def q_values(self, a) -> np.ndarray:
        a = np.asarray(a, float)
        a = a / np.linalg.norm(a)
        return _quartic_values(self.X4, self.N4, a[None])[:, 0]

    def residuals(self, a) -> np.ndarray:
        """Normalized residuals Q_i(a) / r_i."""
        return self.q_fast(np.asarray(a, float) / np.linalg.norm(a)) / self.row_norms

    def direct(self, a) -> float:
        """f by explicit determinants (reference route)."""
        return float(np.sum(self.weights * (self.q_values(a) / self.row_norms) ** 2))

    def __call__(self, a) -> float:
        a = np.asarray(a, float)
        u = a / np.linalg.norm(a)
        m = _monomials(u)[0]
        return float(m @ self.gram @ m)

    def gradient(self, a) -> np.ndarray:
        """Gradient of f(a / |a|) with respect to a (tangent to the sphere at unit a)."""
        a = np.asarray(a, float)
        na = np.linalg.norm(a)
        u = a / na
        m = _monomials(u)[0]
        g = 2.0 * _monomial_jacobian(u).T @ (self.gram @ m)
        return (g - u * (u @ g)) / na


def axis_cost(cloud: PointCloud, a, normal_k: Optional[int] = None) -> float:
    """f(a) on the normalized cloud (see :class:`AxisObjective`)."""
    return AxisObjective.from_cloud(cloud, normal_k=normal_k)(a)


def _canonical(a):
    a = a / np.linalg.norm(a)
    k = int(np.argmax(np.abs(a)))
    return -a if a[k] < 0 else a


def _multistart(obj, starts):
    found = []
    for a0 in starts:
        res = minimize(obj, a0, jac=obj.gradient, method="BFGS",
                       options={"gtol": 1e-14, "maxiter": 500})
        if not np.all(np.isfinite(res.x)) or np.linalg.norm(res.x) == 0:
            continue
        a = _canonical(res.x)
        found.append((obj(a), a))
    if not found:
        raise AxisError("no multi-start run converged")
    found.sort(key=lambda fa: fa[0])
    return found


def estimate_axis(cloud: PointCloud, n_starts: int = 64, dedup_deg: float = 1.0,
                  keep_factor: float = 10.0, normal_k: Optional[int] = None,
                  objective: Optional[AxisObjective] = None,
                  robust_iters: int = 8) -> list[AxisCandidate]:
    """Distinct local minima of f on the sphere, best first.

    A few points with bad normals dominate a plain sum of squares, so after
    the first multi-start the normalized residuals q_i are reweighted with
    Cauchy weights 1 / (1 + (q_i / 3 med|q|)^2) around the current best axis
    (``robust_iters`` rounds, 0 disables).  The final multi-start runs on the
    reweighted objective.
    """
    obj = objective or AxisObjective.from_cloud(cloud, normal_k=normal_k)
    starts = fibonacci_sphere(n_starts)
    found = _multistart(obj, starts)
    if robust_iters > 0:
        a = found[0][1]
        for _ in range(robust_iters):
            qa = obj.residuals(a)
            c = 3.0 * np.median(np.abs(qa))
            if c <= 0:
                break
            obj.reweight(1.0 / (1.0 + (qa / c) ** 2))
            a = _multistart(obj, [a])[0][1]
        found = _multistart(obj, np.vstack([a[None], starts]))
    merged: list[list] = []
    for cost, a in found:
        for entry in merged:
            if angle_between_axes(entry[1], a) < dedup_deg:
                entry[2] += 1
                break
        else:
            merged.append([cost, a, 1])
    best = merged[0][0]
    keep = [AxisCandidate(a, float(c), k) for c, a, k in merged
            if c <= keep_factor * best or c <= 1e-300]
    return keep


def isotropic_distance(x, y, a) -> float:
    """Distance between x and y after projecting along unit a."""
    d = np.asarray(x, float) - np.asarray(y, float)
    a = np.asarray(a, float)
    return float(np.sqrt(max(d @ d - (a @ d) ** 2, 0.0)))


@dataclass
class RefineReport:
    direction: np.ndarray
    iterations: int
    converged: bool
    costs: list
    reason: str = "stable"


def greedy_refine(cloud: PointCloud, a_star, max_iter: int = 20, normal_k: Optional[int] = None) -> RefineReport:
    """Re-pick neighbour triples by the isotropic metric and re-minimize.

    Stops when the neighbour sets no longer change (``reason="stable"``).
    Re-clustering can toggle between two neighbour sets forever; an iterate
    whose cost under its own sets exceeds the previous one is rejected and
    the loop ends with ``reason="no-descent"``, so ``costs`` (f of each
    accepted iterate) never increases.
    """
    if cloud.normals is None:
        cloud = auto_normals(cloud) if normal_k is None else estimate_normals(cloud, normal_k)
    a = _canonical(np.asarray(a_star, float))
    prev = None
    costs = []
    usable = np.nonzero(~cloud.normal_flags)[0]
    for it in range(1, max_iter + 1):
        proj = project_along(cloud.points[usable], a)
        sub = KNNIndex(proj).query(proj, 3, exclude_self=True)
        nb = np.full((len(cloud), 3), -1)
        nb[usable] = usable[sub]
        if prev is not None and np.array_equal(nb, prev):
            return RefineReport(a, it - 1, True, costs)
        obj = AxisObjective.from_cloud(cloud, neighbors=nb)
        res = minimize(obj, a, jac=obj.gradient, method="BFGS", options={"gtol": 1e-14, "maxiter": 500})
        cand = _canonical(res.x)
        if obj(cand) > obj(a):
            cand = a
        if costs and obj(cand) > costs[-1]:
            return RefineReport(a, it - 1, True, costs, "no-descent")
        a = cand
        costs.append(obj(a))
        prev = nb
    return RefineReport(a, max_iter, False, costs, "cap")
