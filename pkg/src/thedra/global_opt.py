"""Constrained refinement of a T-hedron against a point cloud.

Work happens in the axis frame (rows of the mesh are horizontal).  The
variables are the vertex grid x (m+1, n+1, 3) and one vertical plane
a x + b y + c = 0 per column.  Constraints:

* G1(i, j) = |(x[i,j+1] - x[i,j]) x (x[i+1,j+1] - x[i+1,j])|^2 per face,
* G2(i, j) = a_j x[i,j,0] + b_j x[i,j,1] + c_j per vertex.

Each iteration solves least-squares multipliers, takes a gradient step on the
Lagrangian and restores feasibility by back-projection onto the T-hedron set.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geom_core import GeometryError, KNNIndex
from .thedron import THedron, fit_profile_plane, plane_residuals, trapezoid_residuals

__all__ = [
    "OptimizerConfig",
    "OptState",
    "FitResult",
    "ElapseResult",
    "correspondences",
    "cost_F",
    "constraint_values",
    "lagrangian_L",
    "lagrangian_grad",
    "constraint_jacobian",
    "system_dimensions",
    "solve_multipliers",
    "gradient_step",
    "optimal_inverse_scale",
    "backproject",
    "fit",
    "horn_registration",
    "sample_mesh_surface",
    "register_to_surface",
    "local_plane_targets",
    "adjust_axis",
    "run_elapses",
]


@dataclass
class OptimizerConfig:
    """``alpha`` is dimensionless: a step of 1 moves every vertex onto its
    (projected) target in one go."""

    alpha: float = 0.5
    max_iters: int = 200
    max_halvings: int = 20
    tol: float = 1e-8
    outer_tol: float = 1e-4
    elapses: int = 5
    registration_iters: int = 50
    point_to_plane: bool = False
    target_k: int = 1
    registration: str = "surface"
    relaxation: float = 0.5
    surface_subdiv: int = 4
    trim_quantile: float = 0.9

    def validate(self):
        if not self.alpha > 0:
            raise GeometryError("learning rate alpha must be positive")
        if self.max_iters < 0 or self.max_halvings < 0 or self.elapses < 0:
            raise GeometryError("iteration caps must be non-negative")
        if self.registration not in ("surface", "vertex"):
            raise GeometryError("registration must be 'surface' or 'vertex'")
        if not 0 < self.relaxation <= 1:
            raise GeometryError("relaxation must lie in (0, 1]")


@dataclass
class OptState:
    x: np.ndarray
    planes: np.ndarray
    y: np.ndarray
    lam1: np.ndarray
    lam2: np.ndarray

    @classmethod
    def zeros_like(cls, x, planes, y=None) -> "OptState":
        x = np.asarray(x, float)
        m1, n1 = x.shape[:2]
        return cls(x, np.asarray(planes, float), x.copy() if y is None else np.asarray(y, float),
                   np.zeros((m1 - 1, n1 - 1)), np.zeros((m1, n1)))


@dataclass
class FitResult:
    mesh: THedron
    history: list
    stop_reason: str
    iterations: int

    @property
    def L_sequence(self) -> list:
        return [h["L"] for h in self.history]

    def csv_log(self) -> str:
        buf = io.StringIO()
        cols = ["iteration", "L", "F", "max_G1", "max_G2", "alpha", "halvings"]
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for h in self.history:
            w.writerow(h)
        return buf.getvalue()


@dataclass
class ElapseResult:
    mesh: THedron
    points: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    fits: list
    registrations: list = field(default_factory=list)


# --- correspondences and costs -------------------------------------------------

def correspondences(x, index, normals=None, point_to_plane: bool = False):
    """Closest cloud point per vertex (ties: lower index).

    ``index`` is a KNNIndex or an (N, 3) array.  With ``point_to_plane`` the
    target is the vertex projected onto the tangent plane at its closest
    point.  Returns (targets shaped like x, indices).
    """
    if not isinstance(index, KNNIndex):
        index = KNNIndex(np.asarray(index, float))
    x = np.asarray(x, float)
    flat = x.reshape(-1, 3)
    idx = index.query(flat, 1)[:, 0]
    y = index.points[idx].copy()
    if point_to_plane:
        if normals is None:
            raise GeometryError("point-to-plane correspondences need cloud normals")
        nrm = np.asarray(normals, float)[idx]
        y = flat - np.sum((flat - y) * nrm, axis=1, keepdims=True) * nrm
    return y.reshape(x.shape), idx.reshape(x.shape[:2])


def cost_F(x, y) -> float:
    d = np.asarray(x, float) - np.asarray(y, float)
    return 0.5 * float(np.sum(d * d))


def constraint_values(x, planes):
    """(G1 (m, n), G2 (m+1, n+1))."""
    return trapezoid_residuals(x), plane_residuals(x, planes)


def lagrangian_L(state: OptState) -> float:
    g1, g2 = constraint_values(state.x, state.planes)
    return cost_F(state.x, state.y) + float(np.sum(state.lam1 * g1) + np.sum(state.lam2 * g2))


def _g1_parts(x):
    u = x[:-1, 1:] - x[:-1, :-1]
    w = x[1:, 1:] - x[1:, :-1]
    c = np.cross(u, w)
    return u, w, c


def lagrangian_grad(state: OptState):
    """Analytic gradient of L with respect to (x, planes), y held fixed."""
    x, P = state.x, state.planes
    gx = x - state.y
    u, w, c = _g1_parts(x)
    du = 2.0 * np.cross(w, c) * state.lam1[..., None]
    dw = 2.0 * np.cross(c, u) * state.lam1[..., None]
    gx[:-1, 1:] += du
    gx[:-1, :-1] -= du
    gx[1:, 1:] += dw
    gx[1:, :-1] -= dw
    lam2 = state.lam2
    gx[..., 0] += lam2 * P[:, 0]
    gx[..., 1] += lam2 * P[:, 1]
    gP = np.stack([np.sum(lam2 * x[..., 0], axis=0), np.sum(lam2 * x[..., 1], axis=0),
                   np.sum(lam2, axis=0)], axis=1)
    return gx, gP


def constraint_jacobian(x, planes) -> sp.csr_matrix:
    """Transposed constraint Jacobian A (variables x constraints).

    Variable order: x flattened row-major, then (a, b, c) per column.
    Constraint order: G1 faces row-major, then G2 vertices row-major.
    """
    x = np.asarray(x, float)
    P = np.asarray(planes, float)
    m1, n1 = x.shape[:2]
    nx = 3 * m1 * n1
    vid = np.arange(m1 * n1).reshape(m1, n1)
    u, w, c = _g1_parts(x)
    du = 2.0 * np.cross(w, c)
    dw = 2.0 * np.cross(c, u)
    face = np.arange((m1 - 1) * (n1 - 1)).reshape(m1 - 1, n1 - 1)
    rows, cols, vals = [], [], []

    def put(vert, col, grad):
        for k in range(3):
            rows.append((3 * vert + k).ravel())
            cols.append(col.ravel())
            vals.append(grad[..., k].ravel())

    put(vid[:-1, 1:], face, du)
    put(vid[:-1, :-1], face, -du)
    put(vid[1:, 1:], face, dw)
    put(vid[1:, :-1], face, -dw)
    g2 = face.size + vid
    a = np.broadcast_to(P[:, 0], (m1, n1))
    b = np.broadcast_to(P[:, 1], (m1, n1))
    for k, coef in ((0, a), (1, b)):
        rows.append((3 * vid + k).ravel())
        cols.append(g2.ravel())
        vals.append(coef.ravel())
    jcol = np.broadcast_to(np.arange(n1), (m1, n1))
    for k, val in ((0, x[..., 0]), (1, x[..., 1]), (2, np.ones((m1, n1)))):
        rows.append((nx + 3 * jcol + k).ravel())
        cols.append(g2.ravel())
        vals.append(val.ravel())
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nx + 3 * n1, face.size + m1 * n1))
    return A.tocsr()


def system_dimensions(m: int, n: int, convention: str = "grid"):
    """(rows, unknowns) of the multiplier system.

    ``grid`` counts this implementation's stationarity rows (vertex coordinates
    plus plane coefficients) and multipliers (faces plus vertices) of an
    (m+1) x (n+1) grid.  ``reference`` evaluates the published counting
    formulas 4mn + 2n - m + 1 and mn + 2n - m + 1.
    """
    if convention == "reference":
        return 4 * m * n + 2 * n - m + 1, m * n + 2 * n - m + 1
    if convention == "grid":
        return 3 * (m + 1) * (n + 1) + 3 * (n + 1), m * n + (m + 1) * (n + 1)
    raise ValueError(f"unknown convention {convention!r}")


def solve_multipliers(state: OptState, rcond: float = 1e-12, parallel_tol: float = 1e-9):
    """Least-squares multipliers of the stationarity system A lam = -grad F.

    Constraints whose gradient vanishes get zero, which is what the
    minimum-norm solution assigns them.  G1 of a face whose trajectory edges
    are parallel to within ``parallel_tol`` rad counts as vanishing (at a
    trapezoid its gradient is pure roundoff).  The remaining
    system splits into independent blocks (connected components of the
    variable/constraint incidence); each block is solved by complete
    orthogonal factorization.  Returns (lam1, lam2, info).
    """
    x = state.x
    m1, n1 = x.shape[:2]
    A = constraint_jacobian(x, state.planes)
    rhs = -np.concatenate([(x - state.y).ravel(), np.zeros(3 * n1)])
    lam = np.zeros(A.shape[1])
    A = A.tocsc()
    A.eliminate_zeros()
    u, w, c = _g1_parts(x)
    flat_face = (np.linalg.norm(c, axis=-1)
                 <= parallel_tol * np.linalg.norm(u, axis=-1) * np.linalg.norm(w, axis=-1)).ravel()
    live_mask = np.diff(A.indptr) > 0
    live_mask[:flat_face.size] &= ~flat_face
    live = np.nonzero(live_mask)[0]
    rank_deficient = False
    blocks = 0
    if live.size:
        Al = A[:, live]
        nv, nc = Al.shape
        inc = Al.tocoo()
        graph = sp.coo_matrix((np.ones(inc.nnz), (inc.row, nv + inc.col)), shape=(nv + nc, nv + nc))
        ncomp, labels = connected_components(graph, directed=False)
        vlab, clab = labels[:nv], labels[nv:]
        order_c = np.argsort(clab, kind="stable")
        bounds_c = np.searchsorted(clab[order_c], np.arange(ncomp + 1))
        order_v = np.argsort(vlab, kind="stable")
        bounds_v = np.searchsorted(vlab[order_v], np.arange(ncomp + 1))
        Acsr = Al.tocsr()
        for comp in range(ncomp):
            ci = order_c[bounds_c[comp]:bounds_c[comp + 1]]
            if ci.size == 0:
                continue
            vi = order_v[bounds_v[comp]:bounds_v[comp + 1]]
            blk = Acsr[vi][:, ci].toarray()
            sol, _, rank, _ = scipy.linalg.lstsq(blk, rhs[vi], cond=rcond, lapack_driver="gelsy")
            rank_deficient |= rank < ci.size
            lam[live[ci]] = sol
            blocks += 1
    nf = (m1 - 1) * (n1 - 1)
    lam1 = lam[:nf].reshape(m1 - 1, n1 - 1)
    lam2 = lam[nf:].reshape(m1, n1)
    resid = float(np.linalg.norm(A @ lam - rhs))
    A = None
    return lam1, lam2, {"residual": resid, "rank_deficient": bool(rank_deficient), "blocks": blocks}


def gradient_step(state: OptState, alpha: float):
    """Candidate (x, planes) after one step along -grad L.

    Vertices move by -alpha * grad_x L.  Plane coefficients take a
    Gauss-Newton preconditioned step (their raw gradient carries the units
    of length^2), then (a, b) is renormalized.
    """
    gx, gP = lagrangian_grad(state)
    if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(gP))):
        raise FloatingPointError("non-finite Lagrangian gradient")
    x_new = state.x - alpha * gx
    P = state.planes.copy()
    if alpha != 0:
        x = state.x
        q = np.stack([x[..., 0], x[..., 1], np.ones(x.shape[:2])], axis=-1)
        H = np.einsum("ijk,ijl->jkl", q, q)
        H += 1e-12 * np.trace(H, axis1=1, axis2=2)[:, None, None] * np.eye(3)
        P = P - alpha * np.linalg.solve(H, gP[..., None])[..., 0]
        P = P / np.linalg.norm(P[:, :2], axis=1, keepdims=True)
    return x_new, P


# --- back-projection -----------------------------------------------------------

def optimal_inverse_scale(p, q) -> float:
    """k minimizing sum (k q - p)^2, i.e. <p, q> / <q, q>."""
    p = np.asarray(p, float).ravel()
    q = np.asarray(q, float).ravel()
    qq = float(q @ q)
    if qq == 0:
        raise GeometryError("cannot fit a scale to a set collapsed onto the anchor line")
    return float(p @ q) / qq


def _normalize_planes(P):
    P = np.asarray(P, float)
    nrm = np.linalg.norm(P[:, :2], axis=1)
    if np.any(nrm == 0):
        raise GeometryError("plane coefficients (a, b) must not both vanish")
    return P / nrm[:, None]


def backproject(x_hat, planes, parallel_tol: float = 1e-6) -> THedron:
    """Nearest-structure T-hedron for a perturbed grid and column planes.

    Columns are projected into their planes and pulled back to plane 0 by
    the inverse stretch-rotations about consecutive plane intersections
    (each inverse scale fit in closed form).  The profile becomes the
    barycenter of the pulled-back columns and the grid is rebuilt forward.
    Consecutive planes closer than ``parallel_tol`` to parallel are linked
    by a fitted translation and reported in ``report['parallel_pairs']``.
    """
    x = np.asarray(x_hat, float)
    P = _normalize_planes(planes)
    m1, n1 = x.shape[:2]
    if P.shape[0] != n1:
        raise GeometryError(f"expected {n1} planes, got {P.shape[0]}")
    dist = plane_residuals(x, P)
    xp = x.copy()
    xp[..., 0] -= dist * P[:, 0]
    xp[..., 1] -= dist * P[:, 1]
    w = xp[..., 0] + 1j * xp[..., 1]
    dirs = -P[:, 1] + 1j * P[:, 0]
    # map column j into plane j-1: w -> kappa_j w + beta_j
    kappa = np.ones(n1, complex)
    beta = np.zeros(n1, complex)
    parallel = []
    for j in range(1, n1):
        a0, b0, c0 = P[j - 1]
        a1, b1, c1 = P[j]
        det = a0 * b1 - a1 * b0
        if abs(det) < parallel_tol:
            parallel.append(j)
            beta[j] = np.mean(w[:, j - 1] - w[:, j])
            continue
        gx = (-c0 * b1 + c1 * b0) / det
        gy = (-a0 * c1 + a1 * c0) / det
        g = gx + 1j * gy
        rot = dirs[j - 1] / dirs[j]  # unit, rotates line j onto line j-1
        rho = ((w[:, j - 1] - g) * np.conj(dirs[j - 1])).real
        sig = ((w[:, j] - g) * np.conj(dirs[j])).real
        k = optimal_inverse_scale(rho, sig)
        if k == 0:
            raise GeometryError(f"column {j} maps onto the anchor line of its neighbour")
        kappa[j] = k * rot
        beta[j] = g * (1 - kappa[j])
    K = np.ones(n1, complex)
    C = np.zeros(n1, complex)
    for j in range(1, n1):
        K[j] = K[j - 1] * kappa[j]
        C[j] = K[j - 1] * beta[j] + C[j - 1]
    prof = np.mean(K[None, :] * w + C[None, :], axis=1)
    z = np.mean(xp[..., 2], axis=1)
    out = np.empty_like(x)
    wj = (prof[:, None] - C[None, :]) / K[None, :]
    out[..., 0], out[..., 1] = wj.real, wj.imag
    out[..., 2] = z[:, None]
    newP = np.empty_like(P)
    for j in range(n1):
        cf, degenerate = fit_profile_plane(out[:, j], return_flag=True)
        if degenerate:
            cf = P[j].copy()
            cf[2] = -(cf[0] * out[0, j, 0] + cf[1] * out[0, j, 1])
        elif cf[:2] @ P[j, :2] < 0:
            cf = -cf
        newP[j] = cf
    etas = np.r_[1.0, np.abs(kappa[1:]) ** -1]
    thetas = np.r_[0.0, -np.angle(kappa[1:])]
    rep = {"parallel_pairs": parallel}
    return THedron(out, newP, etas=etas, thetas=thetas, report=rep)


# --- descent loop --------------------------------------------------------------

def _max_constraints(x, P):
    g1, g2 = constraint_values(x, P)
    return float(np.max(g1)) if g1.size else 0.0, float(np.max(np.abs(g2)))


def fit(points, initial: THedron, config: Optional[OptimizerConfig] = None, normals=None,
        index: Optional[KNNIndex] = None, log: Optional[Callable[[dict], None]] = None) -> FitResult:
    """Descend the Lagrangian from ``initial`` while staying on the T-hedron set.

    Iteration: correspondences, multipliers, gradient step, back-projection,
    new correspondences.  A candidate with larger L halves alpha and is
    retried; after ``max_halvings`` failures the current mesh is declared a
    local minimum.  L is evaluated on feasible meshes, so L equals F there.
    """
    cfg = config or OptimizerConfig()
    cfg.validate()
    pts = np.asarray(points, float)
    index = index or KNNIndex(pts)
    mesh = initial
    if max(_max_constraints(mesh.vertices, mesh.planes)) > 1e-9:
        mesh = backproject(mesh.vertices, mesh.planes)
    x, P = mesh.vertices, mesh.planes
    y = _targets(x, index, normals, cfg, cfg.target_k)
    L = cost_F(x, y)
    alpha = cfg.alpha
    g1, g2 = _max_constraints(x, P)
    history = [{"iteration": 0, "L": L, "F": L, "max_G1": g1, "max_G2": g2, "alpha": alpha, "halvings": 0}]
    if log:
        log(history[-1])
    reason = "max_iters"
    it = 0
    exact = 1e-26 * max(float(np.sum(x * x)), 1e-300)
    for it in range(1, cfg.max_iters + 1):
        if L <= exact:
            reason, it = "converged", it - 1
            break
        state = OptState.zeros_like(x, P, y)
        state.lam1, state.lam2, _ = solve_multipliers(state)
        accepted = None
        halvings = 0
        while True:
            xh, Ph = gradient_step(state, alpha)
            try:
                cand = backproject(xh, Ph)
            except GeometryError:
                cand = None
            if cand is not None:
                yc = _targets(cand.vertices, index, normals, cfg, cfg.target_k)
                Lc = cost_F(cand.vertices, yc)
                if Lc <= L:
                    accepted = (cand, yc, Lc)
                    break
            if halvings == cfg.max_halvings:
                break
            alpha *= 0.5
            halvings += 1
        if accepted is None:
            reason = "local_minimum"
            it -= 1
            break
        mesh, y, Lnew = accepted
        x, P = mesh.vertices, mesh.planes
        g1, g2 = _max_constraints(x, P)
        history.append({"iteration": it, "L": Lnew, "F": Lnew, "max_G1": g1, "max_G2": g2,
                        "alpha": alpha, "halvings": halvings})
        if log:
            log(history[-1])
        dec = L - Lnew
        L = Lnew
        if dec <= cfg.tol * max(L + dec, 1e-300):
            reason = "converged"
            break
    return FitResult(mesh, history, reason, it)


# --- axis re-registration ------------------------------------------------------

def horn_registration(src, dst):
    """Proper rotation R and translation t minimizing sum |R src + t - dst|^2.

    Closed form via the unit quaternion of the largest eigenvalue of Horn's
    4x4 matrix.  Collinear or coincident correspondences leave the rotation
    undetermined: identity rotation, centroid translation, flagged.
    """
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    S = a.T @ b
    scale = max(float(np.sum(a * a)), float(np.sum(b * b)), 1e-300)
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size < 2 or sv[1] <= 1e-10 * max(sv[0], 1e-300):
        return np.eye(3), cd - cs, {"degenerate": True}
    Sxx, Sxy, Sxz = S[0]
    Syx, Syy, Syz = S[1]
    Szx, Szy, Szz = S[2]
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    _, vec = np.linalg.eigh(N / scale)
    q0, qx, qy, qz = vec[:, -1]
    R = np.array([
        [q0 * q0 + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qy * qx + q0 * qz), q0 * q0 - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - q0 * qx)],
        [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz],
    ])
    return R, cd - R @ cs, {"degenerate": False}


def local_plane_targets(x, index: KNNIndex, k: int):
    """Vertices projected onto the total-least-squares plane of their k
    nearest cloud points (a denoised stand-in for the closest point)."""
    flat = np.asarray(x, float).reshape(-1, 3)
    nb = index.points[index.query(flat, k)]
    ctr = nb.mean(axis=1)
    rel = nb - ctr[:, None, :]
    cov = np.einsum("nki,nkj->nij", rel, rel)
    _, vec = np.linalg.eigh(cov)
    nrm = vec[:, :, 0]
    y = flat - np.sum((flat - ctr) * nrm, axis=1, keepdims=True) * nrm
    return y.reshape(np.shape(x))


def _targets(x, index, normals, cfg, k):
    if k > 1:
        return local_plane_targets(x, index, k)
    return correspondences(x, index, normals, cfg.point_to_plane)[0]


def sample_mesh_surface(vertices, subdiv: int = 4) -> np.ndarray:
    """Bilinear samples of every quad, ``subdiv`` intervals per side."""
    V = np.asarray(vertices, float)
    A, B, C, D = V[:-1, :-1], V[1:, :-1], V[:-1, 1:], V[1:, 1:]
    u = np.linspace(0.0, 1.0, subdiv + 1)
    out = [(1 - a) * (1 - b) * A + a * (1 - b) * B + (1 - a) * b * C + a * b * D
           for a in u for b in u]
    return np.unique(np.concatenate([o.reshape(-1, 3) for o in out]), axis=0)


def _relaxed(R, t, c, w):
    """Fraction ``w`` of the rigid motion p -> R p + t, rotating about c."""
    if w >= 1.0:
        return R, t
    Rw = Rotation.from_rotvec(w * Rotation.from_matrix(R).as_rotvec()).as_matrix()
    shift = w * (R @ c + t - c)
    return Rw, c + shift - Rw @ c


def register_to_surface(mesh, points, config: Optional[OptimizerConfig] = None, normals=None):
    """ICP of the whole cloud against a dense sampling of the mesh surface.

    Every cloud point votes, so the estimate is far less noisy than matching
    the few mesh vertices.  The farthest ``1 - trim_quantile`` of the pairs
    are dropped each step (uncovered parts of the mesh).  Only the fraction
    ``relaxation`` of the converged motion is applied.
    Returns the same tuple as :func:`adjust_axis`.
    """
    cfg = config or OptimizerConfig()
    x = mesh.vertices if isinstance(mesh, THedron) else np.asarray(mesh, float)
    S = sample_mesh_surface(x, cfg.surface_subdiv)
    tree = cKDTree(S)
    pts = np.asarray(points, float)
    cur = pts
    R_tot, t_tot = np.eye(3), np.zeros(3)
    degenerate = False
    steps = 0

    def cost(P):
        d, _ = tree.query(P)
        return float(np.mean(np.sort(d**2)[: max(3, int(cfg.trim_quantile * len(d)))]))

    C0 = cost(pts)
    for steps in range(1, cfg.registration_iters + 1):
        d, j = tree.query(cur)
        keep = d <= np.quantile(d, cfg.trim_quantile)
        R, t, info = horn_registration(cur[keep], S[j[keep]])
        degenerate |= info["degenerate"]
        cur = cur @ R.T + t
        R_tot, t_tot = R @ R_tot, R @ t_tot + t
        ang = np.arccos(np.clip((np.trace(R) - 1) / 2, -1.0, 1.0))
        if ang < 1e-7 and np.linalg.norm(t) < 1e-7 * _bbox_scale(S):
            break
    R_tot, t_tot = _relaxed(R_tot, t_tot, pts.mean(axis=0), cfg.relaxation)
    moved = pts @ R_tot.T + t_tot
    nrm = None if normals is None else np.asarray(normals, float) @ R_tot.T
    report = {"F_before": cost_F(x, correspondences(x, KNNIndex(pts))[0]),
              "F_after": cost_F(x, correspondences(x, KNNIndex(moved))[0]),
              "surface_cost_before": C0, "surface_cost_after": cost(moved),
              "steps": steps, "degenerate": bool(degenerate), "mode": "surface",
              "relaxation": cfg.relaxation}
    return moved, R_tot, t_tot, nrm, report


def _bbox_scale(P) -> float:
    return float(np.linalg.norm(P.max(axis=0) - P.min(axis=0))) or 1.0


def adjust_axis(mesh, points, config: Optional[OptimizerConfig] = None, normals=None,
                target_k: Optional[int] = None):
    """Rigidly move the cloud onto the mesh (mesh fixed).

    ``config.registration == "surface"`` delegates to
    :func:`register_to_surface`.  The vertex mode below matches mesh
    vertices to cloud points and stops once F stalls.

    With ``target_k`` > 1 each vertex is matched to its projection onto the
    plane of its k nearest cloud points instead of the closest point, which
    keeps the registration meaningful when noise exceeds the point spacing.
    Returns (moved points, R, t, moved normals, report) with the accumulated
    transform p -> R p + t.
    """
    cfg = config or OptimizerConfig()
    if cfg.registration == "surface":
        return register_to_surface(mesh, points, cfg, normals)
    target_k = cfg.target_k if target_k is None else target_k
    x = mesh.vertices if isinstance(mesh, THedron) else np.asarray(mesh, float)
    pts = np.asarray(points, float)
    R_tot, t_tot = np.eye(3), np.zeros(3)
    cur = pts
    nrm = None if normals is None else np.asarray(normals, float)
    index = KNNIndex(cur)
    y = _targets(x, index, nrm, cfg, target_k)
    F0 = F = cost_F(x, y)
    steps = []
    degenerate = False
    for _ in range(cfg.registration_iters):
        R, t, info = horn_registration(y.reshape(-1, 3), x.reshape(-1, 3))
        degenerate |= info["degenerate"]
        moved = cur @ R.T + t
        mn = None if nrm is None else nrm @ R.T
        idx2 = KNNIndex(moved)
        y2 = _targets(x, idx2, mn, cfg, target_k)
        F2 = cost_F(x, y2)
        if F2 > F:
            break
        cur, nrm, index, y = moved, mn, idx2, y2
        R_tot, t_tot = R @ R_tot, R @ t_tot + t
        improvement = (F - F2) / max(F, 1e-300)
        F = F2
        steps.append(F2)
        if improvement < cfg.outer_tol:
            break
    report = {"F_before": F0, "F_after": F, "steps": len(steps), "degenerate": bool(degenerate),
              "target_k": int(target_k), "mode": "vertex"}
    return cur, R_tot, t_tot, nrm, report


def run_elapses(points, initial: THedron, config: Optional[OptimizerConfig] = None, normals=None,
                on_elapse: Optional[Callable[[int, "ElapseResult"], None]] = None) -> ElapseResult:
    """Fit, then alternate axis re-registration and refitting ``elapses`` times.

    The cloud is moved, never the mesh frame, so the axis of the moved cloud
    is always z; the accumulated transform maps the input cloud onto it.
    """
    cfg = config or OptimizerConfig()
    pts = np.asarray(points, float)
    nrm = normals
    res = fit(pts, initial, cfg, nrm)
    fits = [res]
    regs = []
    R_tot, t_tot = np.eye(3), np.zeros(3)
    out = ElapseResult(res.mesh, pts, R_tot, t_tot, fits, regs)
    F_prev = res.history[-1]["F"]
    for e in range(cfg.elapses):
        pts, R, t, nrm, rep = adjust_axis(res.mesh, pts, cfg, nrm)
        R_tot, t_tot = R @ R_tot, R @ t_tot + t
        res = fit(pts, res.mesh, cfg, nrm)
        fits.append(res)
        regs.append(rep)
        out = ElapseResult(res.mesh, pts, R_tot, t_tot, fits, regs)
        if on_elapse:
            on_elapse(e + 1, out)
        F_new = res.history[-1]["F"]
        if F_prev - F_new < cfg.outer_tol * max(F_prev, 1e-300):
            break
        F_prev = F_new
    return out
