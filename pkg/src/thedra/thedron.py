"""T-hedra: quad meshes with planar trapezoidal faces.

Column j of the vertex grid is a profile polyline in the vertical plane
through the directrix edge (d_j, d_{j+1}).  Column j is the image of column
j-1 under a stretch-rotation about the vertical line through d_j: rotation by
the signed angle between the edge directions e_{j-1}, e_j, and scaling by
|eta_j|.  A negative eta_j places the column on the far side of the anchor.

Row index i runs over profile vertices (heights), column index j over the
trajectory direction.  Grids have shape (m+1, n+1, 3).
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom_core import GeometryError

__all__ = [
    "ObjParseError",
    "StretchRotation",
    "THedron",
    "signed_angle",
    "stretch_rotation_apply",
    "build_thedron",
    "trapezoid_residual",
    "trapezoid_residuals",
    "planarity_residuals",
    "profile_plane_residual",
    "plane_residuals",
    "fit_profile_plane",
    "fit_profile_planes",
    "export_obj",
    "import_obj",
    "to_json",
    "from_json",
]


class ObjParseError(ValueError):
    """Malformed OBJ input; message includes the offending line number."""


@dataclass(frozen=True)
class StretchRotation:
    anchor: np.ndarray
    scale: float
    angle: float

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError("stretch-rotation scale must be positive")
        object.__setattr__(self, "anchor", np.asarray(self.anchor, float)[:2])

    def inverse(self) -> "StretchRotation":
        return StretchRotation(self.anchor, 1.0 / self.scale, -self.angle)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form T S R T^-1."""
        c, s = np.cos(self.angle), np.sin(self.angle)
        T = np.eye(4)
        T[:2, 3] = self.anchor
        Ti = np.eye(4)
        Ti[:2, 3] = -self.anchor
        S = np.diag([self.scale, self.scale, 1.0, 1.0])
        R = np.eye(4)
        R[:2, :2] = [[c, -s], [s, c]]
        return T @ S @ R @ Ti


def stretch_rotation_apply(sr: StretchRotation, x) -> np.ndarray:
    """Apply to one point or an (N, 3) array; z is left untouched."""
    x = np.asarray(x, float)
    c, s = np.cos(sr.angle), np.sin(sr.angle)
    rel = x[..., :2] - sr.anchor
    xy = sr.anchor + sr.scale * np.stack([c * rel[..., 0] - s * rel[..., 1],
                                          s * rel[..., 0] + c * rel[..., 1]], axis=-1)
    out = x.copy()
    out[..., :2] = xy
    return out


def signed_angle(u, v) -> float:
    """Signed angle from 2D vector u to v in (-pi, pi]."""
    return float(np.arctan2(u[0] * v[1] - u[1] * v[0], u[0] * v[0] + u[1] * v[1]))


@dataclass
class THedron:
    """Vertex grid plus the data that generated it (when known).

    ``planes`` holds normalized (a, b, c) per column with a x + b y + c = 0.
    ``directrix`` holds d_0 .. d_{n+1}; ``etas`` and ``thetas`` are indexed by
    column (entry 0 unused: eta_0 = 1, theta_0 = 0).  ``profile`` is (m+1, 2):
    signed distance from d_1 along e_0, and height.
    """

    vertices: np.ndarray
    planes: Optional[np.ndarray] = None
    profile: Optional[np.ndarray] = None
    directrix: Optional[np.ndarray] = None
    etas: Optional[np.ndarray] = None
    thetas: Optional[np.ndarray] = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.vertices, float)
        if v.ndim != 3 or v.shape[2] != 3 or v.shape[0] < 2 or v.shape[1] < 2:
            raise GeometryError(f"vertex grid must be (m+1, n+1, 3) with m, n >= 1, got {v.shape}")
        self.vertices = v
        if self.planes is None:
            self.planes = fit_profile_planes(v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.vertices.shape[0], self.vertices.shape[1]

    def max_trapezoid_residual(self) -> float:
        return float(np.max(trapezoid_residuals(self.vertices)))

    def max_plane_residual(self) -> float:
        return float(np.max(np.abs(plane_residuals(self.vertices, self.planes))))


def _unit_normal_of(e):
    return np.array([-e[1], e[0]])


def build_thedron(profile, directrix, etas) -> THedron:
    """Construct a T-hedron by successive stretch-rotations.

    ``profile``: (m+1, 2) pairs (p_x, p_z); column 0 is d_1 + p_x e_0 at height
    p_z, which is (p_x, 0, p_z) for the canonical directrix start
    d_0 = (-1, 0), d_1 = (0, 0).
    ``directrix``: (n+2, 2) points d_0 .. d_{n+1}.
    ``etas``: (n+1,) with etas[0] = 1 and no zeros.
    """
    prof = np.asarray(profile, float).reshape(-1, 2)
    d = np.asarray(directrix, float)[:, :2]
    eta = np.asarray(etas, float)
    n1 = len(d) - 1  # number of columns
    if len(d) < 3:
        raise GeometryError("directrix needs at least 3 points (two columns)")
    if len(eta) != n1:
        raise GeometryError(f"expected {n1} scalings, got {len(eta)}")
    if np.any(eta == 0):
        raise GeometryError("scalings must be non-zero")
    if eta[0] != 1:
        raise GeometryError("eta_0 must equal 1")
    edges = np.diff(d, axis=0)
    lengths = np.linalg.norm(edges, axis=1)
    if np.any(lengths == 0):
        raise GeometryError("directrix has a zero-length edge")
    e = edges / lengths[:, None]
    m1 = len(prof)
    V = np.empty((m1, n1, 3))
    V[:, 0, :2] = d[1] + prof[:, 0:1] * e[0]
    V[:, :, 2] = prof[:, 1:2]
    thetas = np.zeros(n1)
    for j in range(1, n1):
        target = e[j] if eta[j] > 0 else -e[j]
        thetas[j] = signed_angle(e[j - 1], target)
        sr = StretchRotation(d[j], abs(eta[j]), thetas[j])
        V[:, j] = stretch_rotation_apply(sr, V[:, j - 1])
    planes = np.empty((n1, 3))
    for j in range(n1):
        nrm = _unit_normal_of(e[j])
        planes[j] = (nrm[0], nrm[1], -nrm @ d[j])
    # report the rigid motion taking the input to the canonical start
    ang = -np.arctan2(e[0][1], e[0][0])
    report = {"canonical_rotation": float(ang), "canonical_translation": (-d[1]).tolist(),
              "l": lengths.tolist()}
    return THedron(V, planes, prof.copy(), d.copy(), eta.copy(), thetas, report)


def trapezoid_residuals(V) -> np.ndarray:
    """|(x(i,j+1)-x(i,j)) x (x(i+1,j+1)-x(i+1,j))|^2 for every face, shape (m, n)."""
    V = np.asarray(V, float)
    u = V[:-1, 1:] - V[:-1, :-1]
    w = V[1:, 1:] - V[1:, :-1]
    return np.sum(np.cross(u, w) ** 2, axis=-1)


def trapezoid_residual(mesh, i: int, j: int) -> float:
    V = mesh.vertices if isinstance(mesh, THedron) else np.asarray(mesh, float)
    u = V[i, j + 1] - V[i, j]
    w = V[i + 1, j + 1] - V[i + 1, j]
    return float(np.sum(np.cross(u, w) ** 2))


def planarity_residuals(V) -> np.ndarray:
    """Signed tetrahedron volume of each face's four vertices, shape (m, n)."""
    V = np.asarray(V, float)
    a, b, c, d = V[:-1, :-1], V[:-1, 1:], V[1:, 1:], V[1:, :-1]
    return np.einsum("...i,...i->...", np.cross(b - a, c - a), d - a) / 6.0


def profile_plane_residual(mesh, j: int, coeffs) -> np.ndarray:
    """a x + b y + c for every vertex of column j."""
    a, b, c = (float(v) for v in coeffs)
    if a == 0 and b == 0:
        raise GeometryError("plane coefficients (a, b) must not both vanish")
    V = mesh.vertices if isinstance(mesh, THedron) else np.asarray(mesh, float)
    col = V[:, j]
    return a * col[:, 0] + b * col[:, 1] + c


def plane_residuals(V, planes) -> np.ndarray:
    V = np.asarray(V, float)
    P = np.asarray(planes, float)
    return V[..., 0] * P[:, 0] + V[..., 1] * P[:, 1] + P[:, 2]


def fit_profile_plane(column, return_flag: bool = False):
    """Total-least-squares vertical plane through the xy-projections.

    Sign convention: the first non-negligible of (a, b) is positive.  When
    all projections coincide the plane x = x0 is returned and flagged
    degenerate (visible with ``return_flag=True``).
    """
    pts = np.asarray(column, float)[:, :2]
    ctr = pts.mean(axis=0)
    rel = pts - ctr
    scale = np.max(np.abs(pts)) + 1.0
    if np.max(np.linalg.norm(rel, axis=1)) <= 1e-14 * scale:
        coeffs, degenerate = np.array([1.0, 0.0, -ctr[0]]), True
    else:
        _, _, vt = np.linalg.svd(rel, full_matrices=False)
        nrm = vt[-1]
        if nrm[0] < -1e-12 or (abs(nrm[0]) <= 1e-12 and nrm[1] < 0):
            nrm = -nrm
        coeffs, degenerate = np.array([nrm[0], nrm[1], -nrm @ ctr]), False
    return (coeffs, degenerate) if return_flag else coeffs


def fit_profile_planes(V) -> np.ndarray:
    V = np.asarray(V, float)
    return np.array([fit_profile_plane(V[:, j]) for j in range(V.shape[1])])


# --- I/O ---------------------------------------------------------------------

def export_obj(mesh) -> bytes:
    """OBJ text: vertices row-major, one quad per face, 17 significant digits."""
    V = mesh.vertices if isinstance(mesh, THedron) else np.asarray(mesh, float)
    rows, cols = V.shape[:2]
    buf = io.StringIO()
    buf.write(f"# thedron grid {rows} {cols}\n")
    for p in V.reshape(-1, 3):
        buf.write("v {:.17g} {:.17g} {:.17g}\n".format(*p))
    for i in range(rows - 1):
        for j in range(cols - 1):
            a = i * cols + j + 1
            buf.write(f"f {a} {a + 1} {a + cols + 1} {a + cols}\n")
    return buf.getvalue().encode("ascii")


def import_obj(data) -> np.ndarray:
    """Parse OBJ produced by :func:`export_obj` (or any grid-ordered quad OBJ)."""
    text = data.decode("ascii") if isinstance(data, (bytes, bytearray)) else str(data)
    verts, faces, declared = [], [], None
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "#":
            if len(tok) == 5 and tok[1:3] == ["thedron", "grid"]:
                declared = (int(tok[3]), int(tok[4]))
            continue
        if tok[0] == "v":
            if len(tok) < 4:
                raise ObjParseError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(x) for x in tok[1:4]])
            except ValueError:
                raise ObjParseError(f"line {lineno}: bad vertex coordinate") from None
        elif tok[0] == "f":
            if len(tok) != 5:
                raise ObjParseError(f"line {lineno}: face with {len(tok) - 1} vertices; only quads are accepted")
            try:
                faces.append([int(x.split("/")[0]) for x in tok[1:]])
            except ValueError:
                raise ObjParseError(f"line {lineno}: bad face index") from None
        elif tok[0] in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib"):
            continue
        else:
            raise ObjParseError(f"line {lineno}: unknown record {tok[0]!r}")
    V = np.array(verts, float)
    if declared is not None:
        rows, cols = declared
    elif faces:
        f0 = faces[0]
        cols = f0[3] - f0[0]
        if cols <= 1 or len(V) % cols:
            raise ObjParseError("line ?: faces are not in grid order")
        rows = len(V) // cols
    else:
        raise ObjParseError("line ?: no faces; grid shape unknown")
    if rows * cols != len(V):
        raise ObjParseError(f"grid {rows}x{cols} does not match {len(V)} vertices")
    return V.reshape(rows, cols, 3)


def to_json(mesh: THedron) -> str:
    def arr(a):
        return None if a is None else np.asarray(a).tolist()
    return json.dumps({
        "shape": list(mesh.shape),
        "profile": arr(mesh.profile),
        "directrix": arr(mesh.directrix),
        "etas": arr(mesh.etas),
        "thetas": arr(mesh.thetas),
        "planes": arr(mesh.planes),
        "report": mesh.report,
    }, indent=1)


def from_json(text: str, vertices) -> THedron:
    d = json.loads(text)

    def arr(k):
        return None if d.get(k) is None else np.array(d[k], float)
    return THedron(np.asarray(vertices, float), arr("planes"), arr("profile"), arr("directrix"),
                   arr("etas"), arr("thetas"), d.get("report", {}))
