import numpy as np
import pytest

from thedra.geom_core import GeometryError
from thedra.thedron import (ObjParseError, StretchRotation, THedron, build_thedron, export_obj, fit_profile_plane,
                            from_json, import_obj, planarity_residuals, plane_residuals, profile_plane_residual,
                            signed_angle, stretch_rotation_apply, to_json, trapezoid_residual,
                            trapezoid_residuals)


def test_stretch_rotation_examples():
    x = np.array([0.3, -2.0, 7.0])
    assert np.allclose(stretch_rotation_apply(StretchRotation((5, 5), 1.0, 0.0), x), x, atol=1e-15, rtol=0)
    assert np.allclose(stretch_rotation_apply(StretchRotation((0, 0), 2.0, 0.0), (1, 0, 5)), (2, 0, 5))
    assert np.allclose(stretch_rotation_apply(StretchRotation((1, 0), 1.0, np.pi / 2), (2, 0, 3)), (1, 1, 3),
                       atol=1e-15)


def test_stretch_rotation_matrix_and_inverse():
    sr = StretchRotation((0.5, -1.0), 1.7, 0.4)
    pts = np.random.default_rng(0).normal(size=(10, 3))
    hom = np.c_[pts, np.ones(10)] @ sr.matrix().T
    assert np.allclose(hom[:, :3], stretch_rotation_apply(sr, pts))
    back = stretch_rotation_apply(sr.inverse(), stretch_rotation_apply(sr, pts))
    assert np.allclose(back, pts, atol=1e-14)
    with pytest.raises(GeometryError):
        StretchRotation((0, 0), 0.0, 0.1)


def test_signed_angle():
    assert signed_angle((1, 0), (0, 1)) == pytest.approx(np.pi / 2)
    assert signed_angle((1, 0), (0, -1)) == pytest.approx(-np.pi / 2)
    assert signed_angle((1, 0), (-1, 0)) == pytest.approx(np.pi)


def random_thedron(seed, m=6, n=9):
    rng = np.random.default_rng(seed)
    prof = np.c_[-rng.uniform(1.5, 2.5) + 0.3 * np.sin(np.linspace(0, 3, m + 1)), np.linspace(0, 2, m + 1)]
    turn = np.cumsum(np.radians(rng.uniform(5, 15, n)))
    d = [np.array([-1.0, 0.0]), np.zeros(2)]
    for a in turn:
        d.append(d[-1] + rng.uniform(0.3, 0.6) * np.array([np.cos(a), np.sin(a)]))
    etas = np.r_[1.0, rng.uniform(0.95, 1.05, n)]
    return build_thedron(prof, np.array(d), etas)


@pytest.mark.parametrize("seed", range(5))
def test_build_thedron_faces_are_trapezoids(seed):
    T = random_thedron(seed)
    scale = np.max(np.abs(T.vertices))
    assert T.max_trapezoid_residual() <= 1e-12 * scale**4
    assert np.max(np.abs(planarity_residuals(T.vertices))) <= 1e-12 * scale**3
    assert T.max_plane_residual() <= 1e-12 * scale


def test_build_thedron_first_column_canonical():
    prof = np.array([[2.0, 0.0], [2.5, 1.0], [2.2, 2.0]])
    d = np.array([[-1.0, 0], [0, 0], [0.5, 0.2], [0.9, 0.6]])
    T = build_thedron(prof, d, [1.0, 1.1, 0.9])
    assert np.allclose(T.vertices[:, 0], np.c_[prof[:, 0], np.zeros(3), prof[:, 1]])


def test_build_thedron_straight_directrix_degenerates_to_one_strip():
    # all profile planes coincide; identity maps stack copies of the profile
    prof = np.c_[np.linspace(1, 2, 4), np.linspace(0, 1, 4)]
    d = np.c_[np.linspace(-1, 3, 6), np.zeros(6)]
    T = build_thedron(prof, d, np.ones(5))
    assert np.all(trapezoid_residuals(T.vertices) == 0)
    assert np.all(planarity_residuals(T.vertices) == 0)
    assert np.allclose(T.thetas, 0)


def _polygon_directrix(k, side=1.0):
    ext = 2 * np.pi / k
    d = [np.array([-side, 0.0]), np.zeros(2)]
    for j in range(1, k + 1):
        d.append(d[-1] + side * np.array([np.cos(j * ext), np.sin(j * ext)]))
    return np.array(d)


def test_regular_polygon_unit_scalings_give_discrete_involute():
    # each column keeps its distance to the rotation anchor d_j, so the
    # offset from the current vertex grows by one side length per step
    k = 8
    d = _polygon_directrix(k)
    prof = np.c_[np.full(4, -0.5), np.linspace(0, 3, 4)]
    T = build_thedron(prof, d, np.ones(k + 1))
    rows = T.vertices
    assert np.allclose(rows[1:, :, :2], rows[:1, :, :2], atol=1e-12)
    offsets = np.linalg.norm(rows[0, :, :2] - d[1:], axis=1)
    assert np.allclose(offsets, 0.5 + np.arange(k + 1), atol=1e-12)


def test_regular_polygon_constant_offset_gives_prism():
    # the next anchor sees column j at distance side + eta * o; keep it at o
    k, o = 8, 2.0
    d = _polygon_directrix(k)
    eta = (o - 1.0) / o
    prof = np.c_[np.full(4, -o), np.linspace(0, 3, 4)]
    T = build_thedron(prof, d, np.r_[1.0, np.full(k, eta)])
    rows = T.vertices
    # congruent regular k-gons stacked vertically
    assert np.allclose(rows[1:, :, :2], rows[:1, :, :2], atol=1e-12)
    ring = rows[0, :k, :2]
    sides = np.linalg.norm(np.roll(ring, -1, axis=0) - ring, axis=1)
    assert np.allclose(sides, sides[0], atol=1e-12)
    centre = ring.mean(axis=0)
    assert np.allclose(np.linalg.norm(ring - centre, axis=1), np.linalg.norm(ring[0] - centre), atol=1e-12)
    assert np.allclose(rows[0, k], rows[0, 0], atol=1e-12)
    assert T.max_trapezoid_residual() < 1e-24


def test_build_thedron_single_face():
    T = build_thedron([[1.0, 0.0], [1.5, 1.0]], [[-1.0, 0], [0, 0], [0.6, 0.8]], [1.0, 1.3])
    assert T.vertices.shape == (2, 2, 3)
    u = T.vertices[0, 1] - T.vertices[0, 0]
    w = T.vertices[1, 1] - T.vertices[1, 0]
    assert np.linalg.norm(np.cross(u, w)) <= 1e-15
    assert trapezoid_residual(T, 0, 0) <= 1e-30


def test_build_thedron_input_checks():
    with pytest.raises(GeometryError):
        build_thedron([[1, 0], [1, 1]], [[-1, 0], [0, 0]], [1.0])
    with pytest.raises(GeometryError):
        build_thedron([[1, 0], [1, 1]], [[-1, 0], [0, 0], [1, 1]], [1.0, 0.0])
    with pytest.raises(GeometryError):
        build_thedron([[1, 0], [1, 1]], [[-1, 0], [0, 0], [1, 1]], [2.0, 1.0])


def test_negative_eta_flips_side():
    prof = [[1.0, 0.0], [1.2, 1.0]]
    d = [[-1.0, 0], [0, 0], [1.0, 0.5]]
    T = build_thedron(prof, d, [1.0, -1.0])
    assert T.max_trapezoid_residual() < 1e-24
    # column 1 lies on the far side of the anchor d_1 = 0 compared to column 0
    assert np.allclose(np.abs(T.vertices[:, 1, :2] @ np.array([1.0, 0.5]) / np.sqrt(1.25)),
                       np.linalg.norm(T.vertices[:, 0, :2], axis=1))


def test_trapezoid_residual_examples():
    sq = np.array([[[0, 0, 0], [1, 0, 0]], [[0, 1, 0], [1, 1, 0]]], float)
    assert trapezoid_residual(sq, 0, 0) == 0
    quad = np.array([[[0, 0, 0], [1, 0, 0]], [[0, 1, 0], [1, 2, 0]]], float)
    assert trapezoid_residual(quad, 0, 0) == pytest.approx(1.0)


def test_profile_plane_residual_examples():
    col = np.zeros((3, 1, 3))
    col[:, 0, 2] = [0, 1, 2]
    col[:, 0, 1] = [3, -1, 2]
    assert np.all(profile_plane_residual(col, 0, (1, 0, 0)) == 0)
    V = np.array([[[1.0, 1.0, 4.0]], [[1.0, 1.0, -2.0]]])
    assert np.all(profile_plane_residual(V, 0, (1, -1, 0)) == 0)
    assert profile_plane_residual(np.array([[[1.0, 0, 0]], [[1.0, 0, 0]]]), 0, (1, 0, 1))[0] == 2.0
    with pytest.raises(GeometryError):
        profile_plane_residual(V, 0, (0, 0, 1))


def test_fit_profile_plane_examples():
    col = np.c_[np.ones(4), np.arange(4.0), np.arange(4.0) ** 2]
    assert np.allclose(fit_profile_plane(col), (1, 0, -1))
    c = fit_profile_plane(np.array([[0.0, 0, 5], [1, 1, -3]]))
    assert np.allclose(np.abs(c), np.array([1, 1, 0]) / np.sqrt(2))
    assert c[0] * c[1] < 0
    coeffs, flag = fit_profile_plane(np.array([[2.0, 3, 0], [2, 3, 1]]), return_flag=True)
    assert flag and np.allclose(coeffs, (1, 0, -2))


def test_fit_profile_plane_noisy_tls():
    rng = np.random.default_rng(3)
    t = rng.uniform(-2, 2, 200)
    n = np.array([0.6, 0.8])
    base = np.c_[t * -n[1], t * n[0]] + 0.7 * n
    pts = np.c_[base + rng.normal(scale=1e-3, size=(200, 2)), rng.uniform(0, 1, 200)]
    c = fit_profile_plane(pts)
    assert c[0] ** 2 + c[1] ** 2 == pytest.approx(1.0)
    res = pts[:, 0] * c[0] + pts[:, 1] * c[1] + c[2]
    assert np.sqrt(np.mean(res**2)) <= 1.5e-3
    assert np.allclose(c, (0.6, 0.8, -0.7), atol=1e-3)


def test_plane_residuals_match_per_column():
    T = random_thedron(7)
    R = plane_residuals(T.vertices, T.planes)
    for j in range(T.shape[1]):
        assert np.allclose(R[:, j], profile_plane_residual(T, j, T.planes[j]))


def test_obj_minimal_and_roundtrip():
    V = np.arange(12.0).reshape(2, 2, 3) / 7
    text = export_obj(V).decode()
    assert sum(1 for l in text.splitlines() if l.startswith("v ")) == 4
    faces = [l for l in text.splitlines() if l.startswith("f ")]
    assert faces == ["f 1 2 4 3"]
    T = random_thedron(2)
    assert np.array_equal(import_obj(export_obj(T)), T.vertices)


def test_obj_without_header_uses_face_stride():
    T = random_thedron(4, m=3, n=4)
    body = b"\n".join(l for l in export_obj(T).splitlines() if not l.startswith(b"#"))
    assert np.array_equal(import_obj(body), T.vertices)


def test_obj_rejects_non_quads():
    bad = b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"
    with pytest.raises(ObjParseError, match="line 4"):
        import_obj(bad)
    with pytest.raises(ObjParseError, match="line 1"):
        import_obj(b"v 0 0\n")


def test_json_roundtrip():
    T = random_thedron(1)
    U = from_json(to_json(T), T.vertices)
    for a in ("planes", "profile", "directrix", "etas", "thetas"):
        assert np.array_equal(getattr(U, a), getattr(T, a))


def test_thedron_shape_validation():
    with pytest.raises(GeometryError):
        THedron(np.zeros((1, 3, 3)))
