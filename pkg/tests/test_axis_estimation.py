import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from thedra.axis_estimation import (_SPHERE_M, _monomials, AxisError, AxisObjective, angle_between_axes, axis_cost, estimate_axis,
                                    fibonacci_sphere, greedy_refine, isotropic_distance, projected_normal_element,
                                    quartic_residual)
from thedra.geom_core import PointCloud
from thedra.tsurface_gen import benchmark_spec, sample_tsurface_points

Z = np.array([0.0, 0.0, 1.0])


def axial_cloud(k, q=2000, seed=0):
    """Points and exact normals of (rho e^{kt} cos t, rho e^{kt} sin t, z) over a half-circle profile."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 3, q)
    s = rng.uniform(0.2, np.pi - 0.2, q)
    rho, drho = 2.5 - np.sin(s), -np.cos(s)
    z, dz = np.cos(s), -np.sin(s)
    e = np.exp(k * t)
    X = np.c_[rho * e * np.cos(t), rho * e * np.sin(t), z]
    Xt = np.c_[rho * e * (k * np.cos(t) - np.sin(t)), rho * e * (k * np.sin(t) + np.cos(t)), np.zeros(q)]
    Xs = np.c_[drho * e * np.cos(t), drho * e * np.sin(t), dz]
    n = np.cross(Xt, Xs)
    return PointCloud(X, normals=n / np.linalg.norm(n, axis=1, keepdims=True))


def tilted(deg, az=0.0):
    r = np.radians(deg)
    return np.array([np.sin(r) * np.cos(az), np.sin(r) * np.sin(az), np.cos(r)])


@pytest.mark.parametrize("x, n, nproj, nbar, nu", [
    ((1, 0, 0), (1, 0, 0), (1, 0, 0), (0, 0, 0), 1.0),
    ((0, 1, 0), (0, 1, 0), (0, 1, 0), (0, 0, 0), 1.0),
    ((1, 0, 7), (0, 1, 0), (0, 1, 0), (0, 0, 1), 0.0),
])
def test_projected_normal_element_examples(x, n, nproj, nbar, nu):
    e = projected_normal_element(x, n, Z)
    assert np.allclose(e.n_proj, nproj, atol=0)
    assert np.allclose(e.nbar, nbar, atol=0)
    assert e.nu == nu
    assert e.n_proj @ e.nbar == 0.0


def test_projected_normal_element_parallel_normal_rejected():
    with pytest.raises(AxisError, match="parallel"):
        projected_normal_element((1, 2, 3), (0, 0, 1), Z, index=5)


@pytest.mark.parametrize("k", [0.0, np.tan(0.2)])
def test_quartic_vanishes_at_true_axis(k):
    c = axial_cloud(k, q=200)
    obj = AxisObjective.from_cloud(c)
    q = obj.q_values(Z)
    assert np.max(np.abs(q)) <= 1e-10 * obj.scale**4
    # perturbed axis: residuals clearly non-zero in aggregate
    assert np.sum(obj.q_values(tilted(5, 1.0)) ** 2) > 1e6 * np.sum(q**2)


def test_quartic_residual_single_quad_matches_objective_rows():
    c = axial_cloud(0.1, q=100, seed=3)
    obj = AxisObjective.from_cloud(c)
    a = np.array([0.3, -0.2, 0.9])
    rows = obj.q_values(a)
    for r in range(5):
        assert quartic_residual(obj.X4[r], obj.N4[r], a) == pytest.approx(rows[r], rel=1e-12, abs=1e-300)


def test_quartic_pivot_only_rescales():
    rng = np.random.default_rng(8)
    x4, n4 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    # 1D slice of directions: sign pattern and roots agree between pivots
    ts = np.linspace(-1.3, 1.3, 301)
    A = np.c_[np.cos(ts), 0.4 * np.ones_like(ts), np.sin(ts) + 1.5]
    frame = np.array([quartic_residual(x4, n4, a) for a in A])
    piv = np.array([quartic_residual(x4, n4, a, pivot=(0, 1)) for a in A])
    aw = A[:, 2] / np.linalg.norm(A, axis=1)
    assert np.all(aw > 0)
    assert np.allclose(np.abs(piv), np.abs(frame) * aw, rtol=1e-9, atol=1e-14)
    roots = lambda v: np.nonzero(np.diff(np.sign(v)) != 0)[0]
    assert len(roots(frame)) > 0
    assert np.array_equal(roots(piv), roots(frame))


@pytest.mark.parametrize("k", [0.0, np.tan(0.2)])
def test_axis_cost_noiseless_and_tilted(k):
    c = axial_cloud(k)
    obj = AxisObjective.from_cloud(c)
    f0 = obj(Z)
    assert f0 <= 1e-16 * len(c) * obj.scale**8
    assert obj(tilted(10)) >= 1e3 * max(f0, 1e-300)
    assert axis_cost(c, Z) == pytest.approx(f0, rel=1e-9, abs=1e-30)


def test_axis_cost_even():
    c = axial_cloud(0.3, q=500, seed=2)
    obj = AxisObjective.from_cloud(c)
    for a in np.random.default_rng(0).normal(size=(20, 3)):
        assert obj(-a) == pytest.approx(obj(a), rel=1e-12)


def test_monomial_form_matches_determinants():
    P = sample_tsurface_points(benchmark_spec(), 800, seed=0)
    obj = AxisObjective.from_cloud(PointCloud(P))
    assert obj.fit_residual < 1e-10
    for a in np.random.default_rng(1).normal(size=(15, 3)):
        assert obj(a) == pytest.approx(obj.direct(a), rel=1e-9)


def test_gradient_matches_central_differences():
    obj = AxisObjective.from_cloud(axial_cloud(0.2, q=400, seed=5))
    rng = np.random.default_rng(6)
    for _ in range(10):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        h = 1e-6
        fd = np.array([(obj(a + h * e) - obj(a - h * e)) / (2 * h) for e in np.eye(3)])
        g = obj.gradient(a)
        assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


def test_too_few_points():
    c = axial_cloud(0.0, q=8)
    with pytest.raises(AxisError):
        AxisObjective.from_cloud(c)


def test_fibonacci_sphere_unit():
    F = fibonacci_sphere(64)
    assert F.shape == (64, 3)
    assert np.allclose(np.linalg.norm(F, axis=1), 1.0)


def test_estimate_axis_benchmark_noiseless():
    P = sample_tsurface_points(benchmark_spec(), 3000, seed=1)
    cands = estimate_axis(PointCloud(P))
    best = cands[0]
    assert angle_between_axes(best.direction, Z) < 0.5
    assert abs(np.linalg.norm(best.direction) - 1) < 1e-12
    assert all(c.cost >= 0 for c in cands)
    assert [c.cost for c in cands] == sorted(c.cost for c in cands)


@pytest.mark.parametrize("k", [0.0, np.tan(0.25)])
def test_estimate_axis_exact_normals(k):
    cands = estimate_axis(axial_cloud(k, q=1500, seed=4))
    assert angle_between_axes(cands[0].direction, Z) < 1e-4


def test_estimate_axis_rotation_equivariant():
    c = axial_cloud(0.15, q=1500, seed=9)
    R = Rotation.from_rotvec([0.4, -0.9, 0.3]).as_matrix()
    a = estimate_axis(c)[0].direction
    b = estimate_axis(PointCloud(c.points @ R.T, normals=c.normals @ R.T))[0].direction
    assert angle_between_axes(R @ a, b) < np.degrees(1e-6)
    assert angle_between_axes(R @ Z, b) < 1e-4


def test_isotropic_distance_example():
    assert isotropic_distance((0, 0, 0), (1, 1, 1), Z) == pytest.approx(np.sqrt(2))
    assert isotropic_distance((0, 0, 0), (0, 0, 4), Z) == 0.0


def test_greedy_refine_fixed_point_on_optimal_axis():
    c = axial_cloud(0.0, q=800, seed=11)
    r = greedy_refine(c, Z)
    assert r.converged
    assert angle_between_axes(r.direction, Z) < 1e-6


def test_greedy_refine_cost_non_increasing_on_noisy_data():
    c = axial_cloud(0.0, q=1500, seed=12)
    noisy = PointCloud(c.points + np.random.default_rng(2).normal(scale=1e-3, size=c.points.shape))
    start = estimate_axis(noisy)[0].direction
    r = greedy_refine(noisy, start)
    assert len(r.costs) >= 1
    assert np.all(np.diff(r.costs) <= 0)
    # isotropic re-clustering pulls the noisy estimate toward the true axis
    assert angle_between_axes(r.direction, Z) < angle_between_axes(start, Z)


def test_sphere_moments_match_quadrature():
    # independent route: Gauss-Legendre in cos(polar) times uniform azimuth
    u, wu = np.polynomial.legendre.leggauss(12)
    phi = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    U, PH = np.meshgrid(u, phi, indexing="ij")
    r = np.sqrt(1 - U**2)
    dirs = np.c_[(r * np.cos(PH)).ravel(), (r * np.sin(PH)).ravel(), U.ravel()]
    w = np.repeat(wu, len(phi)) / (2 * len(phi))
    m = _monomials(dirs)
    assert np.allclose((m * w[:, None]).T @ m, _SPHERE_M, atol=1e-14)
    assert _SPHERE_M[0, 0] == pytest.approx(1 / 9)  # mean of z^8


def test_row_norms_rotation_invariant():
    c = axial_cloud(0.1, q=300, seed=13)
    R = Rotation.from_rotvec([0.7, 0.2, -1.1]).as_matrix()
    a = AxisObjective.from_cloud(c)
    b = AxisObjective.from_cloud(PointCloud(c.points @ R.T, normals=c.normals @ R.T))
    assert np.array_equal(a.usable, b.usable)
    assert np.allclose(a.row_norms, b.row_norms, rtol=1e-9)
    # direct check on one row: RMS of Q over many directions
    d = fibonacci_sphere(20000)
    rms = np.sqrt(np.mean((_monomials(d) @ a.coeffs[:, 0]) ** 2))
    assert a.row_norms[0] == pytest.approx(rms, rel=1e-3)


def test_single_bad_normal_does_not_capture_estimate():
    c = axial_cloud(0.0, q=1500, seed=14)
    N = c.normals.copy()
    # a handful of grossly wrong normals
    rng = np.random.default_rng(3)
    bad = rng.choice(len(N), 15, replace=False)
    N[bad] = rng.normal(size=(15, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    best = estimate_axis(PointCloud(c.points, normals=N))[0]
    assert angle_between_axes(best.direction, Z) < 0.5
