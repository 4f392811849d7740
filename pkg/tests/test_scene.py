import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from emdsplat import scene as sc
from emdsplat.errors import DegenerateCovarianceError, NormalizationError, ShapeError

from .strategies import positive_scales, unit_quats, unit_vectors


def _to_scipy(q):
    return Rotation.from_quat([q[1], q[2], q[3], q[0]])


# -- density -----------------------------------------------------------------------

def test_density_at_mean_is_one():
    cov = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 0.5]])
    assert sc.gaussian_density([1, 2, 3], [1, 2, 3], cov) == 1.0


def test_density_unit_offset_identity_cov():
    assert sc.gaussian_density([1, 0, 0], [0, 0, 0], np.eye(3)) == pytest.approx(0.6065306597126334, abs=1e-15)


def test_density_scaled_axis():
    # scalar oracle: (2^2 / 4) = 1 -> exp(-0.5)
    v = sc.gaussian_density([2, 0, 0], [0, 0, 0], np.diag([4.0, 1.0, 1.0]))
    assert v == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_density_singular_raises():
    with pytest.raises(DegenerateCovarianceError):
        sc.gaussian_density([0, 0, 0], [1, 0, 0], np.diag([1.0, 1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(unit_quats(), positive_scales(), unit_vectors(), unit_quats())
def test_density_rotation_invariant(q, s, d, q_rot):
    cov = sc.covariance_from_rotation_scale(q, s)
    r = sc.quat_to_rotmat(q_rot)
    a = sc.gaussian_density(0.7 * d, np.zeros(3), cov)
    b = sc.gaussian_density(r @ (0.7 * d), np.zeros(3), r @ cov @ r.T)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


# -- covariance ------------------------------------------------------------------

def test_covariance_identity_rotation():
    cov = sc.covariance_from_rotation_scale([1, 0, 0, 0], [1, 2, 3])
    np.testing.assert_array_equal(cov, np.diag([1.0, 4.0, 9.0]))


def test_covariance_quarter_turn_about_z():
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    r = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    s = np.diag([2.0, 1.0, 1.0])
    oracle = r @ s @ s.T @ r.T
    np.testing.assert_allclose(sc.covariance_from_rotation_scale(q, [2, 1, 1]), oracle, atol=1e-15)
    np.testing.assert_allclose(oracle, np.diag([1.0, 4.0, 1.0]))


def test_covariance_rejects_unnormalized():
    with pytest.raises(NormalizationError):
        sc.covariance_from_rotation_scale([1.0, 0.1, 0, 0], [1, 1, 1])


@settings(max_examples=100, deadline=None)
@given(unit_quats(), positive_scales())
def test_covariance_symmetric_psd(q, s):
    cov = sc.covariance_from_rotation_scale(q, s)
    assert np.max(np.abs(cov - cov.T)) <= 1e-12
    assert np.linalg.eigvalsh(cov).min() >= -1e-12 * np.max(s) ** 2


def test_batched_covariances_match_single():
    rng = np.random.default_rng(0)
    q = sc.quat_normalize(rng.normal(size=(6, 4)))[0]
    s = rng.uniform(0.1, 2.0, size=(6, 3))
    cov, _ = sc.covariances(q, s)
    for i in range(6):
        np.testing.assert_allclose(cov[i], sc.covariance_from_rotation_scale(q[i], s[i]), atol=1e-14)


# -- quaternions -------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(unit_quats())
def test_rotmat_matches_scipy(q):
    np.testing.assert_allclose(sc.quat_to_rotmat(q), _to_scipy(q).as_matrix(), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(unit_quats(), unit_quats())
def test_hamilton_product_composes_rotations(p, q):
    r = sc.quat_to_rotmat(sc.quat_multiply(p, q))
    np.testing.assert_allclose(r, (_to_scipy(p) * _to_scipy(q)).as_matrix(), atol=1e-12)


def test_hamilton_basis_products():
    i, j, k = np.eye(4)[1], np.eye(4)[2], np.eye(4)[3]
    np.testing.assert_array_equal(sc.quat_multiply(i, j), k)
    np.testing.assert_array_equal(sc.quat_multiply(j, i), -k)
    np.testing.assert_array_equal(sc.quat_multiply(i, i), [-1, 0, 0, 0])


@settings(max_examples=100, deadline=None)
@given(unit_quats())
def test_rotmat_to_quat_round_trip(q):
    back = sc.rotmat_to_quat(sc.quat_to_rotmat(q))
    assert back[0] >= 0
    # q and -q are the same rotation; w = 0 leaves the sign open
    assert abs(abs(back @ q) - 1.0) <= 1e-9


# -- spherical harmonics ---------------------------------------------------------------

def test_sh_degree0_constant():
    k = np.array([[0.3, -1.0, 2.0]])
    for d in ([0, 0, 1], [1, 0, 0], [0.6, 0.8, 0.0]):
        np.testing.assert_allclose(sc.sh_eval(k, d, 0), 0.28209479177387814 * k[0], rtol=1e-15)


def test_sh_degree1_z_coefficient():
    k = np.zeros((4, 3))
    k[2] = 1.0  # (l=1, m=0) -> basis 0.48860251 * z
    np.testing.assert_allclose(sc.sh_eval(k, [0, 0, 1], 1), [0.4886025119029199] * 3, rtol=1e-15)


def test_sh_constants_closed_form():
    assert sc.SH_C0 == pytest.approx(0.5 / np.sqrt(np.pi), rel=1e-15)
    assert sc.SH_C1 == pytest.approx(np.sqrt(3 / (4 * np.pi)), rel=1e-15)
    assert sc.SH_C2_XY == pytest.approx(0.5 * np.sqrt(15 / np.pi), rel=1e-15)
    assert sc.SH_C2_Z == pytest.approx(0.25 * np.sqrt(5 / np.pi), rel=1e-15)
    assert sc.SH_C2_XX == pytest.approx(0.25 * np.sqrt(15 / np.pi), rel=1e-15)


def test_sh_zero_coeffs():
    np.testing.assert_array_equal(sc.sh_eval(np.zeros((9, 3)), [0, 1, 0], 2), np.zeros(3))


def test_sh_shape_mismatch():
    with pytest.raises(ShapeError):
        sc.sh_eval(np.zeros((4, 3)), [0, 0, 1], 2)


def test_sh_degree2_orthonormal_on_sphere():
    # midpoint quadrature on a lat-long grid
    th = (np.arange(400) + 0.5) * np.pi / 400
    ph = (np.arange(800) + 0.5) * 2 * np.pi / 800
    t, p = np.meshgrid(th, ph, indexing="ij")
    d = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], -1)
    w = (np.sin(t) * (np.pi / 400) * (2 * np.pi / 800))[..., None]
    b = sc.sh_basis(d, 2).reshape(-1, 9)
    gram = (b * w.reshape(-1, 1)).T @ b
    np.testing.assert_allclose(gram, np.eye(9), atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(unit_vectors(), st.integers(0, 2), st.integers(0, 2**31 - 1))
def test_sh_linear(d, degree, seed):
    rng = np.random.default_rng(seed)
    n = sc.num_sh_coeffs(degree)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    np.testing.assert_allclose(sc.sh_eval(a + b, d, degree), sc.sh_eval(a, d, degree) + sc.sh_eval(b, d, degree),
                               atol=1e-12)


def test_sh_basis_grad_matches_fd():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(5, 3))
    g = sc.sh_basis_grad(d, 2)
    h = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        num = (sc.sh_basis(d + e, 2) - sc.sh_basis(d - e, 2)) / (2 * h)
        np.testing.assert_allclose(g[..., a], num, atol=1e-8)


# -- projection ----------------------------------------------------------------------------

def _camera(**kw):
    args = dict(fx=100.0, fy=90.0, cx=32.0, cy=24.0, width=64, height=48,
                rotation=np.eye(3), translation=np.zeros(3))
    args.update(kw)
    return sc.Camera(**args)


def test_project_on_axis():
    p = sc.project_gaussian([0, 0, 5.0], np.eye(3) * 0.01, _camera())
    assert not p.culled
    np.testing.assert_allclose(p.mu2d, [32.0, 24.0])


def test_project_isotropic_on_axis():
    sigma, z = 0.2, 4.0
    p = sc.project_gaussian([0, 0, z], np.eye(3) * sigma**2, _camera())
    expected = np.diag([(100 * sigma / z) ** 2, (90 * sigma / z) ** 2]) + sc.LOWPASS_PAD * np.eye(2)
    np.testing.assert_allclose(p.cov2d, expected, atol=1e-12)


def test_project_behind_camera_culled():
    assert sc.project_gaussian([0, 0, -1.0], np.eye(3), _camera()).culled
    assert sc.project_gaussian([0, 0, sc.NEAR_PLANE], np.eye(3), _camera()).culled


@settings(max_examples=100, deadline=None)
@given(unit_quats(), positive_scales(), st.floats(0.5, 20.0), st.floats(-1, 1), st.floats(-1, 1))
def test_project_cov2d_eigs_above_pad(q, s, z, x, y):
    p = sc.project_gaussian([x, y, z], sc.covariance_from_rotation_scale(q, s), _camera())
    assert np.allclose(p.cov2d, p.cov2d.T, atol=1e-12)
    assert np.linalg.eigvalsh(p.cov2d).min() >= sc.LOWPASS_PAD - 1e-9


# -- types -----------------------------------------------------------------------------

def test_gaussian_set_validation():
    g = sc.GaussianSet(np.zeros((2, 3)), np.ones((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)),
                       np.array([0.0, 1.0]), np.zeros((2, 4, 3)), np.zeros((2, 5)))
    g.validate()
    assert g.count == 2 and g.sh_degree == 1
    bad = g.copy()
    bad.quat[0] = [1.0, 1e-2, 0, 0]
    with pytest.raises(NormalizationError):
        bad.validate()
    with pytest.raises(ShapeError):
        sc.GaussianSet(np.zeros((2, 3)), np.ones((2, 3)), np.zeros((2, 4)), np.zeros(2),
                       np.zeros((2, 4, 3)), np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        sc.GaussianSet(np.zeros((2, 3)), np.ones((2, 3)), np.zeros((2, 4)), np.zeros(2), np.zeros((2, 5, 3)))


def test_camera_validation():
    with pytest.raises(ValueError):
        _camera(rotation=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ShapeError):
        _camera(width=0)
    cam = _camera()
    assert sc.Camera.from_dict(cam.to_dict()).to_dict() == cam.to_dict()
