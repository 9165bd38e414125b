import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mbcal import ad
from mbcal import rotations as rot

S2 = np.sqrt(2.0) / 2.0
finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
quat = arrays(np.float64, 4, elements=st.floats(-1.0, 1.0)).filter(lambda q: np.linalg.norm(q) > 0.1).map(rot.normalize)


def test_identity_composition(rng):
    e = rot.normalize(rng.normal(size=4))
    np.testing.assert_allclose(rot.quat_mul(rot.IDENTITY, e), e, atol=1e-15)


def test_inverse_composition(rng):
    e = rot.normalize(rng.normal(size=4))
    np.testing.assert_allclose(rot.quat_mul(e, rot.conj(e)), rot.IDENTITY, atol=1e-15)


def test_two_quarter_turns_make_half_turn():
    q = np.array([S2, 0.0, 0.0, S2])
    np.testing.assert_allclose(rot.quat_mul(q, q), [0.0, 0.0, 0.0, 1.0], atol=1e-15)


def test_exp_zero_and_quarter_turn():
    np.testing.assert_array_equal(rot.quat_from_rotvec(np.zeros(3)), rot.IDENTITY)
    np.testing.assert_allclose(rot.quat_from_rotvec([0.0, 0.0, np.pi / 2]), [S2, 0, 0, S2], atol=1e-15)


def test_exp_series_branch_matches_closed_form():
    theta = 1e-9
    exact = np.array([np.cos(theta / 2), 0.0, 0.0, np.sin(theta / 2)])
    np.testing.assert_allclose(rot.quat_from_rotvec([0.0, 0.0, theta]), exact, atol=1e-15, rtol=0)


def test_boxplus_examples(rng):
    e = rot.normalize(rng.normal(size=4))
    np.testing.assert_allclose(rot.boxplus(e, np.zeros(3)), e, atol=1e-15)
    np.testing.assert_allclose(rot.boxplus(rot.IDENTITY, [0, 0, np.pi / 2]), [S2, 0, 0, S2], atol=1e-15)


def test_boxminus_roundtrip_random_axis(rng):
    for _ in range(20):
        e = rot.normalize(rng.normal(size=4))
        axis = rng.normal(size=3)
        psi = 0.3 * axis / np.linalg.norm(axis)
        np.testing.assert_allclose(rot.boxminus_exact(rot.boxplus(e, psi), e), psi, atol=1e-12)


def test_boxminus_exact_examples(rng):
    b = rot.normalize(rng.normal(size=4))
    np.testing.assert_allclose(rot.boxminus_exact(b, b), np.zeros(3), atol=1e-15)
    a = rot.boxplus(b, [0.1, 0.0, 0.0])
    np.testing.assert_allclose(rot.boxminus_exact(a, b), [0.1, 0, 0], atol=1e-12)


def test_boxminus_guard_near_pi():
    a = rot.quat_from_rotvec([0.0, 0.0, np.pi - 1e-8])
    with pytest.raises(rot.AngleNearPi):
        rot.boxminus_exact(a, rot.IDENTITY)


def test_boxminus_small_angle_is_sine():
    for theta in (0.01, 0.5):
        a = rot.quat_from_rotvec([0.0, 0.0, theta])
        d = rot.boxminus_small_angle(a, rot.IDENTITY)
        np.testing.assert_allclose(d, [0.0, 0.0, np.sin(theta)], atol=1e-15)
    assert rot.boxminus_small_angle(a, rot.IDENTITY)[2] == pytest.approx(0.4794255386, abs=1e-10)
    np.testing.assert_array_equal(rot.boxminus_small_angle(a, a), np.zeros(3))


def test_rotate_vec_examples():
    np.testing.assert_array_equal(rot.rotate_vec(rot.IDENTITY, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    q = rot.quat_from_rotvec([0.0, 0.0, np.pi / 2])
    np.testing.assert_allclose(rot.rotate_vec(q, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)


def test_exp_tangent_at_zero():
    out = rot.quat_from_rotvec(ad.Dual(np.zeros(3), np.array([[1.0], [0.0], [0.0]])))
    np.testing.assert_allclose(out.tangent[:, 0], [0.0, 0.5, 0.0, 0.0], atol=1e-15)
    out = rot.quat_from_rotvec(ad.Dual(np.zeros(3), np.zeros((3, 1))))
    np.testing.assert_array_equal(out.tangent, np.zeros((4, 1)))


def test_exp_tangent_series_vs_finite_difference():
    psi = np.array([1e-4, 0.0, 0.0])
    J = ad.jacfwd(rot.quat_from_rotvec, psi)
    h = 1e-7
    fd = np.stack([(rot.quat_from_rotvec(psi + h * e) - rot.quat_from_rotvec(psi - h * e)) / (2 * h)
                   for e in np.eye(3)], axis=1)
    np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-9)


def test_exp_tangent_general_vs_finite_difference(rng):
    psi = rng.normal(size=3)
    J = ad.jacfwd(rot.quat_from_rotvec, psi)
    h = 1e-6
    fd = np.stack([(rot.quat_from_rotvec(psi + h * e) - rot.quat_from_rotvec(psi - h * e)) / (2 * h)
                   for e in np.eye(3)], axis=1)
    np.testing.assert_allclose(J, fd, atol=1e-8)


@pytest.mark.parametrize("angle", [0.0, 1e-6, 2e-4, 0.5, 2.5])
def test_log_tangent_vs_finite_difference(rng, angle):
    psi = rng.normal(size=3)
    d = rot.quat_from_rotvec(angle * psi / np.linalg.norm(psi))
    h = 1e-7
    J = ad.jacfwd(rot.quat_log, d)
    fd = np.stack([(rot.quat_log(d + h * e) - rot.quat_log(d - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    np.testing.assert_allclose(J, fd, atol=1e-7)


def test_log_takes_short_hemisphere():
    d = rot.quat_from_rotvec([0.0, 0.3, 0.0])
    np.testing.assert_allclose(rot.quat_log(-d), [0.0, 0.3, 0.0], atol=1e-15)


def test_matrix_roundtrip(rng):
    for _ in range(10):
        e = rot.normalize(rng.normal(size=4))
        e = e if e[0] >= 0 else -e
        np.testing.assert_allclose(rot.from_matrix(rot.rotmat(e)), e, atol=1e-12)


@given(quat, vec3)
def test_rotation_preserves_norm(e, x):
    assert np.linalg.norm(rot.rotate_vec(e, x)) == pytest.approx(np.linalg.norm(x), abs=1e-12)


@given(quat, vec3)
def test_rotmat_matches_rotate_vec(e, x):
    np.testing.assert_allclose(rot.rotmat(e) @ x, rot.rotate_vec(e, x), atol=1e-12)


@given(quat, arrays(np.float64, 3, elements=st.floats(-1.0, 1.0)))
def test_boxplus_boxminus_roundtrip(e, psi):
    np.testing.assert_allclose(rot.boxminus_exact(rot.boxplus(e, psi), e), psi, atol=1e-10)
    np.testing.assert_allclose(rot.boxminus_world_exact(rot.boxplus_world(e, psi), e), psi, atol=1e-10)


@given(quat, quat)
def test_product_stays_unit(a, b):
    assert np.linalg.norm(rot.quat_mul(a, b)) == pytest.approx(1.0, abs=1e-14)
