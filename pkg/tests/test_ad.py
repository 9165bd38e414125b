import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mbcal import ad, invdyn, models
from mbcal import dynamics as dyn
from mbcal import rotations as rot

small = st.floats(-2.0, 2.0, allow_nan=False)


def test_square_rule():
    out = ad.lift("square", ad.Dual(3.0, [1.0]))
    assert out.primal == 9.0
    assert out.tangent[0] == 6.0


def test_sin_rule():
    out = ad.sin(ad.Dual(0.0, [1.0]))
    assert (out.primal, out.tangent[0]) == (0.0, 1.0)


def test_unknown_operation_is_reported():
    with pytest.raises(ad.MissingRule):
        ad.lift("no_such_op", ad.Dual(1.0, [1.0]))


def test_builtin_rules_registered():
    assert {"square", "sin", "cos", "exp", "sqrt", "solve", "lcp", "quat_from_rotvec"} <= set(ad.registered_rules())


def test_duplicate_registration_rejected():
    with pytest.raises(ValueError):
        ad.register("square", np.square, lambda p, o, t: t[0])


def test_lcp_tangent_active_index():
    zd = ad.jvp_lcp(np.array([[2.0]]), np.array([-4.0]), np.array([2.0]), np.zeros((1, 1, 1)), np.ones((1, 1)))
    np.testing.assert_allclose(zd, [[-0.5]])


def test_lcp_tangent_passive_index():
    zd = ad.jvp_lcp(np.array([[1.0]]), np.array([1.0]), np.array([0.0]), np.ones((1, 1, 1)), np.ones((1, 1)))
    np.testing.assert_array_equal(zd, [[0.0]])


def test_lcp_tangent_vs_finite_difference(rng):
    checked = 0
    while checked < 20:
        R = rng.normal(size=(2, 2))
        H = R @ R.T + 0.5 * np.eye(2)
        q = rng.normal(size=2)
        z = ad.primal(ad.lcp(H, q))
        w = H @ z + q
        if np.min(np.abs(z) + np.abs(w)) < 1e-3:
            continue  # too close to an active-set boundary
        dH = rng.normal(size=(2, 2))
        dq = rng.normal(size=2)
        zd = ad.lcp(ad.Dual(H, dH[..., None]), ad.Dual(q, dq[:, None])).tangent[:, 0]
        e = 1e-7
        fd = (ad.primal(ad.lcp(H + e * dH, q + e * dq)) - ad.primal(ad.lcp(H - e * dH, q - e * dq))) / (2 * e)
        np.testing.assert_allclose(zd, fd, rtol=1e-6, atol=1e-9)
        checked += 1


def test_lcp_tangent_weakly_active_pair():
    # mirrored rows with q = 0: the net force z0 - z1 has derivative -dq/H on both sides
    H = np.diag([2.0, 2.0])
    zd = ad.jvp_lcp(H, np.zeros(2), np.zeros(2), None, np.array([[1.0, -1.0], [-1.0, 1.0]]))
    np.testing.assert_allclose(zd[0] - zd[1], [-0.5, 0.5])


def test_solve_rule_vs_finite_difference(rng):
    A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    b = rng.normal(size=3)
    dA, db = rng.normal(size=(3, 3)), rng.normal(size=3)
    xd = ad.solve(ad.Dual(A, dA[..., None]), ad.Dual(b, db[:, None])).tangent[:, 0]
    e = 1e-7
    fd = (np.linalg.solve(A + e * dA, b + e * db) - np.linalg.solve(A - e * dA, b - e * db)) / (2 * e)
    np.testing.assert_allclose(xd, fd, rtol=1e-6)


def test_wrap_angle_convention():
    assert ad.wrap_angle(np.pi) == pytest.approx(np.pi)
    assert ad.wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert ad.wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)


def test_pendulum_residual_tangent_vs_finite_difference():
    """Transition residual of a hinged pendulum, differentiated along a random direction."""
    model = models.build_pendulum({"b": 1e-3})
    params = model.params(b=1e-3)
    h = 1e-2
    s0 = model.state_at(np.array([0.4]), np.array([2.0]))
    s1, _ = dyn.step(model, s0, params, None, h)
    rng = np.random.default_rng(3)
    d = rng.normal(size=12)

    def residual(t):
        v = s1.velocity() + t * d[:6]
        r = s1.r + t * d[6:9][None]
        e = rot.boxplus_world(s1.e, t * d[9:12][None])
        moved = dyn.BodyState(r, e, v[None, :3], v[None, 3:])
        return invdyn.transition_residual(s0, moved, model, params, None, h)

    tangent = residual(ad.Dual(0.0, [1.0])).tangent[:, 0]
    e = 1e-6
    fd = (residual(e) - residual(-e)) / (2 * e)
    rel = np.abs(tangent - fd).max() / np.abs(fd).max()
    assert rel < 1e-6


def test_jacfwd_matches_analytic():
    J = ad.jacfwd(lambda x: ad.stack([x[0] * x[1], ad.sin(x[0])]), np.array([0.3, 2.0]))
    np.testing.assert_allclose(J, [[2.0, 0.3], [np.cos(0.3), 0.0]])


def test_seed_columns():
    d = ad.seed(np.zeros(3), np.array([1, -1, 0]))
    np.testing.assert_array_equal(d.tangent, [[0, 1], [0, 0], [1, 0]])


@given(small, small, small, small)
def test_product_and_quotient_rules(a, b, da, db):
    x, y = ad.Dual(a, [da]), ad.Dual(b + 3.0, [db])
    assert (x * y).tangent[0] == pytest.approx(da * (b + 3.0) + a * db, abs=1e-12)
    assert (x / y).tangent[0] == pytest.approx((da * (b + 3.0) - a * db) / (b + 3.0) ** 2, abs=1e-12)


@given(arrays(np.float64, 3, elements=small), arrays(np.float64, 3, elements=small),
       st.floats(-3, 3), st.floats(-3, 3))
def test_tangent_is_linear_in_seed(x, d, a, b):
    f = lambda v: ad.sum(ad.sin(v) * ad.exp(v * 0.5))
    t1 = f(ad.Dual(x, d[:, None])).tangent[0]
    t2 = f(ad.Dual(x, (a * d)[:, None])).tangent[0]
    assert t2 == pytest.approx(a * t1, abs=1e-9)
    both = f(ad.Dual(x, np.stack([d, b * d], axis=1))).tangent
    assert both[1] == pytest.approx(b * both[0], abs=1e-9)
