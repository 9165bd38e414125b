import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbcal import dynamics as dyn
from mbcal import models
from mbcal.estimator import ParamSpace
from bodies import shaft_model

angle = st.floats(-3.0, 3.0)


def test_satisfied_hinge_has_zero_violation():
    model = models.build_pendulum()
    g, G = models.hinge_holonomic(model.hinges[0], model.state_at(np.array([0.7])))
    assert g.shape == (5,) and G.shape == (5, 6)
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_observation_of_posed_pendulum():
    model = models.build_pendulum()
    assert float(model.observe(model.state_at(np.array([0.2])))[0]) == pytest.approx(0.2, abs=1e-14)


def test_stribeck_values():
    spec = models.Stribeck("mk", "md", "z")
    p = {"mk": 0.001, "md": 0.0005, "z": 1.0}
    assert models.stribeck_mu(spec, 0.0, p) == pytest.approx(0.0015)
    assert models.stribeck_mu(spec, 1.0, p) == pytest.approx(0.0011839, abs=1e-7)
    assert models.stribeck_mu(spec, 1e3, p) == pytest.approx(0.001)


def _decay_rate(theta, h):
    peaks = [i for i in range(1, theta.size - 1) if theta[i - 1] < theta[i] >= theta[i + 1]]
    t = h * np.array(peaks)
    return -np.polyfit(t, np.log(theta[peaks]), 1)[0]


def test_viscous_decay_rate():
    p = {"b": 1e-3, "eps_lin": 1e-6, "eps_rot": 1e-6}
    model = models.build_pendulum(p)
    params = model.params(**p)
    h = 1e-3
    traj = dyn.simulate(model, model.state_at(np.array([0.05])), params, [None] * 8000, h)
    theta = np.asarray(model.observe(traj))[:, 0]
    J_eff = params["J"] + params["m"] * params["l"] ** 2
    assert _decay_rate(theta, h) == pytest.approx(params["b"] / (2 * J_eff), rel=0.01)


def test_motor_spins_up_shaft():
    K, J_shaft, J_axis, h = 7.0, 4e-4, 2e-3, 1e-3
    model = shaft_model(K, J_shaft, J_axis)
    s1, _ = dyn.step(model, model.state_at(np.array([0.0])), model.params(), np.array([1.0]), h)
    omega = float(model.hinge_rates(s1)[0])
    assert omega == pytest.approx(h * K / (J_axis + J_shaft), rel=1e-6)


def test_furuta_defaults():
    d = models.FURUTA_DEFAULTS
    assert (d["l1"], d["lA"], d["l2"]) == (0.128, 0.248, 0.92)
    assert (d["m_A"], d["m_B"], d["J_shaft"], d["r1"], d["r2"]) == (0.238, 0.428, 4e-4, 1.0, 1.0)
    assert (d["tau1"], d["eps1_lin"], d["eps2_rot"]) == (0.02, 1e-4, 1e-4)
    assert (d["J_Axx"], d["J_Byy"], d["b1"], d["mu2"], d["K"]) == (0.01, 0.01, 1e-4, 1e-4, 0.1)


def test_furuta_tangent_dimension():
    model = models.build_furuta(dry=True)
    space = ParamSpace.from_model(model)
    assert space.tangent_dim == 13
    assert len(ParamSpace.from_model(models.build_furuta(dry=False)).names) == 9


def test_furuta_upright_equilibrium():
    model = models.build_furuta(dict(models.FURUTA_SYNTHETIC))
    s = model.state_at(np.array([0.0, np.pi]))
    for k in range(10):
        s, _ = dyn.step(model, s, model.params(**models.FURUTA_SYNTHETIC), np.zeros(1), 0.01, k)
    y = np.asarray(model.observe(s))
    assert abs(y[0]) < 1e-6 and abs(abs(y[1]) - np.pi) < 1e-6


def test_furuta_geometry_at_zero():
    model = models.build_furuta()
    r, e = model.pose(np.zeros(2))
    np.testing.assert_allclose(r, [[0.128, 0, 0], [0.376, -0.92, 0]], atol=1e-15)


def test_default_bounds():
    assert models.default_bounds("K") == (0.0, 100.0)
    assert models.default_bounds("b1") == (0.0, np.inf)
    assert models.default_bounds("J_Azz")[0] > 0
    with pytest.raises(ValueError):
        models.build_model("no_such_model")


@given(angle, angle)
def test_furuta_pose_roundtrip(a1, a2):
    model = models.build_furuta()
    s = model.state_at(np.array([a1, a2]))
    g, _ = model.holonomic(s)
    assert np.abs(g).max() < 1e-14
    wrapped = np.angle(np.exp(1j * np.array([a1, a2])))
    np.testing.assert_allclose(np.exp(1j * np.asarray(model.observe(s))), np.exp(1j * wrapped), atol=1e-12)


@given(angle, angle, st.floats(-3, 3), st.floats(-3, 3))
def test_furuta_posed_velocities_satisfy_constraints(a1, a2, w1, w2):
    model = models.build_furuta()
    s = model.state_at(np.array([a1, a2]), np.array([w1, w2]))
    _, G = model.holonomic(s)
    assert np.abs(G @ s.velocity()).max() < 1e-6
    np.testing.assert_allclose(model.hinge_rates(s), [w1, w2], atol=1e-6)
