import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbcal import models, synth
from mbcal import timeseries as ts
from oracles import butterworth_power_gain

DT = 1e-3


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_small_file(tmp_path):
    series = ts.load_timeseries(write(tmp_path, "t,theta1,theta2,u\n0,0.1,0.2,0\n0.001,0.1,0.2,1\n0.002,0.1,0.2,0\n"))
    assert len(series) == 3
    assert series.y.shape == (3, 2) and series.u.shape == (3, 1)
    assert series.spacing == pytest.approx(1e-3)


def test_load_without_controls(tmp_path):
    series = ts.load_timeseries(write(tmp_path, "t,theta1\n0,1\n0.5,2\n"))
    assert series.u.shape == (2, 0)


def test_missing_column_names_it(tmp_path):
    with pytest.raises(ts.ParseError, match="theta1"):
        ts.load_timeseries(write(tmp_path, "t,u\n0,0\n"))
    with pytest.raises(ts.ParseError, match="'t'"):
        ts.load_timeseries(write(tmp_path, "theta1,u\n0,0\n"))


def test_malformed_row_reports_line(tmp_path):
    with pytest.raises(ts.ParseError) as err:
        ts.load_timeseries(write(tmp_path, "t,theta1\n0,1\n0.1,abc\n"))
    assert err.value.line == 3
    with pytest.raises(ts.ParseError):
        ts.load_timeseries(write(tmp_path, "t,theta1\n0,1,2\n"))
    with pytest.raises(ts.ParseError):
        ts.load_timeseries(write(tmp_path, ""))


def test_jittered_timestamps(tmp_path):
    with pytest.raises(ts.NonuniformSampling):
        ts.load_timeseries(write(tmp_path, "t,theta1\n0,0\n0.001,0\n0.002000002,0\n0.003,0\n"))
    with pytest.raises(ts.NonuniformSampling):
        ts.TimeSeries(np.array([0.0, 1.0, 1.0]), np.zeros(3), np.zeros((3, 0)))


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    series = ts.TimeSeries(DT * np.arange(5), rng.normal(size=(5, 2)), rng.normal(size=(5, 1)))
    ts.save_timeseries(tmp_path / "x.csv", series)
    back = ts.load_timeseries(tmp_path / "x.csv")
    np.testing.assert_array_equal(back.y, series.y)
    np.testing.assert_array_equal(back.u, series.u)


def test_filter_dc_gain():
    x = np.full(500, 0.7)
    np.testing.assert_allclose(ts.zero_phase_lowpass(x, DT), x, rtol=1e-12)


def _amplitude_phase(x, t, f):
    basis = np.stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)], axis=1)
    (a, b), *_ = np.linalg.lstsq(basis, x, rcond=None)
    return np.hypot(a, b), np.arctan2(b, a)


def test_filter_passband():
    t = DT * np.arange(10000)
    out = ts.zero_phase_lowpass(np.sin(2 * np.pi * t), DT)
    mid = slice(2000, 8000)
    amp, phase = _amplitude_phase(out[mid], t[mid], 1.0)
    assert amp == pytest.approx(butterworth_power_gain(1.0, 10.0), rel=1e-2)
    assert abs(amp - 1.0) < 0.01
    assert abs(phase) < 1e-3


def test_filter_stopband():
    t = DT * np.arange(4000)
    out = ts.zero_phase_lowpass(np.sin(2 * np.pi * 100.0 * t), DT)
    amp, _ = _amplitude_phase(out[1000:3000], t[1000:3000], 100.0)
    # two passes, each with at most the analog power gain
    assert amp**2 <= butterworth_power_gain(100.0, 10.0) ** 2


def test_filter_cutoff_above_nyquist():
    with pytest.raises(ts.CutoffAboveNyquist):
        ts.zero_phase_lowpass(np.zeros(10), DT, cutoff=600.0)


@settings(max_examples=25)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_preprocess_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    t = DT * np.arange(200)
    x, y = rng.normal(size=(200, 1)), rng.normal(size=(200, 1))
    u = np.zeros((200, 0))

    def prep(v):
        return ts.preprocess(ts.TimeSeries(t, v, u), 0.01).y

    np.testing.assert_allclose(prep(a * x + b * y), a * prep(x) + b * prep(y), atol=1e-10)


def test_preprocess_decimates():
    series = ts.TimeSeries(DT * np.arange(101), np.zeros(101), np.arange(101.0))
    out = ts.preprocess(series, 0.01)
    assert len(out) == 11
    np.testing.assert_array_equal(out.u[:, 0], np.arange(0, 101, 10.0))
    with pytest.raises(ValueError):
        ts.preprocess(series, 0.0125)


def test_unwrap_removes_jumps():
    y = np.angle(np.exp(1j * np.linspace(0, 10, 50)))
    series = ts.unwrap(ts.TimeSeries(np.arange(50.0), y, np.zeros((50, 0))))
    np.testing.assert_allclose(series.y[:, 0], np.linspace(0, 10, 50), atol=1e-12)


def test_init_states_constant_series():
    model = models.build_furuta()
    states = ts.init_states(np.tile([0.3, -0.2], (5, 1)), model, 0.01)
    np.testing.assert_allclose(states.velocity(), 0.0, atol=1e-14)


@pytest.mark.parametrize("rates", [(0.5, 0.0), (0.0, -1.5)])
def test_init_states_ramp(rates):
    model = models.build_furuta()
    t = 0.01 * np.arange(20)
    y = np.outer(t, rates) + [0.2, 0.4]
    states = ts.init_states(y, model, 0.01)
    np.testing.assert_allclose(model.hinge_rates(states), np.tile(rates, (20, 1)), atol=1e-10)


@given(st.integers(0, 2**31 - 1))
def test_init_states_on_constraint_surface(seed):
    model = models.build_furuta()
    y = np.random.default_rng(seed).uniform(-np.pi, np.pi, size=(6, 2))
    g, _ = model.holonomic(ts.init_states(y, model, 0.01))
    assert np.abs(g).max() <= 1e-12


def test_synthetic_is_deterministic():
    model = models.build_pendulum()
    kw = dict(duration=0.2, h_gen=1e-3, sample_dt=1e-2)
    a = synth.generate_synthetic(model, noise_sd=0.0, **kw)
    b = synth.generate_synthetic(model, noise_sd=0.0, **kw)
    assert a.y.tobytes() == b.y.tobytes()
    c = synth.generate_synthetic(model, noise_sd=1e-3, seed=4, **kw)
    d = synth.generate_synthetic(model, noise_sd=1e-3, seed=4, **kw)
    e = synth.generate_synthetic(model, noise_sd=1e-3, seed=5, **kw)
    assert c.y.tobytes() == d.y.tobytes() and c.y.tobytes() != e.y.tobytes()


def test_synthetic_noise_level():
    model = models.build_pendulum()
    kw = dict(duration=10.0, h_gen=1e-3, sample_dt=1e-3)
    clean = synth.generate_synthetic(model, noise_sd=0.0, **kw)
    noisy = synth.generate_synthetic(model, noise_sd=0.001, seed=11, **kw)
    noise = (noisy.y - clean.y).ravel()
    assert noise.size >= 10**4
    assert np.std(noise, ddof=1) == pytest.approx(0.001, rel=0.05)


def test_synthetic_step_convergence():
    model = models.build_pendulum({"eps_lin": 1e-6, "eps_rot": 1e-6})
    p = {"eps_lin": 1e-6, "eps_rot": 1e-6}
    runs = [synth.generate_synthetic(model, p, duration=0.5, h_gen=h, sample_dt=1e-2, noise_sd=0.0).y
            for h in (2e-3, 1e-3, 5e-4)]
    coarse = np.abs(runs[0] - runs[1]).max()
    fine = np.abs(runs[1] - runs[2]).max()
    assert 1.5 < coarse / fine < 2.7


def test_release_amplitude_decays():
    p = dict(models.FURUTA_SYNTHETIC)
    model = models.build_furuta(p)
    data = synth.generate_synthetic(model, p, duration=8.0, h_gen=1e-3, sample_dt=1e-2, noise_sd=0.0)
    theta2 = np.abs(np.angle(np.exp(1j * data.y[:, 1])))
    assert data.y[0, 1] == pytest.approx(np.pi - 0.03)
    assert theta2[-100:].max() < theta2[100:200].max() < theta2[:100].max()


def test_quantized_angles_on_encoder_grid():
    model = models.build_pendulum()
    data = synth.generate_synthetic(model, duration=0.1, h_gen=1e-3, sample_dt=1e-2, noise_sd=0.0,
                                    counts_per_rev=4096)
    counts = data.y * 4096 / (2 * np.pi)
    np.testing.assert_allclose(counts, np.round(counts), atol=1e-9)


def test_pulse_controls():
    t = np.array([0.0, 0.1, 0.3, 1.0, 1.1, 2.0])
    np.testing.assert_array_equal(synth.pulse_controls(t), [1, 1, 0, -1, -1, 1])
    with pytest.raises(ValueError):
        synth.generate_synthetic(models.build_pendulum(), scenario="nope")
