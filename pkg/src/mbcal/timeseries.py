"""Recorded joint-angle series: CSV input/output, zero-phase filtering, decimation and state initialization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from . import rotations as rot
from .dynamics import BodyState

UNIFORM_TOL = 1e-9
CUTOFF_HZ = 10.0


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class NonuniformSampling(ValueError):
    pass


class CutoffAboveNyquist(ValueError):
    pass


@dataclass
class TimeSeries:
    t: np.ndarray  # (n,)
    y: np.ndarray  # (n, n_o) joint angles
    u: np.ndarray  # (n, n_u) controls, n_u may be 0
    y_names: tuple[str, ...] = ()
    u_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(self.t.size, -1)
        self.u = np.asarray(self.u, dtype=float).reshape(self.t.size, -1)
        if not self.y_names:
            self.y_names = tuple(f"theta{i + 1}" for i in range(self.y.shape[1]))
        if not self.u_names:
            self.u_names = ("u",) if self.u.shape[1] == 1 else tuple(f"u{i + 1}" for i in range(self.u.shape[1]))
        validate(self)

    def __len__(self) -> int:
        return self.t.size

    @property
    def spacing(self) -> float:
        return float((self.t[-1] - self.t[0]) / (self.t.size - 1)) if self.t.size > 1 else 0.0

    def slice(self, start: int, stop: int) -> "TimeSeries":
        return TimeSeries(self.t[start:stop], self.y[start:stop], self.u[start:stop], self.y_names, self.u_names)


def validate(series: TimeSeries) -> None:
    if not (np.all(np.isfinite(series.t)) and np.all(np.isfinite(series.y)) and np.all(np.isfinite(series.u))):
        raise ValueError("time series contains non-finite values")
    if series.t.size > 1:
        dt = np.diff(series.t)
        if np.any(dt <= 0):
            raise NonuniformSampling("time stamps must be strictly increasing")
        expected = series.t[0] + series.spacing * np.arange(series.t.size)
        dev = np.abs(series.t - expected).max()
        if dev > UNIFORM_TOL:
            raise NonuniformSampling(f"time stamps deviate from a uniform grid by {dev:.3e} s")


def load_timeseries(path: str | Path) -> TimeSeries:
    """Read ``t,theta1[,theta2..],u..`` columns; controls are optional."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if "t" not in header:
            raise ParseError("missing column 't'", 1)
        y_cols = [i for i, h in enumerate(header) if h.startswith("theta")]
        u_cols = [i for i, h in enumerate(header) if h.startswith("u")]
        if not y_cols:
            raise ParseError("missing column 'theta1'", 1)
        ti = header.index("t")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", lineno)
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    if not rows:
        raise ParseError("no data rows", 2)
    data = np.array(rows)
    return TimeSeries(
        data[:, ti], data[:, y_cols], data[:, u_cols],
        tuple(header[i] for i in y_cols), tuple(header[i] for i in u_cols),
    )


def save_timeseries(path: str | Path, series: TimeSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *series.y_names, *series.u_names])
        for k in range(len(series)):
            w.writerow([repr(float(x)) for x in (series.t[k], *series.y[k], *series.u[k])])


def zero_phase_lowpass(x: np.ndarray, dt: float, cutoff: float = CUTOFF_HZ) -> np.ndarray:
    """Second-order Butterworth low-pass run forward, then backward, along axis 0.

    Each pass starts from the filter's steady state for the first sample it
    sees, so constant signals pass unchanged and there is no start-up
    transient.
    """
    fs = 1.0 / dt
    if cutoff >= fs / 2:
        raise CutoffAboveNyquist(f"cutoff {cutoff} Hz is not below the Nyquist frequency {fs / 2} Hz")
    b, a = signal.butter(2, cutoff, fs=fs)
    zi = signal.lfilter_zi(b, a)
    x = np.asarray(x, dtype=float)
    zshape = (zi.size,) + (1,) * (x.ndim - 1)
    fwd, _ = signal.lfilter(b, a, x, axis=0, zi=zi.reshape(zshape) * x[:1])
    rev = fwd[::-1]
    out, _ = signal.lfilter(b, a, rev, axis=0, zi=zi.reshape(zshape) * rev[:1])
    return out[::-1]


def decimation_factor(dt: float, h_target: float) -> int:
    factor = int(round(h_target / dt))
    if factor < 1 or abs(factor * dt - h_target) > 1e-9 * max(1.0, h_target / dt):
        raise ValueError(f"target step {h_target} is not an integer multiple of the sampling interval {dt}")
    return factor


def preprocess(series: TimeSeries, h_target: float, cutoff: float = CUTOFF_HZ) -> TimeSeries:
    """Low-pass the observations, then keep every ``h_target / dt``-th sample.

    Controls are decimated without filtering; ``cutoff <= 0`` skips the low-pass.
    """
    dt = series.spacing
    factor = decimation_factor(dt, h_target)
    y = zero_phase_lowpass(series.y, dt, cutoff) if cutoff > 0 else series.y
    return TimeSeries(series.t[::factor], y[::factor], series.u[::factor], series.y_names, series.u_names)


def unwrap(series: TimeSeries) -> TimeSeries:
    """Remove 2 pi jumps from the angle columns."""
    return TimeSeries(series.t, np.unwrap(series.y, axis=0), series.u, series.y_names, series.u_names)


def init_states(y: np.ndarray, model, h: float) -> BodyState:
    """States posed at the observed joint angles with zero constraint violation.

    Velocities are backward differences ``(q_k - q_{k-1}) / h``; the first
    step reuses the velocity of the second.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[0]
    angles = np.zeros((n, len(model.hinges)))
    for j, hinge in enumerate(model.observation.hinges):
        angles[:, hinge] = y[:, j]
    r, e = model.pose(angles)
    v = np.zeros_like(r)
    w = np.zeros_like(r)
    if n > 1:
        v[1:] = (r[1:] - r[:-1]) / h
        w[1:] = rot.boxminus_world_exact(e[1:], e[:-1]) / h
        v[0], w[0] = v[1], w[1]
    return BodyState(r, e, v, w)
