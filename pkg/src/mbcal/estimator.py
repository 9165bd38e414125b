"""Joint state and parameter estimation by box-constrained Levenberg-Marquardt.

The decision vector holds the state of every body at every time step plus a
block of free model parameters. The objective is the weighted sum of squared
residuals::

    kappa * (|dp_0|^2 + sum_k |dp_k|^2) + sum_k |dy_k|^2

where ``dp_0`` is the initial-state residual, ``dp_k`` the impulse residual of
transition ``k`` and ``dy_k`` the observation residual at step ``k``.

Transition residuals only depend on two consecutive states, so the Jacobian
with respect to the states is block bidiagonal. It is obtained with forward
mode differentiation in one pass over the trajectory: states with even and odd
time index get disjoint tangent columns, and a transition's derivatives with
respect to its left and right state are read off by parity. Parameters get
their own passes of at most :data:`PARAM_GROUP` columns. The Gauss-Newton
matrix then has an arrowhead shape (block tridiagonal in the states plus dense
parameter rows) that is factored with a banded Cholesky decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import ad, invdyn, mlcp
from . import rotations as rot
from .dynamics import BodyState
from .models import MultibodyModel, default_bounds

WINDOW = 256
PARAM_GROUP = 16
STATE_DIM = 12  # per body: [dr, dpsi, dv, dw]
ALPHA_CAP = 2.0**32
NU_CAP = 2.0**32


class NoProgress(RuntimeError):
    """No step reduced the cost before the damping reached its cap."""


# ---------------------------------------------------------------------------
# Parameters and decision vector


@dataclass
class ParamSpace:
    """Free parameters with box bounds. Quaternion entries use 3-dim tangents."""

    names: tuple[str, ...]
    values: dict[str, np.ndarray]
    lower: dict[str, float] = field(default_factory=dict)
    upper: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.names = tuple(self.names)
        self.values = {k: np.array(self.values[k], dtype=float) for k in self.names}
        for k in self.names:
            if self.is_rotation(k):
                continue
            lo, hi = self.bounds_of(k)
            if lo > hi:
                raise ValueError(f"empty box for {k}: [{lo}, {hi}]")
            if not lo <= float(self.values[k]) <= hi:
                raise ValueError(f"initial value of {k} = {float(self.values[k])} outside [{lo}, {hi}]")

    @classmethod
    def from_model(cls, model: MultibodyModel, names: Sequence[str] | None = None, values: Mapping | None = None,
                   lower: Mapping | None = None, upper: Mapping | None = None) -> "ParamSpace":
        names = tuple(model.free_default if names is None else names)
        vals = {k: (values or {}).get(k, model.defaults[k]) for k in names}
        lo = {k: default_bounds(k)[0] for k in names}
        hi = {k: default_bounds(k)[1] for k in names}
        lo.update(lower or {})
        hi.update(upper or {})
        return cls(names, vals, lo, hi)

    def is_rotation(self, name: str) -> bool:
        return self.values[name].shape == (4,)

    def bounds_of(self, name: str) -> tuple[float, float]:
        return float(self.lower.get(name, -np.inf)), float(self.upper.get(name, np.inf))

    def dims(self) -> list[int]:
        return [3 if self.is_rotation(k) else 1 for k in self.names]

    @property
    def tangent_dim(self) -> int:
        return sum(self.dims())

    def labels(self) -> list[str]:
        out = []
        for k, d in zip(self.names, self.dims()):
            out += [k] if d == 1 else [f"{k}[{i}]" for i in range(d)]
        return out

    def owner(self) -> list[str]:
        """Parameter name of each tangent coordinate."""
        return [k for k, d in zip(self.names, self.dims()) for _ in range(d)]

    def step_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds on a tangent step from the current values."""
        lo, hi = [], []
        for k in self.names:
            if self.is_rotation(k):
                lo += [-np.inf] * 3
                hi += [np.inf] * 3
            else:
                a, b = self.bounds_of(k)
                x = float(self.values[k])
                lo.append(a - x)
                hi.append(b - x)
        return np.array(lo), np.array(hi)

    def retract(self, delta) -> "ParamSpace":
        delta = np.asarray(delta, dtype=float)
        vals, i = {}, 0
        for k, d in zip(self.names, self.dims()):
            if d == 3:
                vals[k] = rot.boxplus(self.values[k], delta[i:i + 3])
            else:
                lo, hi = self.bounds_of(k)
                vals[k] = np.clip(float(self.values[k]) + delta[i], lo, hi)
            i += d
        return ParamSpace(self.names, vals, dict(self.lower), dict(self.upper))

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.values)

    def seeded(self, columns: Sequence[int], width: int) -> dict:
        """Values as duals; tangent coordinate ``columns[i]`` maps to seed column ``i``."""
        pos = {c: i for i, c in enumerate(columns)}
        out, j = {}, 0
        for k, d in zip(self.names, self.dims()):
            cols = [pos.get(j + i, -1) for i in range(d)]
            j += d
            if all(c < 0 for c in cols):
                out[k] = self.values[k]
            elif d == 3:
                out[k] = rot.boxplus(self.values[k], ad.seed_width(np.zeros(3), cols, width))
            else:
                out[k] = ad.seed_width(self.values[k], cols[0], width)
        return out


@dataclass
class DecisionVector:
    states: BodyState  # (n, n_b, .)
    params: ParamSpace

    @property
    def n_steps(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return STATE_DIM * self.states.n_bodies

    @property
    def tangent_dim(self) -> int:
        return self.n_steps * self.state_dim + self.params.tangent_dim

    def split(self, delta) -> tuple[np.ndarray, np.ndarray]:
        delta = np.asarray(delta, dtype=float)
        nx = self.n_steps * self.state_dim
        return delta[:nx].reshape(self.n_steps, self.states.n_bodies, STATE_DIM), delta[nx:]

    def retract(self, delta) -> "DecisionVector":
        dx, dp = self.split(delta)
        s = self.states
        states = BodyState(
            s.r + dx[..., 0:3],
            rot.boxplus(s.e, dx[..., 3:6]),
            s.v + dx[..., 6:9],
            s.w + dx[..., 9:12],
        )
        return DecisionVector(states, self.params.retract(dp))

    def step_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        nx = self.n_steps * self.state_dim
        lo, hi = self.params.step_bounds()
        return np.concatenate([np.full(nx, -np.inf), lo]), np.concatenate([np.full(nx, np.inf), hi])


def seed_states(states: BodyState, first_index: int = 0) -> BodyState:
    """Dual states with tangent columns colored by the parity of the time index."""
    n, nb = len(states), states.n_bodies
    s = STATE_DIM * nb
    color = (first_index + np.arange(n)) % 2
    j, b, i = np.meshgrid(np.arange(n), np.arange(nb), np.arange(STATE_DIM), indexing="ij")
    T = np.zeros((n, nb, STATE_DIM, 2 * s))
    T[j, b, i, color[j] * s + STATE_DIM * b + i] = 1.0
    psi = ad.Dual(np.zeros((n, nb, 3)), T[..., 3:6, :])
    return BodyState(
        ad.Dual(states.r, T[..., 0:3, :]),
        rot.boxplus(states.e, psi),
        ad.Dual(states.v, T[..., 6:9, :]),
        ad.Dual(states.w, T[..., 9:12, :]),
    )


# ---------------------------------------------------------------------------
# Residuals


@dataclass
class ResidualVector:
    initial: np.ndarray  # (12 n_b,)
    impulse: np.ndarray  # (n - 1, 12 n_b)
    observation: np.ndarray  # (n, n_o)
    kappa: float

    @property
    def n_steps(self) -> int:
        return self.observation.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.initial, self.impulse.ravel(), self.observation.ravel()])

    def weights(self) -> np.ndarray:
        n_imp = self.initial.size + self.impulse.size
        return np.concatenate([np.full(n_imp, self.kappa), np.ones(self.observation.size)])

    def impulse_cost(self) -> float:
        return float(np.sum(self.initial**2) + np.sum(self.impulse**2))

    def observation_cost(self) -> float:
        return float(np.sum(self.observation**2))

    def cost(self) -> float:
        """Weighted sum of squares."""
        return self.kappa * self.impulse_cost() + self.observation_cost()

    def mse(self) -> float:
        """Weighted cost per time step."""
        return self.cost() / self.n_steps

    def observation_mse(self) -> float:
        return self.observation_cost() / self.n_steps


@dataclass
class CalibrationProblem:
    """Measured joint angles ``y`` (n, n_o), controls ``u`` (n, n_u) and method settings."""

    model: MultibodyModel
    y: np.ndarray
    h: float
    u: np.ndarray | None = None
    kappa: float = 100.0
    fixed: Mapping = field(default_factory=dict)
    window: int = WINDOW

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.y.shape[0] < 2:
            raise ValueError("need at least two time steps")
        if self.u is not None:
            self.u = np.asarray(self.u, dtype=float).reshape(self.y.shape[0], -1)
        if not self.h > 0 or not self.kappa > 0:
            raise ValueError("h and kappa must be positive")

    @property
    def n_steps(self) -> int:
        return self.y.shape[0]

    def params(self, free: Mapping) -> dict:
        out = dict(self.model.defaults)
        out.update(self.fixed)
        out.update(free)
        return out

    def _u(self, a: int, b: int):
        return None if self.u is None else self.u[a:b]

    def windows(self):
        """``(a, b)`` state ranges; transitions ``a..b-1`` and observations ``a..b-1`` (``b`` too at the end)."""
        n = self.n_steps
        a = 0
        while a < n - 1:
            b = min(a + self.window, n - 1)
            yield a, b
            a = b

    def _evaluate(self, states: BodyState, params: Mapping, a: int, b: int):
        h = self.h
        trans = invdyn.transition_residual(states[:-1], states[1:], self.model, params, self._u(a, b), h)
        last = b + 1 if b == self.n_steps - 1 else b
        obs = invdyn.observation_residual(states[: last - a], self.model, params, self.y[a:last])
        init = None
        if a == 0:
            u0 = None if self.u is None else self.u[:1]
            init = invdyn.initial_residual(states[:1], self.model, params, h, u0)[0]
        return init, trans, obs

    def residual(self, dv: DecisionVector) -> ResidualVector:
        params = self.params(dv.params.as_dict())
        parts = [self._evaluate(dv.states[a:b + 1], params, a, b) for a, b in self.windows()]
        return ResidualVector(
            np.asarray(parts[0][0]),
            np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]),
            self.kappa,
        )


def stack_residuals(problem: CalibrationProblem, dv: DecisionVector) -> ResidualVector:
    return problem.residual(dv)


# ---------------------------------------------------------------------------
# Jacobian


@dataclass
class JacobianBlocks:
    """Nonzero blocks of the residual Jacobian (unweighted)."""

    init_x: np.ndarray  # (m, s)        d dp_0 / d x_0
    init_p: np.ndarray  # (m, p)
    left: np.ndarray  # (n-1, m, s)     d dp_k / d x_k
    right: np.ndarray  # (n-1, m, s)    d dp_k / d x_{k+1}
    trans_p: np.ndarray  # (n-1, m, p)
    obs_x: np.ndarray  # (n, n_o, s)
    obs_p: np.ndarray  # (n, n_o, p)

    @property
    def n_steps(self) -> int:
        return self.obs_x.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        n, n_o, s = self.obs_x.shape
        m, p = self.init_p.shape
        return m * n + n_o * n, s * n + p

    def to_sparse(self) -> sp.csr_matrix:
        """Jacobian with rows ``[dp_0, dp_1.., dy_0..]`` and columns ``[x_0.., chi]``."""
        n, n_o, s = self.obs_x.shape
        m, p = self.init_p.shape
        rows, cols, vals = [], [], []

        def put(block, r0, c0):
            rr, cc = np.meshgrid(np.arange(block.shape[0]), np.arange(block.shape[1]), indexing="ij")
            rows.append((rr + r0).ravel())
            cols.append((cc + c0).ravel())
            vals.append(block.ravel())

        put(self.init_x, 0, 0)
        put(self.init_p, 0, s * n)
        for k in range(n - 1):
            put(self.left[k], m * (k + 1), s * k)
            put(self.right[k], m * (k + 1), s * (k + 1))
            put(self.trans_p[k], m * (k + 1), s * n)
        off = m * n
        for k in range(n):
            put(self.obs_x[k], off + n_o * k, s * k)
            put(self.obs_p[k], off + n_o * k, s * n)
        J = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=self.shape)
        return J.tocsr()

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()


def _tangent(x, shape, width):
    return x.tangent if ad.is_dual(x) else np.zeros(tuple(shape) + (width,))


def jacobian(problem: CalibrationProblem, dv: DecisionVector) -> tuple[ResidualVector, JacobianBlocks]:
    """Residual and its Jacobian blocks at ``dv``."""
    n = problem.n_steps
    nb = dv.states.n_bodies
    s = STATE_DIM * nb
    m = s  # transition residual [dp_q, dp_u]
    space = dv.params
    p = space.tangent_dim
    n_o = problem.y.shape[1]
    params0 = problem.params(space.as_dict())

    init = np.zeros(m)
    trans = np.zeros((n - 1, m))
    obs = np.zeros((n, n_o))
    J = JacobianBlocks(
        np.zeros((m, s)), np.zeros((m, p)),
        np.zeros((n - 1, m, s)), np.zeros((n - 1, m, s)), np.zeros((n - 1, m, p)),
        np.zeros((n, n_o, s)), np.zeros((n, n_o, p)),
    )
    groups = [list(range(i, min(i + PARAM_GROUP, p))) for i in range(0, p, PARAM_GROUP)]
    for a, b in problem.windows():
        window = dv.states[a:b + 1]
        d_init, d_trans, d_obs = problem._evaluate(seed_states(window, a), params0, a, b)
        nt = b - a
        no = ad.primal(d_obs).shape[0]
        trans[a:b] = ad.primal(d_trans)
        obs[a:a + no] = ad.primal(d_obs)
        tt = _tangent(d_trans, (nt, m), 2 * s).reshape(nt, m, 2, s)
        color = (a + np.arange(nt)) % 2
        J.left[a:b] = tt[np.arange(nt), :, color]
        J.right[a:b] = tt[np.arange(nt), :, 1 - color]
        to = _tangent(d_obs, (no, n_o), 2 * s).reshape(no, n_o, 2, s)
        ocolor = (a + np.arange(no)) % 2
        J.obs_x[a:a + no] = to[np.arange(no), :, ocolor]
        if d_init is not None:
            init = ad.primal(d_init)
            J.init_x[:] = _tangent(d_init, (m,), 2 * s)[:, :s]
        for cols in groups:
            params = problem.params(space.seeded(cols, len(cols)))
            p_init, p_trans, p_obs = problem._evaluate(window, params, a, b)
            J.trans_p[a:b, :, cols] = _tangent(p_trans, (nt, m), len(cols))
            J.obs_p[a:a + no, :, cols] = _tangent(p_obs, (no, n_o), len(cols))
            if p_init is not None:
                J.init_p[:, cols] = _tangent(p_init, (m,), len(cols))
    return ResidualVector(init, trans, obs, problem.kappa), J


def sparse_jacobian(problem: CalibrationProblem, dv: DecisionVector) -> sp.csr_matrix:
    return jacobian(problem, dv)[1].to_sparse()


# ---------------------------------------------------------------------------
# Linear algebra: box-constrained quadratic programs and the arrowhead system


@dataclass
class BoxSolution:
    delta: np.ndarray
    lam_lower: np.ndarray
    lam_upper: np.ndarray


def solve_box_qp(H: np.ndarray, g: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> BoxSolution:
    """Minimize ``0.5 d^T H d + g^T d`` subject to ``lower <= d <= upper``.

    The optimality conditions form a mixed complementarity problem in ``d``
    (free) and the multipliers of the finite bounds (complementary to the
    bound slacks).
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    p = g.size
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (p,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (p,))
    il = np.flatnonzero(np.isfinite(lower))
    iu = np.flatnonzero(np.isfinite(upper))
    lam_l, lam_u = np.zeros(p), np.zeros(p)
    if p == 0:
        return BoxSolution(np.zeros(0), lam_l, lam_u)
    if il.size == 0 and iu.size == 0:
        return BoxSolution(np.linalg.solve(H, -g), lam_l, lam_u)
    El = np.eye(p)[il]
    Eu = np.eye(p)[iu]
    nl, nu = il.size, iu.size
    N = p + nl + nu
    S = np.zeros((N, N))
    S[:p, :p] = H
    S[:p, p:p + nl] = -El.T
    S[:p, p + nl:] = Eu.T
    S[p:p + nl, :p] = El
    S[p + nl:, :p] = -Eu
    b = np.concatenate([g, -lower[il], upper[iu]])
    sol = mlcp.solve_mlcp(mlcp.MlcpProblem(S, b, p))
    delta = np.clip(sol.lam[:p], lower, upper)
    lam_l[il] = sol.lam[p:p + nl]
    lam_u[iu] = sol.lam[p + nl:]
    return BoxSolution(delta, lam_l, lam_u)


def solve_box_lls(J, W, dz, alpha: float, lower, upper) -> BoxSolution:
    """Minimize ``|dz + J d|_W^2 + alpha |d|^2`` within the box.

    The returned multipliers belong to this (unhalved) objective.
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    W = np.broadcast_to(np.asarray(W, dtype=float), (J.shape[0],))
    dz = np.atleast_1d(np.asarray(dz, dtype=float))
    H = J.T @ (W[:, None] * J) + alpha * np.eye(J.shape[1])
    g = J.T @ (W * dz)
    sol = solve_box_qp(H, g, lower, upper)
    return BoxSolution(sol.delta, 2.0 * sol.lam_lower, 2.0 * sol.lam_upper)


class NormalEquations(Protocol):
    def gradient(self) -> np.ndarray: ...

    def max_diag(self) -> float: ...

    def solve(self, alpha: float, lower: np.ndarray, upper: np.ndarray) -> np.ndarray: ...


@dataclass
class DenseNormalEquations:
    H: np.ndarray
    g: np.ndarray

    def gradient(self) -> np.ndarray:
        return self.g

    def max_diag(self) -> float:
        return float(np.max(np.diag(self.H))) if self.g.size else 0.0

    def solve(self, alpha: float, lower, upper) -> np.ndarray:
        return solve_box_qp(self.H + alpha * np.eye(self.g.size), self.g, lower, upper).delta


def _banded_lower(diag: np.ndarray, off: np.ndarray, shift: float) -> np.ndarray:
    """Lower band storage of a symmetric block tridiagonal matrix plus ``shift * I``."""
    n, s, _ = diag.shape
    ab = np.zeros((2 * s, n * s))
    a, b = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    low = a >= b
    for k in range(n):
        ab[(a - b)[low], (k * s + b)[low]] = diag[k][low]
    ab[0] += shift
    if n > 1:
        # element (k+1)s+a, ks+b equals off[k][b, a]
        kk = np.arange(n - 1)[:, None, None]
        ab[(s + a - b)[None].repeat(n - 1, 0), kk * s + b[None]] = np.swapaxes(off, 1, 2)
    return ab


@dataclass
class ArrowNormalEquations:
    """Weighted Gauss-Newton system ``J^T W J`` and ``J^T W r`` in block form."""

    diag: np.ndarray  # (n, s, s)
    off: np.ndarray  # (n-1, s, s), block (k, k+1)
    cross: np.ndarray  # (n, s, p)
    pp: np.ndarray  # (p, p)
    gx: np.ndarray  # (n, s)
    gp: np.ndarray  # (p,)

    @property
    def sizes(self) -> tuple[int, int, int]:
        n, s, _ = self.diag.shape
        return n, s, self.pp.shape[0]

    @classmethod
    def build(cls, res: ResidualVector, J: JacobianBlocks) -> "ArrowNormalEquations":
        k = res.kappa
        L, R, C = J.left, J.right, J.trans_p
        Y, Yp = J.obs_x, J.obs_p
        rt, ry = res.impulse, res.observation
        diag = np.einsum("kri,krj->kij", Y, Y)
        diag[:-1] += k * np.einsum("kri,krj->kij", L, L)
        diag[1:] += k * np.einsum("kri,krj->kij", R, R)
        diag[0] += k * J.init_x.T @ J.init_x
        off = k * np.einsum("kri,krj->kij", L, R)
        cross = np.einsum("kri,krj->kij", Y, Yp)
        cross[:-1] += k * np.einsum("kri,krj->kij", L, C)
        cross[1:] += k * np.einsum("kri,krj->kij", R, C)
        cross[0] += k * J.init_x.T @ J.init_p
        pp = np.einsum("kri,krj->ij", Yp, Yp) + k * np.einsum("kri,krj->ij", C, C) + k * J.init_p.T @ J.init_p
        gx = np.einsum("kri,kr->ki", Y, ry)
        gx[:-1] += k * np.einsum("kri,kr->ki", L, rt)
        gx[1:] += k * np.einsum("kri,kr->ki", R, rt)
        gx[0] += k * J.init_x.T @ res.initial
        gp = np.einsum("kri,kr->i", Yp, ry) + k * np.einsum("kri,kr->i", C, rt) + k * J.init_p.T @ res.initial
        return cls(diag, off, cross, pp, gx, gp)

    def gradient(self) -> np.ndarray:
        return np.concatenate([self.gx.ravel(), self.gp])

    def max_diag(self) -> float:
        d = np.einsum("kii->ki", self.diag).max()
        return float(max(d, np.max(np.diag(self.pp)) if self.pp.size else 0.0))

    def to_dense(self) -> tuple[np.ndarray, np.ndarray]:
        n, s, p = self.sizes
        N = n * s
        H = np.zeros((N + p, N + p))
        for k in range(n):
            H[k * s:(k + 1) * s, k * s:(k + 1) * s] = self.diag[k]
            H[k * s:(k + 1) * s, N:] = self.cross[k]
            H[N:, k * s:(k + 1) * s] = self.cross[k].T
        for k in range(n - 1):
            H[k * s:(k + 1) * s, (k + 1) * s:(k + 2) * s] = self.off[k]
            H[(k + 1) * s:(k + 2) * s, k * s:(k + 1) * s] = self.off[k].T
        H[N:, N:] = self.pp
        return H, self.gradient()

    def factor_states(self, shift: float) -> np.ndarray:
        """Banded Cholesky factor of the state block plus ``shift * I``."""
        return sla.cholesky_banded(_banded_lower(self.diag, self.off, shift), lower=True, check_finite=False)

    def reduced(self, shift: float):
        """Parameter system after eliminating the states: ``(S, g_red, solve_back)``."""
        n, s, p = self.sizes
        chol = self.factor_states(shift)
        rhs = np.concatenate([self.cross.reshape(n * s, p), self.gx.reshape(n * s, 1)], axis=1)
        X = sla.cho_solve_banded((chol, True), rhs, check_finite=False)
        Xc, Xg = X[:, :p], X[:, p]
        C = self.cross.reshape(n * s, p)
        S = self.pp + shift * np.eye(p) - C.T @ Xc
        g_red = self.gp - C.T @ Xg

        def back(dp):
            return -(Xg + Xc @ dp)

        return 0.5 * (S + S.T), g_red, back

    def solve(self, alpha: float, lower, upper) -> np.ndarray:
        n, s, p = self.sizes
        S, g_red, back = self.reduced(alpha)
        dp = solve_box_qp(S, g_red, lower[n * s:], upper[n * s:]).delta if p else np.zeros(0)
        return np.concatenate([back(dp), dp])


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


class LeastSquaresProblem(Protocol):
    def cost(self, x) -> float: ...

    def linearize(self, x) -> tuple[float, NormalEquations]: ...

    def retract(self, x, delta): ...

    def step_bounds(self, x) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    alpha: float
    rho: float
    grad_norm: float
    step_norm: float

    def line(self) -> str:
        return (f"iter={self.iteration} cost={self.cost!r} alpha={self.alpha!r} rho={self.rho!r} "
                f"grad={self.grad_norm!r} step={self.step_norm!r}")


@dataclass
class LMReport:
    status: str  # "gradient", "step", "max_iter", "no_progress"
    iterations: int
    initial_cost: float
    cost: float
    log: list[IterationRecord]


@dataclass
class LMResult:
    x: object
    report: LMReport


def levenberg_marquardt(problem: LeastSquaresProblem, x0, eps_g: float = 1e-6, eps_delta: float = 1e-10,
                        max_iter: int = 100, callback: Callable[[IterationRecord], None] | None = None) -> LMResult:
    """Box-constrained Levenberg-Marquardt with gain-ratio damping control.

    Each accepted step strictly lowers the cost; if no damping up to the cap
    achieves that, the current (best) iterate is returned with status
    ``"no_progress"``.
    """
    x = x0
    cost, ne = problem.linearize(x)
    initial = cost
    alpha = 1e-6 * max(ne.max_diag(), 1e-300)
    nu = 2.0
    log: list[IterationRecord] = []
    status = "max_iter"
    it = 0
    g = ne.gradient()
    while it < max_iter:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= eps_g:
            status = "gradient"
            break
        it += 1
        lo, hi = problem.step_bounds(x)
        rho = dnorm = math.nan
        while True:
            try:
                delta = ne.solve(alpha, lo, hi)
            except (np.linalg.LinAlgError, mlcp.RayTermination, mlcp.IterationLimit):
                delta = None
            if delta is not None:
                dnorm = float(np.linalg.norm(delta))
                if dnorm <= eps_delta:
                    status = "step"
                    break
                x_new = problem.retract(x, delta)
                try:
                    new_cost = problem.cost(x_new)
                except (ValueError, RuntimeError, np.linalg.LinAlgError):
                    new_cost = math.inf
                denom = float(delta @ (alpha * delta - g))
                rho = (cost - new_cost) / denom if denom > 0 and np.isfinite(new_cost) else -math.inf
            else:
                rho = -math.inf
            if rho > 0:
                x, cost = x_new, new_cost
                alpha *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                break
            alpha *= nu
            nu *= 2.0
            if nu > NU_CAP or alpha > ALPHA_CAP * max(ne.max_diag(), 1.0):
                status = "no_progress"
                break
        rec = IterationRecord(it, cost, alpha, rho, gnorm, dnorm)
        log.append(rec)
        if callback is not None:
            callback(rec)
        if status in ("step", "no_progress"):
            break
        cost, ne = problem.linearize(x)
        g = ne.gradient()
    return LMResult(x, LMReport(status, it, initial, cost, log))


@dataclass
class DenseLeastSquares:
    """Small least-squares problem ``min |f(x)|_W^2`` over a box, differentiated in forward mode."""

    fun: Callable
    weights: np.ndarray | float = 1.0
    lower: np.ndarray | float = -np.inf
    upper: np.ndarray | float = np.inf

    def residual(self, x) -> np.ndarray:
        return np.asarray(ad.primal(self.fun(np.asarray(x, dtype=float))), dtype=float).ravel()

    def cost(self, x) -> float:
        r = self.residual(x)
        return float(np.sum(np.broadcast_to(self.weights, r.shape) * r * r))

    def linearize(self, x):
        x = np.asarray(x, dtype=float)
        out = self.fun(ad.Dual(x, np.eye(x.size)))
        r = np.asarray(ad.primal(out), dtype=float).ravel()
        J = _tangent(out, r.shape, x.size).reshape(r.size, x.size)
        W = np.broadcast_to(np.asarray(self.weights, dtype=float), r.shape)
        return float(np.sum(W * r * r)), DenseNormalEquations(J.T @ (W[:, None] * J), J.T @ (W * r))

    def jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.fun(ad.Dual(x, np.eye(x.size)))
        return _tangent(out, np.shape(ad.primal(out)), x.size).reshape(-1, x.size)

    def retract(self, x, delta):
        return np.clip(np.asarray(x) + delta, self.lower, self.upper)

    def step_bounds(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.lower - x, x.shape), np.broadcast_to(self.upper - x, x.shape)


@dataclass
class _TrajectoryLeastSquares:
    problem: CalibrationProblem

    def cost(self, dv: DecisionVector) -> float:
        return self.problem.residual(dv).cost()

    def linearize(self, dv: DecisionVector):
        res, J = jacobian(self.problem, dv)
        return res.cost(), ArrowNormalEquations.build(res, J)

    def retract(self, dv: DecisionVector, delta) -> DecisionVector:
        return dv.retract(delta)

    def step_bounds(self, dv: DecisionVector):
        return dv.step_bounds()


@dataclass
class CalibrationResult:
    decision: DecisionVector
    residual: ResidualVector
    report: LMReport

    @property
    def params(self) -> dict:
        return self.decision.params.as_dict()

    @property
    def mse(self) -> float:
        return self.residual.mse()


def calibrate(problem: CalibrationProblem, states: BodyState, space: ParamSpace, eps_g: float = 10.0,
              eps_delta: float = 1e-6, max_iter: int = 20,
              callback: Callable[[IterationRecord], None] | None = None) -> CalibrationResult:
    """Estimate states and the parameters in ``space`` from ``problem``'s measurements."""
    dv0 = DecisionVector(states, space)
    out = levenberg_marquardt(_TrajectoryLeastSquares(problem), dv0, eps_g, eps_delta, max_iter, callback)
    return CalibrationResult(out.x, problem.residual(out.x), out.report)


def cross_validate(problem: CalibrationProblem, params: Mapping, states: BodyState, eps_g: float = 10.0,
                   eps_delta: float = 1e-6, max_iter: int = 20) -> float:
    """State-only estimation cost per time step of a model with ``params`` held fixed."""
    fixed = dict(problem.fixed)
    fixed.update(params)
    held = CalibrationProblem(problem.model, problem.y, problem.h, problem.u, problem.kappa, fixed, problem.window)
    result = calibrate(held, states, ParamSpace((), {}), eps_g, eps_delta, max_iter)
    return result.mse


# ---------------------------------------------------------------------------
# Sensitivity


@dataclass
class Sensitivity:
    labels: list[str]
    covariance: np.ndarray
    std: np.ndarray
    singular_values: np.ndarray
    rank_deficient: bool
    null_directions: np.ndarray  # (p, k)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.labels, self.std))


def sandwich_covariance(T: np.ndarray, apply_W: Callable[[np.ndarray], np.ndarray], labels: Sequence[str],
                        tol: float = 1e-10) -> Sensitivity:
    """``(T^T T)^-1 T^T W T (T^T T)^-1`` through the thin SVD of ``T``.

    Directions with singular value below ``tol * max`` are reported as null
    directions; parameters with a component along them get infinite deviation.
    """
    U, sv, Vt = np.linalg.svd(T, full_matrices=False)
    keep = sv > tol * (sv.max() if sv.size else 0.0)
    Uk, Vk = U[:, keep], Vt[keep].T
    inner = Uk.T @ apply_W(Uk)
    Sinv = 1.0 / sv[keep]
    cov = Vk @ (Sinv[:, None] * inner * Sinv[None, :]) @ Vk.T
    std = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    null = Vt[~keep].T
    if null.size:
        exposed = np.abs(null).max(axis=1) > 1e-8
        std = np.where(exposed, np.inf, std)
    return Sensitivity(list(labels), cov, std, sv, bool(null.size), null)


def sensitivity(problem: CalibrationProblem, dv: DecisionVector, reg: float = 1e-10, tol: float = 1e-10) -> Sensitivity:
    """Linearized parameter covariance with the states projected out.

    Residual covariances are estimated from the converged residuals: one
    sample covariance for the impulse residual vectors and one for the
    observation residual vectors.
    """
    res, J = jacobian(problem, dv)
    ne = ArrowNormalEquations.build(res, J)
    n, s, p = ne.sizes
    labels = dv.params.labels()
    if p == 0:
        return Sensitivity(labels, np.zeros((0, 0)), np.zeros(0), np.zeros(0), False, np.zeros((0, 0)))
    k = problem.kappa
    shift = reg * max(ne.max_diag(), 1.0)
    chol = ne.factor_states(shift)
    X = sla.cho_solve_banded((chol, True), ne.cross.reshape(n * s, p), check_finite=False).reshape(n, s, p)
    sk = math.sqrt(k)
    # T = sqrt(W) (J_p - J_x X), block rows as in the residual
    T_init = sk * (J.init_p - J.init_x @ X[0])
    T_trans = sk * (J.trans_p - np.einsum("kri,kip->krp", J.left, X[:-1]) - np.einsum("kri,kip->krp", J.right, X[1:]))
    T_obs = J.obs_p - np.einsum("kri,kip->krp", J.obs_x, X)
    m, n_o = res.initial.size, res.observation.shape[1]
    T = np.concatenate([T_init, T_trans.reshape(-1, p), T_obs.reshape(-1, p)])

    omega = np.atleast_2d(np.cov(res.impulse, rowvar=False)) if res.impulse.shape[0] > 1 else np.eye(m)
    R = np.atleast_2d(np.cov(res.observation, rowvar=False))
    n_imp = 1 + res.impulse.shape[0]

    def apply_W(V):
        Vi = V[: m * n_imp].reshape(n_imp, m, -1)
        Vo = V[m * n_imp:].reshape(n, n_o, -1)
        return np.concatenate([
            (k * np.einsum("ij,kjc->kic", omega, Vi)).reshape(m * n_imp, -1),
            np.einsum("ij,kjc->kic", R, Vo).reshape(n * n_o, -1),
        ])

    return sandwich_covariance(T, apply_W, labels, tol)


def dense_sensitivity(ls: DenseLeastSquares, x, tol: float = 1e-10, labels: Sequence[str] | None = None) -> Sensitivity:
    """Covariance of a parameter-only problem whose residual rows are i.i.d. samples."""
    J = ls.jacobian(x)
    r = ls.residual(x)
    W = np.broadcast_to(np.asarray(ls.weights, dtype=float), r.shape)
    T = np.sqrt(W)[:, None] * J
    var = np.var(np.sqrt(W) * r, ddof=1) if r.size > 1 else 1.0
    labels = labels or [f"x{i}" for i in range(J.shape[1])]
    return sandwich_covariance(T, lambda V: var * V, labels, tol)
