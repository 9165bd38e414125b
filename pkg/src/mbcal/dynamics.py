"""Multibody assembly and the regularized, stabilized (SPOOK) time step.

Generalized velocities are stacked per body as ``[v, w]`` with linear velocity
``v`` and world-frame angular velocity ``w``. The step solves::

    M v' = M v + h (f + f_g) + A^T lam_A + B^T lam_B
    A v' + Sigma_A lam_A + a = 0
    B v' + Sigma_B lam_B + b = w_B >= 0,  lam_B >= 0,  lam_B . w_B = 0

followed by ``r' = r + h v'`` and ``e' = exp(h w') * e``.

Assembly is written against :mod:`mbcal.ad`, so it runs on plain arrays or on
dual numbers with leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import ad, mlcp
from . import rotations as rot

GRAVITY = 9.82
SIGMA_FLOOR = 1e-12
FRICTION_DELTA = 1e-10

HOLONOMIC = "holonomic"
NONHOLONOMIC = "nonholonomic"
CONTACT = "contact"
FRICTION = "friction_bound"


class DimensionMismatch(ValueError):
    pass


class StepFailed(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass
class BodyState:
    """Per-body configuration and velocity, shape ``(..., n_bodies, k)``."""

    r: np.ndarray
    e: np.ndarray
    v: np.ndarray
    w: np.ndarray

    @property
    def n_bodies(self) -> int:
        return ad.primal(self.r).shape[-2]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return ad.primal(self.r).shape[:-2]

    def __getitem__(self, idx) -> "BodyState":
        return BodyState(self.r[idx], self.e[idx], self.v[idx], self.w[idx])

    def __len__(self) -> int:
        return self.batch_shape[0]

    def primal(self) -> "BodyState":
        return BodyState(*(ad.primal(x) for x in (self.r, self.e, self.v, self.w)))

    def velocity(self):
        """Generalized velocity, shape ``(..., 6 n_bodies)``."""
        vw = ad.concatenate([self.v, self.w], axis=-1)
        shape = ad.primal(vw).shape
        return ad.reshape(vw, shape[:-2] + (shape[-2] * 6,))

    def copy(self) -> "BodyState":
        return BodyState(*(np.array(x, dtype=float) for x in (self.r, self.e, self.v, self.w)))

    @staticmethod
    def stack(states: Sequence["BodyState"]) -> "BodyState":
        return BodyState(*(np.stack([getattr(s, k) for s in states]) for k in "revw"))


def split_velocity(vel):
    """Inverse of :meth:`BodyState.velocity`: returns ``(v, w)``."""
    shape = ad.primal(vel).shape
    nb = shape[-1] // 6
    vw = ad.reshape(vel, shape[:-1] + (nb, 6))
    return vw[..., :3], vw[..., 3:]


@dataclass
class BodyParams:
    m: float
    J_body: np.ndarray

    def __post_init__(self):
        self.J_body = np.asarray(self.J_body, dtype=float)
        if not self.m > 0 or np.any(self.J_body <= 0):
            raise ValueError("mass and principal inertias must be positive")


@dataclass
class FrictionCoupling:
    """Box coupling of a tangential block to its normal blocks.

    ``normals`` index contact blocks in the same constraint list; ``U`` holds
    one coefficient per normal row (shape ``(..., d_normal)``), applied to each
    of the normal blocks.
    """

    normals: tuple[int, ...]
    U: object


@dataclass
class ConstraintBlock:
    kind: str
    rows: object  # (..., d, 6 n_b)
    g: object = None  # holonomic / contact violation (..., d)
    target: object = None  # nonholonomic velocity target (..., d)
    sigma: object = None  # explicit regularization diagonal (..., d)
    eps: object = None  # compliances (d,)
    tau: object = None  # dampings (d,)
    coupling: FrictionCoupling | None = None

    @property
    def size(self) -> int:
        return ad.primal(self.rows).shape[-2]


class Model(Protocol):
    n_bodies: int

    def mass_properties(self, params) -> tuple[object, object]: ...

    def gravity(self, params) -> object: ...

    def constraint_blocks(self, state: BodyState, params, u, h: float) -> list[ConstraintBlock]: ...


def gamma_sigma(eps, tau, h: float):
    """Stabilization factor ``gamma`` and compliance diagonal ``sigma`` of SPOOK."""
    gamma = 1.0 / (1.0 + 4.0 * tau / h)
    return gamma, 4.0 * eps * gamma / h**2


@dataclass
class SystemMatrices:
    mass: object  # (..., n_b)
    inertia: object  # (..., n_b, 3, 3), world frame
    f: object  # (..., 6 n_b) external
    f_g: object  # (..., 6 n_b) fictitious
    A: object  # (..., nA, 6 n_b)
    sigma_A: object  # (..., nA)
    a: object  # (..., nA)
    B: object  # (..., nB, 6 n_b)
    sigma_B: object  # (..., nB, nB)
    b: object  # (..., nB)
    block_sizes: tuple[int, ...] = ()
    upsilon: object = None  # (..., nA) Baumgarte factors, 1 on nonholonomic rows
    kinds_B: tuple[str, ...] = field(default_factory=tuple)

    @property
    def nA(self) -> int:
        return ad.primal(self.a).shape[-1]

    @property
    def nB(self) -> int:
        return ad.primal(self.b).shape[-1]

    def mass_times(self, x):
        """``M @ x`` for generalized vectors ``x`` of shape ``(..., 6 n_b)``."""
        lin, ang = split_velocity(x)
        out_lin = self.mass[..., None] * lin
        out_ang = ad.einsum("...ij,...j->...i", self.inertia, ang)
        vw = ad.concatenate([out_lin, out_ang], axis=-1)
        shape = ad.primal(vw).shape
        return ad.reshape(vw, shape[:-2] + (shape[-2] * 6,))

    def mass_matrix(self) -> np.ndarray:
        m = ad.primal(self.mass)
        J = ad.primal(self.inertia)
        nb = m.shape[-1]
        M = np.zeros(m.shape[:-1] + (6 * nb, 6 * nb))
        for i in range(nb):
            s = 6 * i
            M[..., s:s + 3, s:s + 3] = m[..., i, None, None] * np.eye(3)
            M[..., s + 3:s + 6, s + 3:s + 6] = J[..., i, :, :]
        return M

    def mass_inverse(self) -> np.ndarray:
        m = ad.primal(self.mass)
        J = ad.primal(self.inertia)
        nb = m.shape[-1]
        Minv = np.zeros(m.shape[:-1] + (6 * nb, 6 * nb))
        Jinv = np.linalg.inv(J)
        for i in range(nb):
            s = 6 * i
            Minv[..., s:s + 3, s:s + 3] = (1.0 / m[..., i])[..., None, None] * np.eye(3)
            Minv[..., s + 3:s + 6, s + 3:s + 6] = Jinv[..., i, :, :]
        return Minv

    def effective_mass(self):
        """``M_Sigma = A^T Sigma_A^-1 A + M`` (dense)."""
        M = ad.primal(self.mass_matrix())
        A = ad.primal(self.A)
        s = ad.primal(self.sigma_A)
        return M + np.einsum("...ri,...r,...rj->...ij", A, 1.0 / s, A)


def _floor(x):
    return ad.maximum(x, SIGMA_FLOOR)


def _batched(x, batch: tuple[int, ...], trailing: int):
    """Broadcast ``x`` to ``batch + shape[-trailing:]``."""
    shape = ad.primal(x).shape
    target = batch + shape[len(shape) - trailing:]
    return x if shape == target else ad.broadcast_to(x, target)


def _gather(entries, shape, width):
    """Dense array from ``(row_slice, col_slice, value)`` entries."""
    p = np.zeros(shape)
    t = np.zeros(shape + (width,)) if width else None
    for rs, cs, val in entries:
        p[..., rs, cs] = ad.primal(val)
        if width and ad.is_dual(val):
            t[..., rs, cs, :] = val.tangent
    return ad.Dual(p, t) if width else p


def assemble(model: Model, state: BodyState, params, u, h: float) -> SystemMatrices:
    """Mass matrix, forces, and stacked constraint partitions at ``state``."""
    batch = state.batch_shape
    nb = state.n_bodies
    if nb != model.n_bodies:
        raise DimensionMismatch(f"state has {nb} bodies, model has {model.n_bodies}")
    n = 6 * nb

    mass, J_body = model.mass_properties(params)
    mass = _batched(mass, batch, 1)
    R = rot.rotmat(state.e)
    inertia = ad.einsum("...bij,...bj,...bkj->...bik", R, J_body, R)

    grav = model.gravity(params)
    f_lin = mass[..., None] * grav
    f_lin = _batched(f_lin, batch, 2)
    zeros3 = np.zeros(batch + (nb, 3))
    f = ad.reshape(ad.concatenate([f_lin, zeros3], axis=-1), batch + (n,))
    Jw = ad.einsum("...ij,...j->...i", inertia, state.w)
    f_g = ad.reshape(ad.concatenate([zeros3, -ad.cross(state.w, Jw)], axis=-1), batch + (n,))

    blocks = model.constraint_blocks(state, params, u, h)
    vel = state.velocity()

    A_rows, sA, aA, upsA, sizes = [], [], [], [], []
    B_blocks = []
    for blk in blocks:
        d = blk.size
        if ad.primal(blk.rows).shape[-1] != n:
            raise DimensionMismatch(f"constraint rows have {ad.primal(blk.rows).shape[-1]} columns, expected {n}")
        if blk.kind == HOLONOMIC:
            gamma, sigma = gamma_sigma(blk.eps, blk.tau, h)
            gamma = _batched(gamma, batch, 1)
            Gv = ad.einsum("...ij,...j->...i", blk.rows, vel)
            A_rows.append(blk.rows)
            sA.append(_batched(_floor(sigma), batch, 1))
            aA.append((4.0 / h) * gamma * blk.g - gamma * Gv)
            upsA.append(gamma)
            sizes.append(d)
        elif blk.kind == NONHOLONOMIC:
            A_rows.append(blk.rows)
            sA.append(_batched(_floor(blk.sigma), batch, 1))
            target = blk.target if blk.target is not None else np.zeros(batch + (d,))
            aA.append(-_batched(target, batch, 1))
            upsA.append(np.ones(batch + (d,)))
            sizes.append(d)
        elif blk.kind in (CONTACT, FRICTION):
            B_blocks.append(blk)
        else:
            raise ValueError(f"unknown constraint kind {blk.kind!r}")

    width = ad.tangent_width(state.r, state.e, state.v, state.w, mass, J_body, grav, *(
        x for blk in blocks for x in (blk.rows, blk.g, blk.target, blk.sigma, blk.eps, blk.tau)
    ))

    if A_rows:
        A = ad.concatenate(A_rows, axis=-2)
        sigma_A = ad.concatenate(sA, axis=-1)
        a = ad.concatenate(aA, axis=-1)
        upsilon = ad.concatenate(upsA, axis=-1)
    else:
        A = np.zeros(batch + (0, n))
        sigma_A = a = upsilon = np.zeros(batch + (0,))

    B, sigma_B, b, kinds_B = _assemble_b(blocks, B_blocks, state, vel, h, batch, n, width)
    return SystemMatrices(mass, inertia, f, f_g, A, sigma_A, a, B, sigma_B, b, tuple(sizes), upsilon, kinds_B)


def _assemble_b(blocks, B_blocks, state, vel, h, batch, n, width):
    if not B_blocks:
        return np.zeros(batch + (0, n)), np.zeros(batch + (0, 0)), np.zeros(batch + (0,)), ()
    # row offsets; each friction block is followed by its slack row
    offsets = {}
    rows, rhs, kinds = [], [], []
    start = 0
    for blk in B_blocks:
        offsets[id(blk)] = start
        rows.append(blk.rows)
        d = blk.size
        if blk.kind == CONTACT:
            gamma, _ = gamma_sigma(blk.eps, blk.tau, h)
            gamma = _batched(gamma, batch, 1)
            Cv = ad.einsum("...ij,...j->...i", blk.rows, vel)
            rhs.append((4.0 / h) * gamma * blk.g - gamma * Cv)
            kinds += [CONTACT] * d
            start += d
        else:
            rows.append(np.zeros(batch + (1, n)))
            rhs.append(np.zeros(batch + (d + 1,)))
            kinds += [FRICTION] * d + ["slack"]
            start += d + 1
    nB = start
    B = ad.concatenate(rows, axis=-2)
    b = ad.concatenate(rhs, axis=-1)

    entries = []
    for blk in B_blocks:
        o = offsets[id(blk)]
        d = blk.size
        idx = np.arange(o, o + d)
        if blk.kind == CONTACT:
            _, sigma = gamma_sigma(blk.eps, blk.tau, h)
            entries.append((idx, idx, _batched(_floor(sigma), batch, 1)))
        else:
            s = o + d
            entries.append((idx, idx, _batched(_floor(blk.sigma), batch, 1)))
            entries.append((idx, s, np.ones(batch + (d,))))
            entries.append((s, idx, -np.ones(batch + (d,))))
            entries.append((s, s, np.full(batch, FRICTION_DELTA)))
            U = _batched(blk.coupling.U, batch, 1)
            for k in blk.coupling.normals:
                normal = blocks[k]
                on = offsets[id(normal)]
                entries.append((s, np.arange(on, on + normal.size), U))
    sigma_B = _gather(entries, batch + (nB, nB), width)
    return B, sigma_B, b, tuple(kinds)


def step(model: Model, state: BodyState, params, u, h: float, step_index: int | None = None):
    """One SPOOK step; returns the next state and the multipliers ``(lam_A, lam_B)``.

    ``state`` may carry leading batch axes; each batch entry is solved
    independently.
    """
    state = state.primal()
    sysm = assemble(model, state, params, u, h)
    batch = state.batch_shape
    nb = state.n_bodies
    n = 6 * nb
    N = int(np.prod(batch, dtype=int))
    vel = state.velocity().reshape(N, n)

    M = sysm.mass_matrix().reshape(N, n, n)
    Minv = sysm.mass_inverse().reshape(N, n, n)
    A = np.asarray(sysm.A).reshape(N, sysm.nA, n)
    B = np.asarray(sysm.B).reshape(N, sysm.nB, n)
    sA = np.asarray(sysm.sigma_A).reshape(N, sysm.nA)
    sB = np.asarray(sysm.sigma_B).reshape(N, sysm.nB, sysm.nB)
    a = np.asarray(sysm.a).reshape(N, sysm.nA)
    b = np.asarray(sysm.b).reshape(N, sysm.nB)
    force = (np.asarray(sysm.f) + np.asarray(sysm.f_g)).reshape(N, n)

    p = -(np.einsum("nij,nj->ni", M, vel) + h * force)
    Minv_p = np.einsum("nij,nj->ni", Minv, p)
    AB = np.concatenate([A, B], axis=1)
    S = np.einsum("nij,njk,nlk->nil", AB, Minv, AB)
    nA = sysm.nA
    S[:, :nA, :nA] += np.einsum("ni,ij->nij", sA, np.eye(nA))
    S[:, nA:, nA:] += sB
    rhs = np.concatenate([a, b], axis=1) - np.einsum("nij,nj->ni", AB, Minv_p)

    lam = np.zeros((vel.shape[0], nA + sysm.nB))
    for i in range(vel.shape[0]):
        try:
            if sysm.nB == 0:
                lam[i] = np.linalg.solve(S[i], -rhs[i])
            else:
                sol = mlcp.solve_mlcp(mlcp.MlcpProblem(S[i], rhs[i], nA, sysm.block_sizes))
                lam[i] = sol.lam
        except (np.linalg.LinAlgError, mlcp.RayTermination, mlcp.IterationLimit) as exc:
            raise StepFailed(str(exc), step_index) from exc

    impulse = -p + np.einsum("nki,nk->ni", AB, lam)
    vel_next = np.einsum("nij,nj->ni", Minv, impulse).reshape(batch + (n,))
    v_next, w_next = split_velocity(vel_next)
    r_next = state.r + h * v_next
    e_next = rot.boxplus_world(state.e, h * w_next)
    lam = lam.reshape(batch + (nA + sysm.nB,))
    return BodyState(r_next, e_next, v_next, w_next), (lam[..., :nA], lam[..., nA:])


def simulate(model: Model, state: BodyState, params, controls, h: float) -> BodyState:
    """Roll out ``len(controls)`` steps from ``state``; returns all states including the first."""
    states = [state.primal().copy()]
    for k, u in enumerate(controls):
        nxt, _ = step(model, states[-1], params, u, h, step_index=k)
        states.append(nxt)
    return BodyState.stack(states)
