"""Inverse-dynamics impulse residuals, initial-state residuals and observation residuals.

An impulse residual is the impulse that would have to be added to one time
step for the dynamics to carry ``x_k`` into ``x_{k+1}``. Two flavours exist:
``dp_u`` compares against the recorded velocity ``v_{k+1}`` and ``dp_q``
against the velocity implied by the configuration change. All functions
accept states with leading batch axes and dual-number inputs.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import ad
from . import rotations as rot
from .dynamics import BodyState, Model, SystemMatrices, assemble

PSEUDO_INVERSE_REG = 1e-10


def _matvec(A, x):
    return ad.einsum("...ij,...j->...i", A, x)


def _rmatvec(A, y):
    return ad.einsum("...ij,...i->...j", A, y)


def multipliers(sysm: SystemMatrices, vel):
    """Multipliers that make ``vel`` the post-step velocity of ``sysm``.

    ``lam_A`` solves ``A v + Sigma_A lam_A + a = 0`` and ``lam_B`` the
    complementarity problem ``Sigma_B lam_B + (B v + b) >= 0``.
    """
    lam_A = -(sysm.a + _matvec(sysm.A, vel)) / sysm.sigma_A
    if sysm.nB == 0:
        return lam_A, None
    lam_B = ad.lcp(sysm.sigma_B, _matvec(sysm.B, vel) + sysm.b)
    return lam_A, lam_B


def _impulse(sysm: SystemMatrices, v_prev, v_star, h: float):
    lam_A, lam_B = multipliers(sysm, v_star)
    out = sysm.mass_times(v_star - v_prev) - _rmatvec(sysm.A, lam_A) - h * (sysm.f + sysm.f_g)
    if lam_B is not None:
        out = out - _rmatvec(sysm.B, lam_B)
    return out


def implied_velocity(state_k: BodyState, state_k1: BodyState, h: float):
    """``h^-1 (q_{k+1} - q_k)`` with the exact rotation difference (world frame)."""
    v = (state_k1.r - state_k.r) / h
    w = rot.boxminus_world_exact(state_k1.e, state_k.e) / h
    vw = ad.concatenate([v, w], axis=-1)
    shape = ad.primal(vw).shape
    return ad.reshape(vw, shape[:-2] + (shape[-2] * 6,))


def impulse_residual_u(state_k: BodyState, state_k1: BodyState, model: Model, params: Mapping, u, h: float,
                       sysm: SystemMatrices | None = None):
    sysm = assemble(model, state_k, params, u, h) if sysm is None else sysm
    return _impulse(sysm, state_k.velocity(), state_k1.velocity(), h)


def impulse_residual_q(state_k: BodyState, state_k1: BodyState, model: Model, params: Mapping, u, h: float,
                       sysm: SystemMatrices | None = None):
    sysm = assemble(model, state_k, params, u, h) if sysm is None else sysm
    return _impulse(sysm, state_k.velocity(), implied_velocity(state_k, state_k1, h), h)


def transition_residual(state_k: BodyState, state_k1: BodyState, model: Model, params: Mapping, u, h: float):
    """``[dp_q, dp_u]`` of one or a batch of transitions, shape ``(..., 12 n_b)``."""
    sysm = assemble(model, state_k, params, u, h)
    dq = impulse_residual_q(state_k, state_k1, model, params, u, h, sysm)
    du = impulse_residual_u(state_k, state_k1, model, params, u, h, sysm)
    return ad.concatenate([dq, du], axis=-1)


def effective_mass_times(sysm: SystemMatrices, x):
    """``(A^T Sigma_A^-1 A + M) x``."""
    return sysm.mass_times(x) + _rmatvec(sysm.A, _matvec(sysm.A, x) / sysm.sigma_A)


def _normal_projection(G, x):
    """``G^T (G G^T + delta I)^-1 x`` with ``delta`` relative to the trace."""
    Gp = ad.primal(G)
    GGt = ad.einsum("...ik,...jk->...ij", G, G)
    d = Gp.shape[-2]
    delta = PSEUDO_INVERSE_REG * np.trace(np.asarray(ad.primal(GGt)), axis1=-2, axis2=-1)
    return _rmatvec(G, ad.solve(GGt + delta[..., None, None] * np.eye(d), x))


def initial_corrections(state_0: BodyState, model):
    """Configuration offset ``dq_0`` to the constraint surface and normal velocity ``dv_0``."""
    g, G = model.holonomic(state_0)
    dq = -_normal_projection(G, g)
    dv = -_normal_projection(G, _matvec(G, state_0.velocity()))
    return dq, dv


def initial_residual(state_0: BodyState, model, params: Mapping, h: float, u=None):
    """Initial-state residual in impulse units, shape ``(..., 12 n_b)``."""
    sysm = assemble(model, state_0, params, u, h)
    dq, dv = initial_corrections(state_0, model)
    return ad.concatenate([effective_mass_times(sysm, dq) / h, effective_mass_times(sysm, dv)], axis=-1)


def observation_residual(state: BodyState, model, params: Mapping, y):
    """Predicted minus observed joint angles, wrapped to (-pi, pi]."""
    return ad.wrap_angle(model.observe(state, params) - np.asarray(y, dtype=float))
