"""Hinge-joint constraint package and the pendulum / Furuta pendulum models.

A hinge couples a parent frame (a body or the world) to a child frame so that
the two frames share an origin and an x axis. The frame axes are written
``x_a, y_a, z_a`` (parent) and ``x_b, y_b, z_b`` (child); the hinge angle is the
rotation of the child frame about ``x`` relative to the parent frame.

Parameters are looked up by name in a mapping; any value may be a float or an
:class:`mbcal.ad.Dual`, which is how parameter derivatives are obtained.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import ad
from . import rotations as rot
from .dynamics import (
    CONTACT,
    FRICTION,
    GRAVITY,
    HOLONOMIC,
    NONHOLONOMIC,
    BodyState,
    ConstraintBlock,
    FrictionCoupling,
    gamma_sigma,
)

VISCOUS_FLOOR = 1e-12


@dataclass(frozen=True)
class Body:
    name: str
    mass: str
    inertia: tuple[str, str, str]


@dataclass(frozen=True)
class Stribeck:
    mu_kinematic: str
    mu_delta: str
    zeta: str


@dataclass(frozen=True)
class HingeSpec:
    """Hinge between ``parent`` (body index or ``None`` for the world) and ``child``.

    Anchors and frame orientations are local to the respective body (world
    coordinates for a world parent). Physical coefficients are parameter names.
    """

    name: str
    parent: int | None
    child: int
    anchor_parent: tuple[float, float, float]
    frame_parent: tuple[float, float, float, float]
    anchor_child: tuple[float, float, float]
    frame_child: tuple[float, float, float, float]
    eps_linear: str
    eps_rotational: str
    tau: str
    damping: str | None = None
    friction: str | None = None
    r_int: str | None = None
    motor_gain: str | None = None
    shaft_inertia: str | None = None
    control: int = 0
    stribeck: Stribeck | None = None

    @property
    def has_friction(self) -> bool:
        return self.friction is not None or self.stribeck is not None

    @property
    def has_motor(self) -> bool:
        return self.motor_gain is not None


@dataclass(frozen=True)
class ObservationSpec:
    hinges: tuple[int, ...]


def _param(params: Mapping, defaults: Mapping, key: str):
    return params[key] if key in params else defaults[key]


def _parts_to_rows(parts: dict, batch, d: int, nb: int):
    """Place ``(body, 'v'|'w') -> (..., d, 3)`` blocks into ``(..., d, 6 nb)`` rows."""
    zeros = np.zeros(batch + (d, 3))
    cols = []
    for b in range(nb):
        cols.append(parts.get((b, "v"), zeros))
        cols.append(parts.get((b, "w"), zeros))
    return ad.concatenate(cols, axis=-1)


@dataclass
class HingeFrames:
    """World-frame hinge geometry at a batch of states."""

    anchor_a: object
    anchor_b: object
    lever_a: object | None  # anchor_a - r_parent
    lever_b: object
    axes_a: object  # (..., 3, 3), columns x_a, y_a, z_a
    axes_b: object
    quat_a: object
    quat_b: object


def hinge_frames(spec: HingeSpec, state: BodyState) -> HingeFrames:
    c = spec.child
    e_c = state.e[..., c, :]
    R_c = rot.rotmat(e_c)
    lever_b = ad.matvec(R_c, np.asarray(spec.anchor_child))
    anchor_b = state.r[..., c, :] + lever_b
    axes_b = ad.einsum("...ij,jk->...ik", R_c, rot.rotmat(np.asarray(spec.frame_child)))
    quat_b = rot.quat_mul(e_c, np.asarray(spec.frame_child))
    batch = state.batch_shape
    if spec.parent is None:
        anchor_a = np.broadcast_to(np.asarray(spec.anchor_parent, dtype=float), batch + (3,))
        axes_a = np.broadcast_to(rot.rotmat(np.asarray(spec.frame_parent)), batch + (3, 3))
        quat_a = np.broadcast_to(np.asarray(spec.frame_parent, dtype=float), batch + (4,))
        lever_a = None
    else:
        p = spec.parent
        e_p = state.e[..., p, :]
        R_p = rot.rotmat(e_p)
        lever_a = ad.matvec(R_p, np.asarray(spec.anchor_parent))
        anchor_a = state.r[..., p, :] + lever_a
        axes_a = ad.einsum("...ij,jk->...ik", R_p, rot.rotmat(np.asarray(spec.frame_parent)))
        quat_a = rot.quat_mul(e_p, np.asarray(spec.frame_parent))
    return HingeFrames(anchor_a, anchor_b, lever_a, lever_b, axes_a, axes_b, quat_a, quat_b)


def hinge_holonomic(spec: HingeSpec, state: BodyState, frames: HingeFrames | None = None):
    """Violation ``g`` (5 rows) and its Jacobian ``G`` for one hinge."""
    fr = hinge_frames(spec, state) if frames is None else frames
    batch = state.batch_shape
    nb = state.n_bodies
    x_a = fr.axes_a[..., :, 0]
    y_b = fr.axes_b[..., :, 1]
    z_b = fr.axes_b[..., :, 2]
    g = ad.concatenate(
        [fr.anchor_a - fr.anchor_b, ad.stack([ad.dot(x_a, y_b), ad.dot(x_a, z_b)], axis=-1)], axis=-1
    )
    n1 = ad.cross(x_a, y_b)
    n2 = ad.cross(x_a, z_b)
    eye = np.broadcast_to(np.eye(3), batch + (3, 3))
    zero23 = np.zeros(batch + (2, 3))
    rot_rows = ad.stack([n1, n2], axis=-2)
    parts = {
        (spec.child, "v"): ad.concatenate([-eye, zero23], axis=-2),
        (spec.child, "w"): ad.concatenate([ad.skew(fr.lever_b), -rot_rows], axis=-2),
    }
    if spec.parent is not None:
        parts[(spec.parent, "v")] = ad.concatenate([eye, zero23], axis=-2)
        parts[(spec.parent, "w")] = ad.concatenate([-ad.skew(fr.lever_a), rot_rows], axis=-2)
    return g, _parts_to_rows(parts, batch, 5, nb)


def hinge_axis_rows(spec: HingeSpec, state: BodyState, frames: HingeFrames | None = None):
    """One row measuring the relative angular velocity about the hinge axis."""
    fr = hinge_frames(spec, state) if frames is None else frames
    x_b = fr.axes_b[..., None, :, 0]
    parts = {(spec.child, "w"): x_b}
    if spec.parent is not None:
        parts[(spec.parent, "w")] = -x_b
    return _parts_to_rows(parts, state.batch_shape, 1, state.n_bodies)


def hinge_angle(spec: HingeSpec, state: BodyState, frames: HingeFrames | None = None):
    """Rotation of the child frame about the hinge axis, wrapped to (-pi, pi]."""
    fr = hinge_frames(spec, state) if frames is None else frames
    q = rot.quat_mul(rot.conj(fr.quat_a), fr.quat_b)
    return ad.wrap_angle(2.0 * ad.arctan2(q[..., 1], q[..., 0]))


def stribeck_mu(spec: Stribeck, omega, params: Mapping, defaults: Mapping = MappingProxyType({})):
    """``mu_kinematic + mu_delta * exp(-zeta * omega^2)``."""
    mu_k = _param(params, defaults, spec.mu_kinematic)
    mu_d = _param(params, defaults, spec.mu_delta)
    zeta = _param(params, defaults, spec.zeta)
    return mu_k + mu_d * ad.exp(-zeta * omega * omega)


def hinge_constraints(
    spec: HingeSpec,
    state: BodyState,
    params: Mapping,
    h: float,
    u=None,
    omega_prev=None,
    defaults: Mapping = MappingProxyType({}),
) -> list[ConstraintBlock]:
    """Constraint blocks of one hinge at ``state`` (velocities ``v_k``).

    ``omega_prev`` is the hinge rate used by the Stribeck law; it defaults to
    the rate at ``state``. Friction blocks refer to their normal blocks by
    position in the returned list.
    """
    P = lambda key: _param(params, defaults, key)  # noqa: E731
    batch = state.batch_shape
    fr = hinge_frames(spec, state)
    g, G = hinge_holonomic(spec, state, fr)
    el, er, tau = P(spec.eps_linear), P(spec.eps_rotational), P(spec.tau)
    eps = ad.stack([el, el, el, er, er])
    taus = ad.stack([tau] * 5)
    blocks: list[ConstraintBlock] = []

    axis = None
    if spec.damping is not None or spec.has_motor or spec.has_friction:
        axis = hinge_axis_rows(spec, state, fr)
        if omega_prev is None:
            omega_prev = ad.einsum("...ij,...j->...i", axis, state.velocity())[..., 0]

    if spec.has_friction:
        blocks.append(ConstraintBlock(CONTACT, G, g=g, eps=eps, tau=taus))
        blocks.append(ConstraintBlock(CONTACT, -G, g=-g, eps=eps, tau=taus))
        mu = stribeck_mu(spec.stribeck, omega_prev, params, defaults) if spec.stribeck else P(spec.friction)
        r_int = P(spec.r_int) if spec.r_int is not None else 1.0
        rmu = r_int * mu
        U = ad.stack([rmu, rmu, rmu, mu, mu], axis=-1)
        _, sigma_t = gamma_sigma(er, tau, h)
        blocks.append(
            ConstraintBlock(
                FRICTION,
                ad.concatenate([axis, -axis], axis=-2),
                sigma=ad.stack([sigma_t, sigma_t]),
                coupling=FrictionCoupling((0, 1), U),
            )
        )
    else:
        blocks.append(ConstraintBlock(HOLONOMIC, G, g=g, eps=eps, tau=taus))

    if spec.damping is not None:
        b = P(spec.damping)
        sigma = 1.0 / (h * (b + VISCOUS_FLOOR))
        blocks.append(ConstraintBlock(NONHOLONOMIC, axis, sigma=ad.stack([sigma])))

    if spec.has_motor:
        K, Js = P(spec.motor_gain), P(spec.shaft_inertia)
        uk = np.zeros(batch) if u is None else np.asarray(u, dtype=float)[..., spec.control]
        omega_now = ad.einsum("...ij,...j->...i", axis, state.velocity())
        target = omega_now + (h * K * uk / Js)[..., None]
        blocks.append(ConstraintBlock(NONHOLONOMIC, axis, target=target, sigma=ad.stack([1.0 / Js])))
    return blocks


@dataclass(frozen=True)
class MultibodyModel:
    name: str
    bodies: tuple[Body, ...]
    hinges: tuple[HingeSpec, ...]
    defaults: Mapping[str, object]
    observation: ObservationSpec
    n_controls: int = 0
    gravity_tilt: str = "g_tilt"
    free_default: tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    @property
    def n_obs(self) -> int:
        return len(self.observation.hinges)

    def param(self, params: Mapping, key: str):
        return _param(params, self.defaults, key)

    def params(self, **overrides) -> dict:
        out = dict(self.defaults)
        out.update(overrides)
        return out

    def mass_properties(self, params: Mapping):
        mass = ad.stack([self.param(params, b.mass) for b in self.bodies])
        J = ad.stack([ad.stack([self.param(params, k) for k in b.inertia]) for b in self.bodies])
        return mass, J

    def gravity(self, params: Mapping):
        tilt = self.param(params, self.gravity_tilt)
        return rot.rotate_vec(tilt, np.array([0.0, -GRAVITY, 0.0]))

    def constraint_blocks(self, state: BodyState, params: Mapping, u, h: float) -> list[ConstraintBlock]:
        blocks: list[ConstraintBlock] = []
        for spec in self.hinges:
            local = hinge_constraints(spec, state, params, h, u, defaults=self.defaults)
            offset = len(blocks)
            for blk in local:
                if blk.coupling is not None:
                    shifted = tuple(i + offset for i in blk.coupling.normals)
                    blk = replace(blk, coupling=FrictionCoupling(shifted, blk.coupling.U))
                blocks.append(blk)
        return blocks

    def holonomic(self, state: BodyState):
        """Stacked hinge violations and Jacobian, regardless of friction mode."""
        gs, Gs = zip(*(hinge_holonomic(spec, state) for spec in self.hinges))
        return ad.concatenate(gs, axis=-1), ad.concatenate(Gs, axis=-2)

    def observe(self, state: BodyState, params: Mapping | None = None):
        """Observed joint angles, shape ``(..., n_obs)``."""
        return ad.stack([hinge_angle(self.hinges[i], state) for i in self.observation.hinges], axis=-1)

    def hinge_rates(self, state: BodyState):
        return ad.stack(
            [ad.einsum("...ij,...j->...i", hinge_axis_rows(s, state), state.velocity())[..., 0] for s in self.hinges],
            axis=-1,
        )

    def pose(self, angles) -> tuple[np.ndarray, np.ndarray]:
        """Body positions and orientations with zero constraint violation.

        ``angles`` has shape ``(..., n_hinges)``; hinges must be listed so that
        each parent is posed before its children.
        """
        angles = np.asarray(angles, dtype=float)
        batch = angles.shape[:-1]
        r = np.zeros(batch + (self.n_bodies, 3))
        e = np.zeros(batch + (self.n_bodies, 4))
        for j, spec in enumerate(self.hinges):
            fa = np.asarray(spec.frame_parent, dtype=float)
            if spec.parent is None:
                qa = np.broadcast_to(fa, batch + (4,))
                anchor = np.broadcast_to(np.asarray(spec.anchor_parent, dtype=float), batch + (3,))
            else:
                qa = rot.quat_mul(e[..., spec.parent, :], fa)
                anchor = r[..., spec.parent, :] + rot.rotate_vec(e[..., spec.parent, :], np.asarray(spec.anchor_parent))
            turn = rot.quat_from_rotvec(angles[..., j, None] * np.array([1.0, 0.0, 0.0]))
            ec = rot.quat_mul(rot.quat_mul(qa, turn), rot.conj(np.asarray(spec.frame_child, dtype=float)))
            e[..., spec.child, :] = ec
            r[..., spec.child, :] = anchor - rot.rotate_vec(ec, np.asarray(spec.anchor_child))
        return r, e

    def state_at(self, angles, rates=None) -> BodyState:
        """State posed at joint ``angles``; velocities from joint ``rates`` by differencing."""
        r, e = self.pose(angles)
        v = np.zeros_like(r)
        w = np.zeros_like(r)
        if rates is not None:
            dt = 1e-7
            r1, e1 = self.pose(np.asarray(angles) + dt * np.asarray(rates))
            r0, e0 = self.pose(np.asarray(angles) - dt * np.asarray(rates))
            v = (r1 - r0) / (2 * dt)
            w = rot.boxminus_world_exact(e1, e0) / (2 * dt)
        return BodyState(r, e, v, w)


def hinge_from_world(
    name: str,
    parent: int | None,
    child: int,
    anchor: np.ndarray,
    frame: np.ndarray,
    ref_r: np.ndarray,
    ref_e: np.ndarray,
    **coefficients,
) -> HingeSpec:
    """Hinge whose frame is ``(anchor, frame)`` in world coordinates at a reference pose."""
    anchor = np.asarray(anchor, dtype=float)
    frame = np.asarray(frame, dtype=float)

    def local(body):
        if body is None:
            return tuple(anchor), tuple(frame)
        inv = rot.conj(ref_e[body])
        p = rot.rotate_vec(inv, anchor - ref_r[body])
        return tuple(p), tuple(rot.quat_mul(inv, frame))

    pa, fa = local(parent)
    pb, fb = local(child)
    return HingeSpec(name, parent, child, pa, fa, pb, fb, **coefficients)


# ---------------------------------------------------------------------------
# Pendulum


PENDULUM_DEFAULTS = MappingProxyType(
    {
        "m": 0.428,
        "l": 0.092,
        "J": 3.0e-4,
        "J_xx": 1.0e-4,
        "J_yy": 3.0e-4,
        "eps_lin": 1e-4,
        "eps_rot": 1e-4,
        "tau": 0.02,
        "b": 0.0,
        "mu": 0.0,
        "r": 1.0,
        "mu_kinematic": 0.0,
        "mu_delta": 0.0,
        "zeta": 1.0,
        "g_tilt": rot.IDENTITY,
    }
)


def build_pendulum(
    params: Mapping | None = None,
    viscous: bool = True,
    dry: bool | None = None,
    stribeck: bool = False,
) -> MultibodyModel:
    """Single body hanging from a frictional hinge whose axis is the world z axis.

    The center of mass sits ``l`` below the hinge at zero angle; ``J`` is the
    inertia about the center of mass in the plane of oscillation.
    """
    p = dict(PENDULUM_DEFAULTS)
    p.update(params or {})
    if dry is None:
        dry = float(ad.primal(p["mu"])) > 0.0
    l = float(p["l"])
    ref_r = np.array([[0.0, -l, 0.0]])
    ref_e = np.array([rot.IDENTITY])
    frame = rot.axis_angle([0.0, 1.0, 0.0], -np.pi / 2)  # hinge x axis -> world z
    coeffs = dict(eps_linear="eps_lin", eps_rotational="eps_rot", tau="tau")
    if viscous:
        coeffs["damping"] = "b"
    if stribeck:
        coeffs["stribeck"] = Stribeck("mu_kinematic", "mu_delta", "zeta")
        coeffs["r_int"] = "r"
    elif dry:
        coeffs["friction"] = "mu"
        coeffs["r_int"] = "r"
    hinge = hinge_from_world("pivot", None, 0, np.zeros(3), frame, ref_r, ref_e, **coeffs)
    body = Body("pendulum", "m", ("J_xx", "J_yy", "J"))
    free = ("J", "b") + (("mu",) if dry and not stribeck else ()) + (
        ("mu_kinematic", "mu_delta", "zeta") if stribeck else ()
    )
    return MultibodyModel(
        "pendulum", (body,), (hinge,), MappingProxyType(p), ObservationSpec((0,)), 0, free_default=free
    )


# ---------------------------------------------------------------------------
# Furuta pendulum


FURUTA_DEFAULTS = MappingProxyType(
    {
        # fixed
        "l1": 0.128,
        "lA": 0.248,
        "l2": 0.92,
        "m_A": 0.238,
        "m_B": 0.428,
        "J_Bxx": 1e-4,
        "J_shaft": 4e-4,
        "r1": 1.0,
        "r2": 1.0,
        "tau1": 0.02,
        "tau2": 0.02,
        "eps1_lin": 1e-4,
        "eps2_lin": 1e-4,
        "eps1_rot": 1e-4,
        "eps2_rot": 1e-4,
        # initial values of the identified parameters
        "J_Axx": 0.01,
        "J_Ayy": 0.01,
        "J_Azz": 0.01,
        "J_Byy": 0.01,
        "J_Bzz": 0.01,
        "g_tilt": rot.IDENTITY,
        "b1": 1e-4,
        "b2": 1e-4,
        "mu1": 1e-4,
        "mu2": 1e-4,
        "K": 0.1,
    }
)

FURUTA_FREE = ("J_Axx", "J_Ayy", "J_Azz", "J_Byy", "J_Bzz", "g_tilt", "b1", "b2", "mu1", "mu2", "K")

# parameters used to generate synthetic release data
FURUTA_SYNTHETIC = MappingProxyType(
    {
        "eps1_lin": 1e-6,
        "eps2_lin": 1e-6,
        "eps1_rot": 1e-6,
        "eps2_rot": 1e-6,
        "b1": 1e-3,
        "b2": 1e-4,
        "mu1": 0.0,
        "mu2": 0.0,
        "J_shaft": 1e-4,
        "J_Axx": 1e-4,
        "J_Ayy": 0.003,
        "J_Azz": 0.003,
        "J_Bxx": 1e-4,
        "J_Byy": 0.004,
        "J_Bzz": 0.004,
    }
)


def build_furuta(params: Mapping | None = None, dry: bool | None = None) -> MultibodyModel:
    """Rotary arm ``A`` on a motorized vertical hinge carrying pendulum ``B``.

    World y points up. At zero angles arm ``A`` lies along world x with its
    body x axis along the arm and body z vertical; pendulum ``B`` hangs down
    with body x along the rod and body y along the second hinge axis.
    """
    p = dict(FURUTA_DEFAULTS)
    p.update(params or {})
    if dry is None:
        dry = float(ad.primal(p["mu1"])) > 0.0 or float(ad.primal(p["mu2"])) > 0.0
    l1, lA, l2 = (float(p[k]) for k in ("l1", "lA", "l2"))
    e_A = rot.axis_angle([1.0, 0.0, 0.0], -np.pi / 2)
    e_B = rot.from_matrix(np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]]).T)
    ref_r = np.array([[l1, 0.0, 0.0], [l1 + lA, -l2, 0.0]])
    ref_e = np.array([e_A, e_B])

    h1 = dict(eps_linear="eps1_lin", eps_rotational="eps1_rot", tau="tau1", damping="b1",
              motor_gain="K", shaft_inertia="J_shaft", control=0)
    h2 = dict(eps_linear="eps2_lin", eps_rotational="eps2_rot", tau="tau2", damping="b2")
    if dry:
        h1.update(friction="mu1", r_int="r1")
        h2.update(friction="mu2", r_int="r2")
    frame1 = rot.axis_angle([0.0, 0.0, 1.0], np.pi / 2)  # hinge x axis -> world y
    hinge1 = hinge_from_world("arm", None, 0, np.zeros(3), frame1, ref_r, ref_e, **h1)
    hinge2 = hinge_from_world("pendulum", 0, 1, np.array([l1 + lA, 0.0, 0.0]), rot.IDENTITY, ref_r, ref_e, **h2)
    bodies = (
        Body("A", "m_A", ("J_Axx", "J_Ayy", "J_Azz")),
        Body("B", "m_B", ("J_Bxx", "J_Byy", "J_Bzz")),
    )
    free = FURUTA_FREE if dry else tuple(k for k in FURUTA_FREE if k not in ("mu1", "mu2"))
    return MultibodyModel(
        "furuta", bodies, (hinge1, hinge2), MappingProxyType(p), ObservationSpec((0, 1)), 1, free_default=free
    )


# parameters whose upper bound is finite by default; all others live in [0, inf)
DEFAULT_UPPER = MappingProxyType({"K": 100.0})
# masses and inertias stay strictly positive so the mass matrix remains invertible
POSITIVE_FLOOR = 1e-8


def default_bounds(name: str) -> tuple[float, float]:
    lower = POSITIVE_FLOOR if name == "m" or name.startswith(("J", "m_")) else 0.0
    return lower, DEFAULT_UPPER.get(name, np.inf)


def build_model(name: str, params: Mapping | None = None, **options) -> MultibodyModel:
    builders = {"pendulum": build_pendulum, "furuta": build_furuta}
    try:
        return builders[name](params, **options)
    except KeyError:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(builders)}") from None
