"""Unit quaternions (Hamilton product, scalar first) and on-manifold increments.

Every function works on arrays with arbitrary leading batch axes and on
:class:`mbcal.ad.Dual` inputs.
"""

from __future__ import annotations

import numpy as np

from . import ad

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

SERIES_ANGLE = 1e-7
PI_GUARD = 1e-6


class AngleNearPi(ValueError):
    """The relative rotation is too close to a half turn for a unique log."""


def _arr(x):
    return x if ad.is_dual(x) else np.asarray(x, dtype=float)


def normalize(e):
    e = _arr(e)
    return e / ad.norm(e)[..., None] if ad.is_dual(e) else e / np.linalg.norm(e, axis=-1, keepdims=True)


def conj(e):
    return _arr(e) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b, renormalize: bool = True):
    a, b = _arr(a), _arr(b)
    a0, a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    b0, b1, b2, b3 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    q = ad.stack(
        [
            a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
            a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
            a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
            a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
        ],
        axis=-1,
    )
    return normalize(q) if renormalize else q


# rotation vector -> quaternion ------------------------------------------------


def _half_sinc(x):
    """sin(sqrt(x)/2)/sqrt(x), with its series for small x."""
    x = np.asarray(x, dtype=float)
    small = x < 1e-4
    xs = np.where(small, x, 1.0)
    r = np.sqrt(np.where(small, 1.0, x))
    exact = np.sin(r / 2.0) / r
    series = 0.5 - xs / 48.0 + xs * xs / 3840.0 - xs**3 / 645120.0
    return np.where(small, series, exact)


def _half_sinc_prime(x):
    x = np.asarray(x, dtype=float)
    small = x < 1e-4
    xs = np.where(small, x, 0.0)
    xe = np.where(small, 1.0, x)
    r = np.sqrt(xe)
    exact = np.cos(r / 2.0) / (4.0 * xe) - np.sin(r / 2.0) / (2.0 * xe * r)
    series = -1.0 / 48.0 + xs / 1920.0 - xs * xs / 215040.0
    return np.where(small, series, exact)


def _from_rotvec_primal(psi):
    psi = np.asarray(psi, dtype=float)
    theta = np.linalg.norm(psi, axis=-1)
    small = theta < SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    exact = np.concatenate(
        [np.cos(theta / 2.0)[..., None], (np.sin(theta / 2.0) / safe)[..., None] * psi], axis=-1
    )
    series = np.concatenate([np.ones(theta.shape + (1,)), psi / 2.0], axis=-1)
    series = series / np.linalg.norm(series, axis=-1, keepdims=True)
    return np.where(small[..., None], series, exact)


def jvp_quat_from_rotvec_zero(psi_dot, psi=None):
    """Tangent of ``quat_from_rotvec`` at a zero rotation vector: ``(0, psi_dot/2)``."""
    if psi is not None and np.any(np.asarray(psi) != 0.0):
        raise ad.NonzeroPrimal("zero-rotation rule called with a nonzero rotation vector")
    psi_dot = np.asarray(psi_dot, dtype=float)
    zero = np.zeros(psi_dot.shape[:-2] + (1,) + psi_dot.shape[-1:])
    return np.concatenate([zero, psi_dot / 2.0], axis=-2)



def jvp_quat_from_rotvec_series(psi, psi_dot):
    """General tangent of ``quat_from_rotvec``, valid at any rotation vector."""
    psi = np.asarray(psi, dtype=float)
    x = np.sum(psi * psi, axis=-1)
    s = _half_sinc(x)
    ds = _half_sinc_prime(x)
    xdot = 2.0 * np.einsum("...i,...ik->...k", psi, psi_dot)
    e0_dot = (-s / 4.0)[..., None] * xdot
    ev_dot = ds[..., None, None] * psi[..., :, None] * xdot[..., None, :] + s[..., None, None] * psi_dot
    return np.concatenate([e0_dot[..., None, :], ev_dot], axis=-2)


def _from_rotvec_jvp(primals, out, tangents):
    psi = primals[0]
    psi_dot = tangents[0]
    at_zero = np.all(psi == 0.0, axis=-1)
    if np.all(at_zero):
        return jvp_quat_from_rotvec_zero(psi_dot, psi)
    general = jvp_quat_from_rotvec_series(psi, psi_dot)
    if not np.any(at_zero):
        return general
    return np.where(at_zero[..., None, None], jvp_quat_from_rotvec_zero(psi_dot), general)


ad.register("quat_from_rotvec", _from_rotvec_primal, _from_rotvec_jvp)


def quat_from_rotvec(psi):
    return ad.lift("quat_from_rotvec", psi)


# boxplus / boxminus ---------------------------------------------------------


def boxplus(e, psi):
    """Local increment ``e * exp(psi)``."""
    return quat_mul(e, quat_from_rotvec(psi))


def boxplus_world(e, psi):
    """World-frame increment ``exp(psi) * e``."""
    return quat_mul(quat_from_rotvec(psi), e)


def _log_scales(s, n):
    """``phi = 2 atan2(n, s) / n``, ``d phi / d s`` and ``(d phi / d n) / n`` with series for small ``n``."""
    small = n < 1e-4
    ns = np.where(small, 1.0, n)
    t2 = np.where(small, (n / s) ** 2, 0.0)
    n2 = s * s + n * n
    phi = np.where(small, 2.0 / s * (1.0 - t2 / 3.0 + t2 * t2 / 5.0), 2.0 * np.arctan2(n, s) / ns)
    dphi_ds = -2.0 / n2
    dphi_dn = np.where(
        small,
        -4.0 / (3.0 * s**3) + 8.0 * n * n / (5.0 * s**5),
        2.0 * (s / (n2 * ns * ns) - np.arctan2(n, s) / ns**3),
    )
    return phi, dphi_ds, dphi_dn


def _positive_hemisphere(d):
    return np.where(d[..., :1] < 0.0, -1.0, 1.0)


def _log(d):
    d = np.asarray(d, dtype=float) * _positive_hemisphere(np.asarray(d, dtype=float))
    s = d[..., 0]
    v = d[..., 1:]
    vn = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(vn, s)
    if np.any(angle >= np.pi - PI_GUARD):
        raise AngleNearPi(f"relative rotation angle {angle.max():.9f} too close to pi")
    return _log_scales(s, vn)[0][..., None] * v


def _log_jvp(primals, out, tangents):
    d = np.asarray(primals[0], dtype=float)
    sign = _positive_hemisphere(d)
    d = d * sign
    d_dot = tangents[0] * sign[..., None]
    s, v = d[..., 0], d[..., 1:]
    phi, dphi_ds, dphi_dn = _log_scales(s, np.linalg.norm(v, axis=-1))
    s_dot, v_dot = d_dot[..., 0, :], d_dot[..., 1:, :]
    vv_dot = np.einsum("...i,...ik->...k", v, v_dot)
    scale_dot = dphi_ds[..., None] * s_dot + dphi_dn[..., None] * vv_dot
    return phi[..., None, None] * v_dot + v[..., :, None] * scale_dot[..., None, :]


ad.register("quat_log", _log, _log_jvp)


def quat_log(d):
    """Rotation vector of the unit quaternion ``d`` (shortest of ``d`` and ``-d``)."""
    return ad.lift("quat_log", d)


def boxminus_exact(a, b):
    """Rotation vector ``psi`` with ``boxplus(b, psi) == a`` (local frame)."""
    return quat_log(quat_mul(conj(b), a))


def boxminus_small_angle(a, b):
    """Small-angle log ``2 s v`` of ``conj(b) * a``; only used for residuals."""
    d = quat_mul(conj(b), a)
    return 2.0 * d[..., :1] * d[..., 1:]


def boxminus_world_exact(a, b):
    """Rotation vector ``psi`` with ``boxplus_world(b, psi) == a``."""
    return quat_log(quat_mul(a, conj(b)))


def boxminus_world_small_angle(a, b):
    """World-frame counterpart of :func:`boxminus_small_angle`: ``2 s v`` of ``a * conj(b)``."""
    d = quat_mul(a, conj(b))
    return 2.0 * d[..., :1] * d[..., 1:]


# rotation matrices ------------------------------------------------------------


def rotmat(e):
    e = _arr(e)
    s, x, y, z = e[..., 0], e[..., 1], e[..., 2], e[..., 3]
    rows = [
        ad.stack([1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - s * z), 2.0 * (x * z + s * y)], axis=-1),
        ad.stack([2.0 * (x * y + s * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - s * x)], axis=-1),
        ad.stack([2.0 * (x * z - s * y), 2.0 * (y * z + s * x), 1.0 - 2.0 * (x * x + y * y)], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def rotate_vec(e, x):
    """``e * (0, x) * conj(e)``, evaluated as ``x + 2 s (v x x) + 2 v x (v x x)``."""
    e, x = _arr(e), _arr(x)
    s = e[..., 0:1]
    v = e[..., 1:]
    t = ad.cross(v, x)
    return x + 2.0 * s * t + 2.0 * ad.cross(v, t)


def from_matrix(R) -> np.ndarray:
    """Unit quaternion of a proper rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    i = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if i == 0:
        s = np.sqrt(1.0 + tr) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q = q if q[0] >= 0 else -q
    return q / np.linalg.norm(q)


def axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return quat_from_rotvec(axis / np.linalg.norm(axis) * angle)
