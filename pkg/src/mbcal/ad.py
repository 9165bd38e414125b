"""Forward-mode automatic differentiation with batched tangents.

A :class:`Dual` carries a primal array of shape ``S`` and a tangent array of
shape ``S + (k,)``: ``k`` directional derivatives propagated side by side.
Elementary operations with a nontrivial derivative go through :func:`lift`,
which looks up a JVP rule in the registry. Structural operations (indexing,
stacking, sums, contractions) are linear and handled directly.

All helpers accept plain arrays as well, so numerical code can be written once
and run either on floats or on dual numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class MissingRule(KeyError):
    """Raised when an operation has no registered JVP rule."""


class SingularBasis(ValueError):
    """The active-set basis of an LCP solution is numerically singular."""


class NonzeroPrimal(ValueError):
    """A rule that is only valid at a zero primal was called elsewhere."""


class Dual:
    """Primal value with ``k`` tangent columns in the trailing axis."""

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, primal, tangent):
        primal = np.asarray(primal, dtype=float)
        tangent = np.asarray(tangent, dtype=float)
        if tangent.shape[:-1] != primal.shape:
            raise ValueError(
                f"tangent shape {tangent.shape} does not extend primal shape {primal.shape}"
            )
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self) -> tuple[int, ...]:
        return self.primal.shape

    @property
    def ndim(self) -> int:
        return self.primal.ndim

    @property
    def width(self) -> int:
        return self.tangent.shape[-1]

    def __len__(self) -> int:
        return len(self.primal)

    def __repr__(self) -> str:
        return f"Dual(primal={self.primal!r}, width={self.width})"

    def __getitem__(self, idx) -> "Dual":
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.primal[idx], self.tangent[idx + (slice(None),)])

    # arithmetic -------------------------------------------------------------
    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __pos__(self):
        return self

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        if isinstance(exponent, Dual):
            raise MissingRule("pow with a dual exponent")
        if exponent == 2:
            return lift("square", self)
        return lift("pow", self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


TangentBundle = Dual


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def primal(x):
    """Primal part of ``x`` (identity for plain arrays)."""
    return x.primal if isinstance(x, Dual) else np.asarray(x, dtype=float)


def tangent_width(*xs) -> int | None:
    for x in xs:
        if isinstance(x, Dual):
            return x.width
    return None


def constant(x, width: int) -> Dual:
    x = np.asarray(x, dtype=float)
    return Dual(x, np.zeros(x.shape + (width,)))


def _tangent_like(x, width: int, shape: tuple[int, ...]):
    """Tangent of ``x`` broadcast to ``shape + (width,)``."""
    if isinstance(x, Dual):
        return np.broadcast_to(x.tangent, shape + (width,))
    return np.zeros(shape + (width,))


# ---------------------------------------------------------------------------
# Basic arithmetic. These are the hot path, so they bypass the registry.


def add(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.add(a, b)
    p = primal(a) + primal(b)
    if isinstance(a, Dual) and isinstance(b, Dual):
        t = a.tangent + b.tangent
    else:
        d = a if isinstance(a, Dual) else b
        t = d.tangent
    if t.shape[:-1] != p.shape:
        t = np.broadcast_to(t, p.shape + (t.shape[-1],))
    return Dual(p, t)


def sub(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.subtract(a, b)
    p = primal(a) - primal(b)
    if isinstance(a, Dual) and isinstance(b, Dual):
        t = a.tangent - b.tangent
    elif isinstance(a, Dual):
        t = a.tangent
    else:
        t = -b.tangent
    if t.shape[:-1] != p.shape:
        t = np.broadcast_to(t, p.shape + (t.shape[-1],))
    return Dual(p, t)


def mul(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.multiply(a, b)
    pa, pb = primal(a), primal(b)
    p = pa * pb
    if isinstance(a, Dual) and isinstance(b, Dual):
        t = a.tangent * pb[..., None] + pa[..., None] * b.tangent
    elif isinstance(a, Dual):
        t = a.tangent * pb[..., None]
    else:
        t = pa[..., None] * b.tangent
    if t.shape[:-1] != p.shape:
        t = np.broadcast_to(t, p.shape + (t.shape[-1],))
    return Dual(p, t)


def div(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.divide(a, b)
    pa, pb = primal(a), primal(b)
    p = pa / pb
    if isinstance(b, Dual):
        t = -(p / pb)[..., None] * b.tangent
        if isinstance(a, Dual):
            t = t + a.tangent / pb[..., None]
    else:
        t = a.tangent / pb[..., None]
    if t.shape[:-1] != p.shape:
        t = np.broadcast_to(t, p.shape + (t.shape[-1],))
    return Dual(p, t)


# ---------------------------------------------------------------------------
# Rule registry for elementary operations.


@dataclass(frozen=True)
class Rule:
    """Primal evaluation plus JVP ``(primals, out, tangents) -> out tangent``.

    ``tangents`` holds ``None`` for constant arguments.
    """

    primal: Callable
    jvp: Callable


_RULES: dict[str, Rule] = {}


def register(name: str, primal_fn: Callable, jvp_fn: Callable) -> None:
    """Add a rule. Only called at import time of the defining modules."""
    if name in _RULES:
        raise ValueError(f"rule {name!r} already registered")
    _RULES[name] = Rule(primal_fn, jvp_fn)


def registered_rules() -> tuple[str, ...]:
    return tuple(sorted(_RULES))


def lift(op: str, *args):
    """Apply registered operation ``op``, propagating tangents if any input is dual."""
    try:
        rule = _RULES[op]
    except KeyError:
        raise MissingRule(op) from None
    primals = [primal(a) if isinstance(a, (Dual, np.ndarray)) else a for a in args]
    out = rule.primal(*primals)
    if not any(isinstance(a, Dual) for a in args):
        return out
    tangents = [a.tangent if isinstance(a, Dual) else None for a in args]
    return Dual(out, rule.jvp(primals, out, tangents))


def _unary(fn, dfn):
    def jvp(primals, out, tangents):
        return dfn(primals[0], out)[..., None] * tangents[0]

    return Rule(fn, jvp)


for _name, _rule in {
    "square": _unary(np.square, lambda x, y: 2.0 * x),
    "sin": _unary(np.sin, lambda x, y: np.cos(x)),
    "cos": _unary(np.cos, lambda x, y: -np.sin(x)),
    "exp": _unary(np.exp, lambda x, y: y),
    "sqrt": _unary(np.sqrt, lambda x, y: 0.5 / y),
    "arccos": _unary(np.arccos, lambda x, y: -1.0 / np.sqrt(1.0 - x * x)),
    "abs": _unary(np.abs, lambda x, y: np.sign(x)),
}.items():
    _RULES[_name] = _rule


def _pow_jvp(primals, out, tangents):
    x, e = primals
    return (e * np.power(x, e - 1.0))[..., None] * tangents[0]


_RULES["pow"] = Rule(lambda x, e: np.power(x, e), _pow_jvp)


def _arctan2_jvp(primals, out, tangents):
    y, x = primals
    r2 = x * x + y * y
    t = 0.0
    if tangents[0] is not None:
        t = t + (x / r2)[..., None] * tangents[0]
    if tangents[1] is not None:
        t = t - (y / r2)[..., None] * tangents[1]
    return np.broadcast_to(t, out.shape + (t.shape[-1],))


_RULES["arctan2"] = Rule(np.arctan2, _arctan2_jvp)


def _solve_primal(A, b):
    return np.linalg.solve(A, b[..., None])[..., 0]


def _solve_jvp(primals, out, tangents):
    A, b = primals
    dA, db = tangents
    width = (dA if dA is not None else db).shape[-1]
    rhs = np.zeros(out.shape + (width,))
    if db is not None:
        rhs = rhs + db
    if dA is not None:
        rhs = rhs - np.einsum("...ijk,...j->...ik", dA, out)
    return np.linalg.solve(A, rhs)


_RULES["solve"] = Rule(_solve_primal, _solve_jvp)


def _maximum_jvp(primals, out, tangents):
    x, c = primals
    return (x >= c)[..., None] * tangents[0]


_RULES["maximum"] = Rule(np.maximum, _maximum_jvp)


def square(x):
    return lift("square", x)


def sin(x):
    return lift("sin", x)


def cos(x):
    return lift("cos", x)


def exp(x):
    return lift("exp", x)


def sqrt(x):
    return lift("sqrt", x)


def arccos(x):
    return lift("arccos", x)


def arctan2(y, x):
    return lift("arctan2", y, x)


def absolute(x):
    return lift("abs", x)


def maximum(x, c: float):
    """Elementwise ``max(x, c)`` for a constant floor ``c``."""
    return lift("maximum", x, c)


def solve(A, b):
    """Batched ``A x = b`` for vector right-hand sides ``b`` of shape ``(..., n)``."""
    return lift("solve", A, b)


def wrap_angle(x):
    """Wrap to (-pi, pi]; derivative is one everywhere except at the cut."""
    p = primal(x)
    wrapped = p - 2.0 * np.pi * np.ceil((p - np.pi) / (2.0 * np.pi))
    if isinstance(x, Dual):
        return Dual(wrapped, x.tangent)
    return wrapped


# ---------------------------------------------------------------------------
# Structural (linear) operations.


def _axis(axis: int, ndim: int) -> int:
    return axis + ndim if axis < 0 else axis


def stack(xs: Sequence, axis: int = 0):
    width = tangent_width(*xs)
    ps = np.broadcast_arrays(*[primal(x) for x in xs])
    p = np.stack(ps, axis=axis)
    if width is None:
        return p
    ts = [_tangent_like(x, width, ps[0].shape) for x in xs]
    return Dual(p, np.stack(ts, axis=_axis(axis, p.ndim)))


def concatenate(xs: Sequence, axis: int = 0):
    width = tangent_width(*xs)
    ps = [primal(x) for x in xs]
    p = np.concatenate(ps, axis=axis)
    if width is None:
        return p
    ax = _axis(axis, p.ndim)
    ts = [x.tangent if isinstance(x, Dual) else np.zeros(primal(x).shape + (width,)) for x in xs]
    return Dual(p, np.concatenate(ts, axis=ax))


def sum(x, axis: int | None = None):  # noqa: A001 - mirrors numpy naming
    if not isinstance(x, Dual):
        return np.sum(x, axis=axis)
    if axis is None:
        axes = tuple(range(x.ndim))
        return Dual(np.sum(x.primal), np.sum(x.tangent, axis=axes))
    ax = _axis(axis, x.ndim)
    return Dual(np.sum(x.primal, axis=ax), np.sum(x.tangent, axis=ax))


def reshape(x, shape: tuple[int, ...]):
    if not isinstance(x, Dual):
        return np.reshape(x, shape)
    p = np.reshape(x.primal, shape)
    return Dual(p, np.reshape(x.tangent, p.shape + (x.width,)))


def swapaxes(x, a: int, b: int):
    if not isinstance(x, Dual):
        return np.swapaxes(x, a, b)
    n = x.ndim
    return Dual(np.swapaxes(x.primal, a, b), np.swapaxes(x.tangent, _axis(a, n), _axis(b, n)))


def expand_dims(x, axis: int):
    if not isinstance(x, Dual):
        return np.expand_dims(x, axis)
    p = np.expand_dims(x.primal, axis)
    return Dual(p, np.expand_dims(x.tangent, _axis(axis, p.ndim)))


def broadcast_to(x, shape: tuple[int, ...]):
    if not isinstance(x, Dual):
        return np.broadcast_to(x, shape)
    return Dual(np.broadcast_to(x.primal, shape), np.broadcast_to(x.tangent, tuple(shape) + (x.width,)))


def where(cond, a, b):
    cond = np.asarray(cond)
    p = np.where(cond, primal(a), primal(b))
    width = tangent_width(a, b)
    if width is None:
        return p
    ta = _tangent_like(a, width, p.shape)
    tb = _tangent_like(b, width, p.shape)
    return Dual(p, np.where(cond[..., None], ta, tb))


def _free_letter(subscripts: str) -> str:
    for c in "zyxwvutsrqponmlkjihgfedcba":
        if c not in subscripts:
            return c
    raise ValueError("einsum subscripts exhaust the alphabet")


def einsum(subscripts: str, *operands):
    """``numpy.einsum`` with the product rule over dual operands."""
    ps = [primal(o) for o in operands]
    p = np.einsum(subscripts, *ps, optimize=len(operands) > 2)
    if not any(isinstance(o, Dual) for o in operands):
        return p
    ins, out = subscripts.replace(" ", "").split("->")
    terms = ins.split(",")
    k = _free_letter(subscripts)
    t = None
    for i, o in enumerate(operands):
        if not isinstance(o, Dual):
            continue
        spec = ",".join(term + k if j == i else term for j, term in enumerate(terms))
        args = [o.tangent if j == i else ps[j] for j in range(len(operands))]
        contrib = np.einsum(f"{spec}->{out}{k}", *args, optimize=len(operands) > 2)
        t = contrib if t is None else t + contrib
    return Dual(p, t)


def matmul(a, b):
    """Matrix product following numpy's batched ``@`` for ndim >= 1 operands."""
    pa, pb = primal(a), primal(b)
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return pa @ pb
    if pa.ndim >= 2 and pb.ndim >= 2:
        return einsum("...ij,...jk->...ik", a, b)
    if pa.ndim >= 2 and pb.ndim == 1:
        return einsum("...ij,j->...i", a, b)
    if pa.ndim == 1 and pb.ndim >= 2:
        return einsum("j,...jk->...k", a, b)
    return einsum("i,i->", a, b)


def matvec(A, x):
    """Batched ``A @ x`` with ``A: (..., m, n)`` and ``x: (..., n)``."""
    return einsum("...ij,...j->...i", A, x)


def dot(a, b):
    """Inner product over the last axis."""
    return sum(a * b, axis=-1)


def norm(x):
    return sqrt(dot(x, x))


def cross(a, b):
    a = a if isinstance(a, Dual) else np.asarray(a, dtype=float)
    b = b if isinstance(b, Dual) else np.asarray(b, dtype=float)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def skew(a):
    """Cross-product matrix: ``skew(a) @ b == cross(a, b)``."""
    z = np.zeros(primal(a).shape[:-1])
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    rows = [stack([z, -a2, a1], axis=-1), stack([a2, z, -a0], axis=-1), stack([-a1, a0, z], axis=-1)]
    return stack(rows, axis=-2)


# ---------------------------------------------------------------------------
# Seeding and Jacobians.


def seed(x, columns) -> Dual:
    """Dual whose tangent selects ``columns`` of the identity.

    ``columns`` has the same shape as ``x`` and gives, per element, the tangent
    column that carries a unit derivative (``-1`` for none).
    """
    x = np.asarray(x, dtype=float)
    columns = np.asarray(columns)
    width = int(columns.max()) + 1 if columns.size else 0
    return seed_width(x, columns, width)


def seed_width(x, columns, width: int) -> Dual:
    x = np.asarray(x, dtype=float)
    columns = np.broadcast_to(np.asarray(columns), x.shape)
    t = np.zeros(x.shape + (width,))
    mask = columns >= 0
    if x.ndim == 0:
        if mask:
            t[int(columns)] = 1.0
        return Dual(x, t)
    idx = np.nonzero(mask)
    t[idx + (columns[mask],)] = 1.0
    return Dual(x, t)


def jacfwd(f: Callable, x) -> np.ndarray:
    """Dense Jacobian of ``f`` at the vector ``x`` with one forward pass."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xd = Dual(x, np.eye(n).reshape(x.shape + (n,)))
    y = f(xd)
    if not isinstance(y, Dual):
        return np.zeros(np.shape(y) + (n,))
    return y.tangent


# ---------------------------------------------------------------------------
# Custom rule: linear complementarity solve.

ACTIVE_TOL = 1e-10
DEGENERATE_MAX = 10  # weakly active indices resolved by enumeration


def _basis_solve(H, active, rhs):
    n = active.shape[-1]
    A = np.where(active[..., None, :], -H, np.broadcast_to(np.eye(n), H.shape))
    try:
        y = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        raise SingularBasis("degenerate active set in LCP tangent") from None
    if not np.all(np.isfinite(y)):
        raise SingularBasis("degenerate active set in LCP tangent")
    return y


def _degenerate_tangent(H, active, weak, rhs):
    """Directional derivative per tangent column when some indices have ``z = 0 = w``.

    Each weakly active index may enter the basis or not; for every column the
    sign pattern with ``z_dot >= 0`` on entering and ``w_dot >= 0`` on the
    others is chosen (the tangent complementarity problem).
    """
    idx = np.flatnonzero(weak)
    width = rhs.shape[-1]
    out = np.zeros_like(rhs)
    done = np.zeros(width, dtype=bool)
    for mask in range(1 << idx.size):
        act = active.copy()
        enter = np.array([(mask >> j) & 1 for j in range(idx.size)], dtype=bool)
        act[idx[enter]] = True
        try:
            y = _basis_solve(H, act, rhs)
        except SingularBasis:
            continue
        tol = 1e-10 * (np.abs(y).max(axis=0) + 1e-300)
        ok = np.all(y[idx] >= -tol, axis=0) & ~done
        if ok.any():
            out[:, ok] = np.where(act[:, None], y[:, ok], 0.0)
            done |= ok
        if done.all():
            break
    if not done.all():
        raise SingularBasis("no consistent active set for LCP tangent")
    return out


def jvp_lcp(H, q, z, H_dot, q_dot):
    """Tangent of the LCP solution ``z`` of ``w = H z + q``.

    Batched over leading axes. With active set ``alpha = {z > tol}`` the basis
    ``A = [-H[:, alpha], I[:, beta]]`` satisfies ``A y_dot = q_dot + H_dot z``;
    the solution tangent is ``y_dot`` restricted to ``alpha``. Weakly active
    indices (``z = 0 = w``) get the one-sided derivative along each tangent
    column.
    """
    H = np.asarray(H, dtype=float)
    z = np.asarray(z, dtype=float)
    width = (q_dot if q_dot is not None else H_dot).shape[-1]
    active = z > ACTIVE_TOL
    rhs = np.zeros(z.shape + (width,))
    if q_dot is not None:
        rhs = rhs + q_dot
    if H_dot is not None:
        rhs = rhs + np.einsum("...ijk,...j->...ik", H_dot, z)
    w = np.einsum("...ij,...j->...i", H, z) + np.asarray(q, dtype=float)
    scale = 1.0 + np.abs(w).max(axis=-1, keepdims=True)
    weak = ~active & (np.abs(w) <= ACTIVE_TOL * scale)
    y_dot = np.where(active[..., None], _basis_solve(H, active, rhs), 0.0)
    if weak.any():
        Hb = np.broadcast_to(H, z.shape + z.shape[-1:])
        rb = np.broadcast_to(rhs, y_dot.shape)
        for i in np.ndindex(z.shape[:-1]):
            if weak[i].any() and weak[i].sum() <= DEGENERATE_MAX:
                y_dot[i] = _degenerate_tangent(Hb[i], active[i], weak[i], rb[i])
    return y_dot


def _lcp_primal(H, q):
    from . import mlcp

    H = np.asarray(H, dtype=float)
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        return mlcp.lemke(H, q)
    lead = q.shape[:-1]
    n = q.shape[-1]
    z = mlcp.lcp_batch(H.reshape(-1, n, n), q.reshape(-1, n))
    return z.reshape(lead + (n,))


def _lcp_jvp(primals, out, tangents):
    H, q = primals
    return jvp_lcp(H, q, out, tangents[0], tangents[1])


_RULES["lcp"] = Rule(_lcp_primal, _lcp_jvp)


def lcp(H, q):
    """Solution ``z`` of ``w = H z + q >= 0, z >= 0, z.w = 0`` (batched)."""
    return lift("lcp", H, q)
