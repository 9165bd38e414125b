"""Mixed linear complementarity problems.

Problem form::

    S @ lam + b = [0; w_B],   lam_B >= 0,  w_B >= 0,  lam_B . w_B = 0

The equality partition ``A`` (first ``nA`` rows) is eliminated by a block
LDL^T-style factorization that never pivots on the complementarity block, which
leaves a pure LCP on the ``B`` partition. That LCP is solved by Lemke's method.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


class RayTermination(RuntimeError):
    """Lemke's method left along an unbounded ray without finding a solution."""


class IterationLimit(RuntimeError):
    """Lemke's method exceeded its pivot budget."""


class SingularPivot(np.linalg.LinAlgError):
    """An equality-partition pivot block is singular."""

    def __init__(self, block: int):
        super().__init__(f"singular pivot block {block}")
        self.block = block


@dataclass
class MlcpProblem:
    S: np.ndarray
    b: np.ndarray
    nA: int
    block_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        n = self.b.shape[0]
        if self.S.shape != (n, n):
            raise ValueError(f"S has shape {self.S.shape}, expected {(n, n)}")
        if not 0 <= self.nA <= n:
            raise ValueError("nA out of range")
        if self.block_sizes is None:
            self.block_sizes = (self.nA,) if self.nA else ()
        if sum(self.block_sizes) != self.nA:
            raise ValueError("block sizes must add up to nA")

    @property
    def nB(self) -> int:
        return self.b.shape[0] - self.nA


@dataclass
class MlcpSolution:
    lam: np.ndarray
    w_B: np.ndarray
    nA: int = field(default=0)

    @property
    def lam_A(self) -> np.ndarray:
        return self.lam[: self.nA]

    @property
    def lam_B(self) -> np.ndarray:
        return self.lam[self.nA:]


# ---------------------------------------------------------------------------
# Lemke


def _lex_min_row(T: np.ndarray, rows: np.ndarray, col: int, rhs: int, binv: slice) -> int:
    """Lexicographic minimum ratio over candidate ``rows``."""
    piv = T[rows, col]
    ratios = T[rows, rhs] / piv
    best = ratios.min()
    scale = max(1.0, abs(best))
    tied = rows[np.abs(ratios - best) <= 1e-12 * scale]
    j = binv.start
    while len(tied) > 1 and j < binv.stop:
        r = T[tied, j] / T[tied, col]
        tied = tied[np.abs(r - r.min()) <= 1e-12 * max(1.0, abs(r.min()))]
        j += 1
    return int(tied[0])


def lemke(M: np.ndarray, q: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """Solve ``w = M z + q >= 0, z >= 0, z.w = 0`` by Lemke's method.

    Covering vector of ones, lexicographic ratio test, pivot tolerance
    ``1e-12 * ||M||_inf``.
    """
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    if n == 0 or np.all(q >= 0.0):
        return np.zeros(n)
    if max_iter is None:
        max_iter = 50 * n
    tol = 1e-12 * max(np.abs(M).sum(axis=1).max(), 1.0)

    # columns: w (0..n-1), z (n..2n-1), z0 (2n), rhs (2n+1)
    T = np.zeros((n, 2 * n + 2))
    T[:, :n] = np.eye(n)
    T[:, n:2 * n] = -M
    T[:, 2 * n] = -1.0
    T[:, 2 * n + 1] = q
    basis = np.arange(n)
    rhs = 2 * n + 1
    z0 = 2 * n
    binv = slice(0, n)  # tableau columns of the initial identity hold B^-1

    # z0 enters; the most negative q leaves (lowest index on ties)
    leave = int(np.argmin(q))
    entering = z0
    for _ in range(max_iter):
        _pivot(T, leave, entering)
        left = basis[leave]
        basis[leave] = entering
        if left == z0:
            break
        entering = left + n if left < n else left - n
        col = T[:, entering]
        rows = np.flatnonzero(col > tol)
        if len(rows) == 0:
            raise RayTermination(f"unbounded ray on column {entering}")
        # z0 leaves with priority when it ties for the minimum ratio
        leave = _lex_min_row(T, rows, entering, rhs, binv)
        zrow = np.flatnonzero(basis[rows] == z0)
        if len(zrow):
            r = rows[zrow[0]]
            ratio = T[r, rhs] / col[r]
            if ratio <= T[leave, rhs] / col[leave] + 1e-12 * max(1.0, abs(ratio)):
                leave = int(r)
    else:
        raise IterationLimit(f"no solution after {max_iter} pivots")

    z = np.zeros(2 * n + 1)
    z[basis] = T[:, rhs]
    return np.maximum(z[n:2 * n], 0.0)


def _pivot(T: np.ndarray, r: int, c: int) -> None:
    T[r] /= T[r, c]
    col = T[:, c].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])


# ---------------------------------------------------------------------------
# Block factorization and MLCP solve


@dataclass
class BlockFactors:
    """``S = L @ D @ U`` with unit block-triangular ``L``, ``U``.

    ``D`` is block diagonal over the equality blocks followed by the
    complementarity block ``D_BB`` (the Schur complement of ``S_*``). For
    symmetric ``S``, ``U = L.T``.
    """

    L: np.ndarray
    D: np.ndarray
    U: np.ndarray
    slices: list[slice]


def block_factor(S: np.ndarray, nA: int, block_sizes) -> BlockFactors:
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    work = S.copy()
    L = np.eye(n)
    U = np.eye(n)
    D = np.zeros_like(S)
    slices = []
    start = 0
    for j, size in enumerate(block_sizes):
        sj = slice(start, start + size)
        rest = slice(start + size, n)
        Djj = work[sj, sj]
        try:
            if size and np.linalg.cond(Djj) > 1e14:
                raise np.linalg.LinAlgError
            Dinv = np.linalg.inv(Djj) if size else Djj
        except np.linalg.LinAlgError:
            raise SingularPivot(j) from None
        D[sj, sj] = Djj
        L[rest, sj] = work[rest, sj] @ Dinv
        U[sj, rest] = Dinv @ work[sj, rest]
        work[rest, rest] -= work[rest, sj] @ U[sj, rest]
        slices.append(sj)
        start += size
    sB = slice(nA, n)
    D[sB, sB] = work[sB, sB]
    slices.append(sB)
    return BlockFactors(L, D, U, slices)


def block_ldlt(problem: MlcpProblem, block_sizes=None) -> tuple[np.ndarray, np.ndarray]:
    """Block LDL^T of a problem with symmetric ``S``; returns ``(L, D)``."""
    sizes = problem.block_sizes if block_sizes is None else tuple(block_sizes)
    if sum(sizes) != problem.nA:
        raise ValueError("block sizes must add up to nA")
    f = block_factor(problem.S, problem.nA, sizes)
    return f.L, f.D


def solve_mlcp(problem: MlcpProblem) -> MlcpSolution:
    S, b, nA = problem.S, problem.b, problem.nA
    n = b.shape[0]
    f = block_factor(S, nA, problem.block_sizes)
    sA, sB = slice(0, nA), slice(nA, n)
    # forward substitution: L y = w - b, with w_A = 0
    y_A = np.linalg.solve(f.L[sA, sA], -b[sA]) if nA else np.zeros(0)
    y_star = -b[sB] - f.L[sB, sA] @ y_A
    # D_BB lam_B = w_B + y*  ->  LCP(D_BB, -y*)
    lam_B = lemke(f.D[sB, sB], -y_star)
    if nA:
        # D_AA (U_AA lam_A + U_AB lam_B) = y_A
        x = np.linalg.solve(f.D[sA, sA], y_A) - f.U[sA, sB] @ lam_B
        lam_A = np.linalg.solve(f.U[sA, sA], x)
    else:
        lam_A = np.zeros(0)
    lam = _polish(S, b, nA, np.concatenate([lam_A, lam_B]))
    w_B = S[sB] @ lam + b[sB]
    return MlcpSolution(lam, w_B, nA)


def _violation(S: np.ndarray, b: np.ndarray, nA: int, lam: np.ndarray) -> float:
    w = S @ lam + b
    return max(np.abs(w[:nA]).max(initial=0.0), np.maximum(-w[nA:], 0.0).max(initial=0.0),
               np.maximum(-lam[nA:], 0.0).max(initial=0.0), np.abs(lam[nA:] * w[nA:]).max(initial=0.0))


def _polish(S: np.ndarray, b: np.ndarray, nA: int, lam: np.ndarray, passes: int = 3) -> np.ndarray:
    """Active-set corrections that remove the roundoff left by pivoting on near-degenerate rows.

    Each pass solves the equations of the rows that are active or have
    negative slack; a candidate is kept only if it lowers the complementarity
    violation.
    """
    best, best_v = lam, _violation(S, b, nA, lam)
    for _ in range(passes):
        w = S @ best + b
        act = np.concatenate([np.ones(nA, dtype=bool), (best[nA:] > 0.0) | (w[nA:] < 0.0)])
        cand = np.zeros_like(best)
        try:
            cand[act] = np.linalg.solve(S[np.ix_(act, act)], -b[act])
        except np.linalg.LinAlgError:
            break
        cand[nA:] = np.maximum(cand[nA:], 0.0)
        v = _violation(S, b, nA, cand)
        if v >= best_v:
            break
        best, best_v = cand, v
    return best



# ---------------------------------------------------------------------------
# Batched small LCPs (inverse dynamics solves one per timestep)


def _strong_blocks(pattern: np.ndarray) -> list[np.ndarray]:
    """Strongly connected index groups of ``pattern`` in dependency order."""
    n = pattern.shape[0]
    ncomp, labels = connected_components(csr_matrix(pattern), directed=True, connection="strong")
    groups = [np.flatnonzero(labels == c) for c in range(ncomp)]
    # order so that every group comes after the groups it reads from
    dep = np.zeros((ncomp, ncomp), dtype=bool)
    rows, cols = np.nonzero(pattern)
    dep[labels[rows], labels[cols]] = True
    np.fill_diagonal(dep, False)
    order, done = [], np.zeros(ncomp, dtype=bool)
    while len(order) < ncomp:
        progressed = False
        for c in range(ncomp):
            if not done[c] and not np.any(dep[c] & ~done):
                order.append(c)
                done[c] = True
                progressed = True
        if not progressed:  # pragma: no cover - strong components form a DAG
            raise RuntimeError("cyclic block dependency")
    return [groups[c] for c in order]


def _enumerate_batch(M: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Try every complementary basis for a batch of tiny LCPs.

    Returns the solutions and a mask of entries for which a basis was found.
    """
    N, m, _ = M.shape
    z = np.zeros((N, m))
    found = np.zeros(N, dtype=bool)
    scale = 1e-12 * np.maximum(1.0, np.abs(q).max(axis=1))
    for bits in product((False, True), repeat=m):
        act = np.array(bits)
        todo = ~found
        if not todo.any():
            break
        zc = np.zeros((int(todo.sum()), m))
        if act.any():
            Ma = M[todo][:, act][:, :, act]
            try:
                zc[:, act] = np.linalg.solve(Ma, -q[todo][:, act][..., None])[..., 0]
            except np.linalg.LinAlgError:
                continue
        w = np.einsum("nij,nj->ni", M[todo], zc) + q[todo]
        ok = np.all(zc >= -scale[todo, None], axis=1) & np.all(w >= -scale[todo, None], axis=1)
        idx = np.flatnonzero(todo)[ok]
        z[idx] = np.maximum(zc[ok], 0.0)
        found[idx] = True
    return z, found


def lcp_batch(M: np.ndarray, q: np.ndarray, max_enum: int = 4) -> np.ndarray:
    """Solve ``N`` independent LCPs ``(M[i], q[i])``.

    The shared sparsity pattern is split into strongly connected blocks that
    are solved in dependency order. Blocks up to ``max_enum`` unknowns are
    solved for all batch entries at once by basis enumeration; larger blocks,
    and any entry where enumeration fails, fall back to :func:`lemke`.
    """
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    N, n = q.shape
    z = np.zeros((N, n))
    if n == 0:
        return z
    pattern = np.any(M != 0.0, axis=0)
    np.fill_diagonal(pattern, True)
    solved = np.zeros(n, dtype=bool)
    for g in _strong_blocks(pattern):
        qg = q[:, g] + np.einsum("nij,nj->ni", M[:, g][:, :, solved], z[:, solved])
        Mg = M[:, g][:, :, g]
        if len(g) == 1:
            d = Mg[:, 0, 0]
            zg = np.where(qg[:, 0] < 0.0, -qg[:, 0] / np.where(d > 0, d, 1.0), 0.0)
            bad = (qg[:, 0] < 0.0) & ~(d > 0)
            zg = zg[:, None]
            found = ~bad
        elif len(g) <= max_enum:
            zg, found = _enumerate_batch(Mg, qg)
        else:
            zg = np.zeros((N, len(g)))
            found = np.zeros(N, dtype=bool)
        for i in np.flatnonzero(~found):
            zg[i] = lemke(Mg[i], qg[i])
        z[:, g] = zg
        solved[g] = True
    return z
