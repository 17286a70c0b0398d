"""Dense tableau simplex and the l1 row regression used for observer tuning."""

from __future__ import annotations

import numpy as np


class LPError(RuntimeError):
    pass


class InfeasibleLP(LPError):
    pass


class UnboundedLP(LPError):
    pass


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]


def _iterate(T: np.ndarray, basis: list[int], c: np.ndarray, tol: float, max_iter: int) -> None:
    """Bland's-rule iterations on a canonical tableau ``T = [B^-1 A | B^-1 b]``."""
    n = T.shape[1] - 1
    for _ in range(max_iter):
        reduced = c - c[basis] @ T[:, :n]
        entering = np.flatnonzero(reduced < -tol)
        if entering.size == 0:
            return
        col = int(entering[0])
        column = T[:, col]
        rows = np.flatnonzero(column > tol)
        if rows.size == 0:
            raise UnboundedLP(f"objective unbounded along column {col}")
        ratios = T[rows, -1] / column[rows]
        best = ratios.min()
        ties = rows[ratios <= best + tol * max(1.0, abs(best))]
        row = int(min(ties, key=lambda i: basis[i]))
        _pivot(T, row, col)
        basis[row] = col
    raise LPError(f"simplex did not terminate in {max_iter} iterations")


def simplex(c, A, b, basis=None, tol: float = 1e-11, max_iter: int = 10_000):
    """Minimize ``c @ x`` subject to ``A x = b`` and ``x >= 0``.

    ``basis`` may name a feasible starting basis (one column per row); otherwise
    a phase-one problem with artificial variables finds one.  Returns ``(x, value)``.
    """
    c = np.asarray(c, dtype=np.float64)
    A = np.array(A, dtype=np.float64, ndmin=2)
    b = np.array(b, dtype=np.float64, ndmin=1)
    m, n = A.shape
    if c.shape != (n,) or b.shape != (m,):
        raise ValueError("inconsistent LP dimensions")

    if basis is not None:
        basis = list(basis)
        B = A[:, basis]
        T = np.linalg.solve(B, np.column_stack([A, b]))
        if np.any(T[:, -1] < -tol):
            raise ValueError("supplied basis is not primal feasible")
        T[:, -1] = np.maximum(T[:, -1], 0.0)
    else:
        sign = np.where(b < 0, -1.0, 1.0)
        T = np.column_stack([A * sign[:, None], np.eye(m), b * sign])
        basis = list(range(n, n + m))
        phase1 = np.concatenate([np.zeros(n), np.ones(m)])
        _iterate(T, basis, phase1, tol, max_iter)
        if T[:, -1] @ phase1[basis] > tol * max(1.0, np.abs(b).max(initial=0.0)):
            raise InfeasibleLP("no point satisfies the equality constraints")
        # drive remaining artificials out of the basis; rows that cannot pivot are redundant
        keep = []
        for i in range(m):
            if basis[i] >= n:
                candidates = np.flatnonzero(np.abs(T[i, :n]) > tol)
                if candidates.size == 0:
                    continue
                _pivot(T, i, int(candidates[0]))
                basis[i] = int(candidates[0])
            keep.append(i)
        T = np.column_stack([T[keep, :n], T[keep, -1]])
        basis = [basis[i] for i in keep]

    _iterate(T, basis, c, tol, max_iter)
    x = np.zeros(n)
    x[basis] = T[:, -1]
    return x, float(c @ x)


def l1_row_fit(target_row, U_o) -> np.ndarray:
    """Gain row ``g`` minimizing ``||target_row - g @ U_o||_1``.

    Written as an LP over ``g = g_plus - g_minus`` and residual
    ``target_row - g @ U_o = p - q`` with nonnegative parts; taking ``p`` or
    ``q`` per residual entry gives a feasible starting basis directly.
    """
    t = np.asarray(target_row, dtype=np.float64)
    U_o = np.array(U_o, dtype=np.float64, ndmin=2)
    n_y, n_x = U_o.shape
    if t.shape != (n_x,):
        raise ValueError(f"target row has shape {t.shape}, expected ({n_x},)")
    # columns: g_plus (n_y), g_minus (n_y), p (n_x), q (n_x)
    A = np.hstack([U_o.T, -U_o.T, np.eye(n_x), -np.eye(n_x)])
    c = np.concatenate([np.zeros(2 * n_y), np.ones(2 * n_x)])
    basis = [2 * n_y + j if t[j] >= 0 else 2 * n_y + n_x + j for j in range(n_x)]
    x, _ = simplex(c, A, t, basis=basis)
    return x[:n_y] - x[n_y:2 * n_y]
