"""Gaussian elimination with partial pivoting: solve, inverse, determinant, rank."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, RankDeficiencyError

RTOL = 1e-10


def _echelon(a: np.ndarray, b: np.ndarray | None, rtol: float):
    """Row-reduce ``[a | b]`` in place; returns (pivot columns, number of row swaps)."""
    rows, cols = a.shape
    scale = np.abs(a).max() if a.size else 0.0
    tol = rtol * max(scale, np.finfo(float).tiny)
    pivots, swaps, r = [], 0, 0
    for c in range(cols):
        if r == rows:
            break
        p = r + int(np.argmax(np.abs(a[r:, c])))
        if abs(a[p, c]) <= tol:
            continue
        if p != r:
            a[[r, p]] = a[[p, r]]
            if b is not None:
                b[[r, p]] = b[[p, r]]
            swaps += 1
        factors = a[r + 1:, c] / a[r, c]
        a[r + 1:, c:] -= np.outer(factors, a[r, c:])
        a[r + 1:, c] = 0.0
        if b is not None:
            b[r + 1:] -= np.outer(factors, b[r])
        pivots.append(c)
        r += 1
    return pivots, swaps


def _as_matrix(a, name="matrix"):
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def rank(a, rtol: float = RTOL) -> int:
    pivots, _ = _echelon(_as_matrix(a), None, rtol)
    return len(pivots)


def det(a, rtol: float = 0.0) -> float:
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"determinant of non-square matrix {a.shape}")
    pivots, swaps = _echelon(a, None, rtol)
    if len(pivots) < a.shape[0]:
        return 0.0
    return float((-1) ** swaps * np.prod(np.diag(a)))


def solve(a, b, rtol: float = RTOL, allow_rank_deficient: bool = False) -> np.ndarray:
    """Solve ``a x = b`` for square ``a`` (``b`` a vector or a matrix of right-hand sides).

    A singular ``a`` raises :class:`RankDeficiencyError` unless ``allow_rank_deficient``,
    in which case the basic solution (free variables set to 0) is returned; that is
    an exact solution whenever the system is consistent.
    """
    a = _as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"solve needs a square matrix, got {a.shape}")
    b = np.array(b, dtype=np.float64)
    vector = b.ndim == 1
    b = b.reshape(n, -1) if vector else b
    if b.shape[0] != n:
        raise DimensionError(f"right-hand side has {b.shape[0]} rows, matrix has {n}")
    pivots, _ = _echelon(a, b, rtol)
    if len(pivots) < n and not allow_rank_deficient:
        raise RankDeficiencyError(f"matrix is singular: numerical rank {len(pivots)} < {n}", rank=len(pivots))
    x = np.zeros((n, b.shape[1]))
    for r in range(len(pivots) - 1, -1, -1):
        c = pivots[r]
        x[c] = (b[r] - a[r, c + 1:] @ x[c + 1:]) / a[r, c]
    return x.ravel() if vector else x


def inverse(a, rtol: float = RTOL) -> np.ndarray:
    a = _as_matrix(a)
    return solve(a, np.eye(a.shape[0]), rtol)
