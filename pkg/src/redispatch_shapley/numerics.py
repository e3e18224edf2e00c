"""Sparse assembly and LU solves shared by power flow, DC OPF and the IPM.

Factorization is delegated to SuperLU (through scipy) with a COLAMD
fill-reducing column ordering and threshold partial pivoting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import maximum_bipartite_matching

PIVOT_THRESHOLD = 1e-3


class SingularMatrixError(ArithmeticError):
    """Raised when solving with a factorization flagged singular."""

    def __init__(self, message: str, column: Optional[int] = None):
        super().__init__(message)
        self.column = column


def sparse_from_triplets(n_rows, n_cols, rows, cols, values) -> sp.csc_matrix:
    """Compress (row, col, value) triplets; duplicate entries are summed."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values)
    if not (rows.shape == cols.shape == values.shape):
        raise ValueError("triplet arrays must have equal length")
    if rows.size:
        if rows.min() < 0 or rows.max() >= n_rows:
            raise IndexError("row index out of range")
        if cols.min() < 0 or cols.max() >= n_cols:
            raise IndexError("column index out of range")
    m = sp.coo_matrix((values, (rows, cols)), shape=(n_rows, n_cols)).tocsc()
    m.sum_duplicates()
    m.sort_indices()
    return m


def _unmatched_column(a: sp.csc_matrix) -> Optional[int]:
    pattern = a.copy()
    pattern.data = np.ones_like(pattern.data, dtype=float)
    pattern.eliminate_zeros()
    # row_of_col[j] is the row matched to column j, -1 if none
    row_of_col = maximum_bipartite_matching(pattern.tocsr(), perm_type="row")
    missing = np.flatnonzero(row_of_col < 0)
    return int(missing[0]) if missing.size else None


@dataclass(frozen=True)
class LuFactorization:
    """Pr @ A @ Pc = L @ U, or ``singular`` with the offending column."""

    shape: tuple
    perm_r: Optional[np.ndarray] = None
    perm_c: Optional[np.ndarray] = None
    L: Optional[sp.csc_matrix] = None
    U: Optional[sp.csc_matrix] = None
    singular: bool = False
    pivot_column: Optional[int] = None
    _lu: object = field(default=None, repr=False, compare=False)

    def row_permutation(self) -> sp.csc_matrix:
        n = self.shape[0]
        return sp.csc_matrix((np.ones(n), (self.perm_r, np.arange(n))), shape=self.shape)

    def column_permutation(self) -> sp.csc_matrix:
        n = self.shape[0]
        return sp.csc_matrix((np.ones(n), (np.arange(n), self.perm_c)), shape=self.shape)

    def solve(self, b):
        return solve_linear(self, b)


def lu_factorize(a, pivot_threshold: float = PIVOT_THRESHOLD, ordering: str = "COLAMD") -> LuFactorization:
    a = sp.csc_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    n = a.shape[0]
    if n == 0:
        return LuFactorization(shape=(0, 0), perm_r=np.zeros(0, int), perm_c=np.zeros(0, int))
    column = _unmatched_column(a)
    if column is not None:
        return LuFactorization(shape=a.shape, singular=True, pivot_column=column)
    try:
        lu = spla.splu(
            a,
            permc_spec=ordering,
            diag_pivot_thresh=pivot_threshold,
            options={"SymmetricMode": False},
        )
    except RuntimeError:
        return LuFactorization(shape=a.shape, singular=True, pivot_column=None)
    diag = lu.U.diagonal()
    if not np.all(np.isfinite(diag)) or np.any(diag == 0):
        bad = int(lu.perm_c[np.flatnonzero((diag == 0) | ~np.isfinite(diag))[0]])
        return LuFactorization(shape=a.shape, singular=True, pivot_column=bad)
    return LuFactorization(
        shape=a.shape,
        perm_r=lu.perm_r.copy(),
        perm_c=lu.perm_c.copy(),
        L=lu.L,
        U=lu.U,
        _lu=lu,
    )


def solve_linear(f: LuFactorization, b) -> np.ndarray:
    if f.singular:
        where = "" if f.pivot_column is None else f" (pivot column {f.pivot_column})"
        raise SingularMatrixError("matrix is singular" + where, f.pivot_column)
    b = np.asarray(b)
    if b.shape[0] != f.shape[0]:
        raise ValueError(f"right-hand side has length {b.shape[0]}, expected {f.shape[0]}")
    if f.shape[0] == 0:
        return np.zeros_like(b, dtype=float)
    if np.iscomplexobj(b):
        return f._lu.solve(np.ascontiguousarray(b.real)) + 1j * f._lu.solve(np.ascontiguousarray(b.imag))
    return f._lu.solve(np.ascontiguousarray(b, dtype=float))


def spsolve(a, b) -> np.ndarray:
    """Factor and solve in one call; raises SingularMatrixError."""
    return solve_linear(lu_factorize(a), b)
