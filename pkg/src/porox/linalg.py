"""Dense and sparse direct solvers used by the HDG assembly.

Thin layer over LAPACK (via numpy/scipy) and SuperLU that adds the
singularity checks and error messages the solver relies on.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SINGULAR_HINT = (
    "this usually means tau vanishes on some faces (upwind tau on a mesh "
    "with phi = 0 faces); use the generalized stabilization instead"
)


class SingularMatrixError(ArithmeticError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


def dense_lu_solve(a, b, rtol: float = 1e-14) -> np.ndarray:
    """Solve ``a x = b`` by LU with partial pivoting (``b`` may have many columns)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if b.shape[0] != a.shape[0]:
        raise ValueError("right-hand side has the wrong number of rows")
    scale = np.abs(a).max() if a.size else 0.0
    if scale == 0.0:
        raise SingularMatrixError("matrix is zero")
    with warnings.catch_warnings():
        # singularity is reported below with our own error
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(a, check_finite=True)
    if np.abs(np.diag(lu)).min() < rtol * scale:
        raise SingularMatrixError("matrix is singular to working precision")
    return sla.lu_solve((lu, piv), b)


def batched_solve(a: np.ndarray, b: np.ndarray, rtol: float = 1e-14) -> np.ndarray:
    """Solve a stack of dense systems ``a[e] x[e] = b[e]``.

    Raises ``SingularMatrixError`` naming the first offending batch entry.
    """
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        x = None
    if x is None or not np.all(np.isfinite(x)):
        for e in range(len(a)):
            try:
                dense_lu_solve(a[e], b[e], rtol)
            except SingularMatrixError as exc:
                raise SingularMatrixError(f"batch entry {e}: {exc}", index=e) from None
        raise SingularMatrixError("batched solve failed")
    return x


def sparse_assemble(rows, cols, vals, n: int) -> sp.csr_matrix:
    """Compressed-sparse-row matrix from triplets; duplicates are summed."""
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    if not (len(rows) == len(cols) == len(vals)):
        raise ValueError("triplet arrays differ in length")
    if len(rows) and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n):
        raise IndexError("triplet index out of range")
    # stable sort fixes the summation order independently of the input order
    order = np.lexsort((cols, rows))
    mat = sp.coo_matrix((vals[order], (rows[order], cols[order])), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


class SparseLU:
    """Sparse LU factorization.

    The default ordering is minimum degree on ``A^T + A``; HDG trace matrices
    have a symmetric sparsity pattern, for which it fills far less than COLAMD.
    """

    def __init__(self, a: sp.spmatrix, ordering: str = "MMD_AT_PLUS_A"):
        a = sp.csc_matrix(a)
        if a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        self.shape = a.shape
        self._a = a
        if a.shape[0] == 0:
            self._lu = None
            return
        try:
            self._lu = spla.splu(a, permc_spec=ordering)
        except RuntimeError as exc:
            raise SingularMatrixError(f"sparse factorization failed ({exc}); {SINGULAR_HINT}") from None
        udiag = np.abs(self._lu.U.diagonal())
        if udiag.min() <= 1e-14 * max(udiag.max(), 1e-300):
            raise SingularMatrixError(f"matrix is singular to working precision; {SINGULAR_HINT}")

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self._lu is None:
            return np.zeros_like(b)
        x = self._lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SingularMatrixError(f"non-finite solution; {SINGULAR_HINT}")
        return x


def sparse_lu_solve(a: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    return SparseLU(a).solve(b)


def relative_residual(a, x, b) -> float:
    nb = np.linalg.norm(b)
    r = np.linalg.norm(a @ x - b)
    return float(r / nb) if nb > 0 else float(r)
