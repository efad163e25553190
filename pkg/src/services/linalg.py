"""Sparse symmetric solves: direct factorization with a conjugate-gradient fallback"""

import logging
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from src.core.config import settings
from src.core.exceptions import SolverError

logger = logging.getLogger(__name__)


def consolidate(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, shape, drop: float = 1e-14) -> sp.csr_matrix:
    """Coordinate triplets to CSR with duplicates summed and near-zeros dropped"""
    mat = sp.coo_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape).tocsr()
    mat.sum_duplicates()
    if mat.nnz:
        cutoff = drop * np.abs(mat.data).max()
        mat.data[np.abs(mat.data) < cutoff] = 0.0
        mat.eliminate_zeros()
    mat.sort_indices()
    return mat


class SymmetricSolver:
    """Reusable inverse of a sparse symmetric positive definite matrix"""

    def __init__(self, matrix: sp.spmatrix, label: str = "system"):
        if matrix.shape[0] != matrix.shape[1]:
            raise SolverError(f"{label}: matrix must be square, got {matrix.shape}")
        self.matrix = sp.csc_matrix(matrix)
        self.label = label
        self._lu: Optional[spla.SuperLU] = None
        try:
            self._lu = spla.splu(self.matrix)
        except (RuntimeError, ValueError) as e:
            logger.warning(f"{label}: factorization failed ({e}), falling back to conjugate gradients")

    @property
    def direct(self) -> bool:
        return self._lu is not None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self._lu is not None:
            x = self._lu.solve(rhs)
            if np.all(np.isfinite(x)):
                return x
            logger.warning(f"{self.label}: non-finite direct solution, retrying with conjugate gradients")
        if rhs.ndim == 2:
            return np.column_stack([self._cg(rhs[:, k]) for k in range(rhs.shape[1])])
        return self._cg(rhs)

    def _cg(self, rhs: np.ndarray) -> np.ndarray:
        if not np.any(rhs):
            return np.zeros_like(rhs)
        diag = self.matrix.diagonal()
        if np.any(diag <= 0):
            raise SolverError(f"{self.label}: non-positive diagonal, conjugate gradients not applicable")
        precond = sp.diags(1.0 / diag)
        x, info = spla.cg(self.matrix, rhs, rtol=settings.CG_FALLBACK_TOL,
                          maxiter=settings.CG_MAX_ITER, M=precond)
        if info != 0:
            raise SolverError(f"{self.label}: conjugate gradients did not converge (info={info})")
        return x
