"""Dense symmetric linear algebra used throughout the package.

Every routine takes plain ``numpy`` arrays. Symmetric inputs are symmetrized
as ``(A + A.T) / 2`` after validation, so callers may pass matrices that are
symmetric only up to roundoff.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import linalg

SYMMETRY_ATOL = 1e-12
# eigenvalues in [-PSD_RTOL * lambda_max, 0) are treated as roundoff and clamped
PSD_RTOL = 1e-8


class NotPSDError(np.linalg.LinAlgError):
    """Raised when a matrix has an eigenvalue below the roundoff allowance."""

    def __init__(self, min_eig: float, msg: str | None = None):
        self.min_eig = float(min_eig)
        super().__init__(msg or f"matrix is not positive semidefinite (min eigenvalue {min_eig:.6g})")


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, min_eig: float):
        self.min_eig = float(min_eig)
        super().__init__(f"matrix is numerically singular (min eigenvalue {min_eig:.6g}) and no shift was given")


class EigDecomp(NamedTuple):
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns


def sym_matrix(a, atol: float = SYMMETRY_ATOL) -> np.ndarray:
    """Validate that ``a`` is square and symmetric; return the symmetrized copy."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.size and np.max(np.abs(a - a.T)) > atol:
        raise ValueError(f"matrix is not symmetric (max asymmetry {np.max(np.abs(a - a.T)):.3g})")
    return 0.5 * (a + a.T)


def eig_decomp(a) -> EigDecomp:
    a = sym_matrix(a)
    w, q = np.linalg.eigh(a)
    return EigDecomp(w, q)


def _psd_floor(w: np.ndarray) -> float:
    return -PSD_RTOL * max(1.0, float(w[-1])) if w.size else 0.0


def solve_spd(a, shift: float, b) -> np.ndarray:
    """Solve ``(a + shift * I) x = b`` for symmetric PSD ``a``.

    ``b`` may be a vector or a matrix of right-hand sides (one per column).
    Cholesky is used first; if it breaks down the system is solved in the
    eigenbasis with roundoff-negative eigenvalues clamped to zero.
    """
    a = sym_matrix(a)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"dimension mismatch: matrix is {n}x{n}, right-hand side has {b.shape[0]} rows")
    if shift < 0:
        raise ValueError(f"shift must be nonnegative, got {shift}")
    if n == 0:
        return np.zeros_like(b)
    m = a + shift * np.eye(n)
    try:
        factor = linalg.cho_factor(m, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        return _solve_eig(a, shift, b)
    x = linalg.cho_solve(factor, b)
    # one step of iterative refinement
    x = x + linalg.cho_solve(factor, b - m @ x)
    if shift == 0:
        # Cholesky can succeed on matrices that are singular to working precision
        d = np.diag(factor[0]) ** 2
        if d.min() <= n * np.finfo(float).eps * d.max():
            return _solve_eig(a, shift, b)
    return x


def _solve_eig(a: np.ndarray, shift: float, b: np.ndarray) -> np.ndarray:
    w, q = np.linalg.eigh(a)
    if w[0] < _psd_floor(w):
        raise NotPSDError(w[0])
    w = np.clip(w, 0.0, None) + shift
    if shift == 0 and w[0] <= a.shape[0] * np.finfo(float).eps * max(w[-1], 1e-300):
        raise SingularMatrixError(w[0])
    coef = q.T @ b
    coef = coef / (w[:, None] if coef.ndim == 2 else w)
    return q @ coef


def sqrt_psd(a) -> np.ndarray:
    """Symmetric PSD square root via the spectral decomposition."""
    w, q = eig_decomp(a)
    if w.size == 0:
        return np.zeros((0, 0))
    if w[0] < _psd_floor(w):
        raise NotPSDError(w[0])
    root = (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T
    return 0.5 * (root + root.T)


def spectral_norm(a) -> float:
    w = np.linalg.eigvalsh(sym_matrix(a))
    return float(np.max(np.abs(w))) if w.size else 0.0


def min_eigenvalue(a) -> float:
    return float(np.linalg.eigvalsh(sym_matrix(a))[0])


def max_eigenvalue(a) -> float:
    return float(np.linalg.eigvalsh(sym_matrix(a))[-1])


def is_psd(a) -> bool:
    w = np.linalg.eigvalsh(sym_matrix(a))
    return bool(w[0] >= _psd_floor(w))
