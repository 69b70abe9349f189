"""Dense and triangular kernels shared by the probabilistic code.

Matrices are plain 2-D float64 numpy arrays. Precision Cholesky factors are
stored packed (strict lower triangle + log of the diagonal) so the upper
triangle never exists as a trainable value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


def n_strict_lower(dim: int) -> int:
    return dim * (dim - 1) // 2


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular precision factor with a strictly positive diagonal.

    ``strict_lower`` holds the entries below the diagonal in row-major order
    (``np.tril_indices(dim, -1)``); ``log_diag`` holds log of each diagonal entry.
    """

    dim: int
    strict_lower: np.ndarray
    log_diag: np.ndarray

    def __post_init__(self):
        sl = np.array(self.strict_lower, dtype=np.float64).reshape(-1)
        ld = np.array(self.log_diag, dtype=np.float64).reshape(-1)
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if sl.size != n_strict_lower(self.dim):
            raise ShapeError(
                f"strict_lower needs {n_strict_lower(self.dim)} entries for dim={self.dim}, got {sl.size}"
            )
        if ld.size != self.dim:
            raise ShapeError(f"log_diag needs {self.dim} entries, got {ld.size}")
        if not (np.all(np.isfinite(sl)) and np.all(np.isfinite(ld))):
            raise ValueError("CholFactor entries must be finite")
        sl.setflags(write=False)
        ld.setflags(write=False)
        object.__setattr__(self, "strict_lower", sl)
        object.__setattr__(self, "log_diag", ld)

    @classmethod
    def identity(cls, dim: int) -> "CholFactor":
        return cls(dim, np.zeros(n_strict_lower(dim)), np.zeros(dim))

    @classmethod
    def from_matrix(cls, lower: np.ndarray) -> "CholFactor":
        """Pack a dense lower-triangular matrix with positive diagonal."""
        lower = as_matrix(lower, "lower")
        dim = lower.shape[0]
        if lower.shape != (dim, dim):
            raise ShapeError(f"factor must be square, got {lower.shape}")
        diag = np.diag(lower)
        if np.any(diag <= 0):
            raise ValueError("factor diagonal must be strictly positive")
        if np.any(np.triu(lower, 1) != 0):
            raise ValueError("factor must be lower-triangular")
        return cls(dim, lower[np.tril_indices(dim, -1)], np.log(diag))

    def scaled(self, c: float) -> "CholFactor":
        """Factor of ``c**2`` times the precision (``c > 0``)."""
        if not c > 0:
            raise ValueError(f"scale must be positive, got {c}")
        return CholFactor(self.dim, self.strict_lower * c, self.log_diag + np.log(c))


def materialize(factor: CholFactor) -> np.ndarray:
    d = factor.dim
    out = np.zeros((d, d))
    out[np.tril_indices(d, -1)] = factor.strict_lower
    out[np.diag_indices(d)] = np.exp(factor.log_diag)
    return out


def half_log_det_precision(factor: CholFactor) -> float:
    """``0.5 * log|L L^T|``, read straight off the stored log-diagonal."""
    return float(np.sum(factor.log_diag))


def kron(a, b) -> np.ndarray:
    """Kronecker product. Test oracles and exports only."""
    return np.kron(as_matrix(a, "a"), as_matrix(b, "b"))


def tri_mul(factor: CholFactor, m, side: str) -> np.ndarray:
    """``L^T @ m`` for ``side='left_transposed'``, ``m @ L`` for ``side='right'``."""
    m = as_matrix(m, "m")
    lower = materialize(factor)
    if side == "left_transposed":
        if m.shape[0] != factor.dim:
            raise ShapeError(f"expected m with {factor.dim} rows, got shape {m.shape}")
        return lower.T @ m
    if side == "right":
        if m.shape[1] != factor.dim:
            raise ShapeError(f"expected m with {factor.dim} columns, got shape {m.shape}")
        return m @ lower
    raise ValueError(f"side must be 'left_transposed' or 'right', got {side!r}")


def precision(factor: CholFactor) -> np.ndarray:
    lower = materialize(factor)
    return lower @ lower.T


def covariance(factor: CholFactor) -> np.ndarray:
    """``(L L^T)^{-1}`` via two triangular solves; no generic inverse."""
    lower = materialize(factor)
    y = solve_triangular(lower, np.eye(factor.dim), lower=True)
    cov = solve_triangular(lower, y, lower=True, trans="T")
    return 0.5 * (cov + cov.T)


def solve_lower_transposed(factor: CholFactor, m: np.ndarray) -> np.ndarray:
    """Solve ``L^T X = m`` for X."""
    return solve_triangular(materialize(factor), m, lower=True, trans="T")
