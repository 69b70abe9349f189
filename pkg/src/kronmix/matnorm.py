"""Zero-mean matrix-normal components parameterized by precision Cholesky factors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import CholFactor, ShapeError, as_matrix, half_log_det_precision, materialize, solve_lower_transposed

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MatnormComponent:
    spatial: CholFactor
    temporal: CholFactor

    @property
    def shape(self) -> tuple[int, int]:
        return self.spatial.dim, self.temporal.dim

    @classmethod
    def identity(cls, n: int, q: int) -> "MatnormComponent":
        return cls(CholFactor.identity(n), CholFactor.identity(q))

    def rescaled(self, nu: float) -> "MatnormComponent":
        """Same distribution with spatial covariance times ``nu`` and temporal divided by ``nu``."""
        root = math.sqrt(nu)
        return MatnormComponent(self.spatial.scaled(1.0 / root), self.temporal.scaled(root))


def log_normalizer(comp: MatnormComponent) -> float:
    """Every term of the log-density except the quadratic form."""
    n, q = comp.shape
    return (
        -0.5 * n * q * LOG_2PI
        + n * half_log_det_precision(comp.temporal)
        + q * half_log_det_precision(comp.spatial)
    )


def log_density(comp: MatnormComponent, r) -> float:
    """log MN(r | 0, Sigma_N, Sigma_Q) through the Frobenius form ``||L_N^T r L_Q||_F^2``."""
    r = as_matrix(r, "r")
    if r.shape != comp.shape:
        raise ShapeError(f"residual shape {r.shape} does not match component shape {comp.shape}")
    z = materialize(comp.spatial).T @ r @ materialize(comp.temporal)
    return log_normalizer(comp) - 0.5 * float(np.sum(z * z))


def sample(comp: MatnormComponent, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``A E B^T`` with ``A = L_N^{-T}``, ``B = L_Q^{-T}`` and E iid standard normal.

    Returns an (N, Q) matrix, or (size, N, Q) when ``size`` is given.
    """
    n, q = comp.shape
    count = 1 if size is None else size
    e = rng.standard_normal((count, n, q))
    # A E for all draws at once: stack draws along columns
    ae = solve_lower_transposed(comp.spatial, e.transpose(1, 0, 2).reshape(n, count * q))
    ae = ae.reshape(n, count, q).transpose(1, 0, 2)
    # (A E) B^T = ((B (A E)^T))^T with B = L_Q^{-T}
    aet = ae.transpose(2, 0, 1).reshape(q, count * n)
    out = solve_lower_transposed(comp.temporal, aet).reshape(q, count, n).transpose(1, 2, 0)
    return out[0] if size is None else out
