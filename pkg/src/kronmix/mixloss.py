"""Dynamic-mixture matrix-normal NLL, the combined training loss, and its gradients.

For a residual window ``R = Y - M`` and component k the log-joint is

    z_k = log w_k - (NQ/2) log 2pi + N sum log diag(L_Q) + Q sum log diag(L_N)
          - 0.5 ||L_N^T R L_Q||_F^2

with ``log w_k = logit_k - logsumexp(logits)``. The NLL is ``-logsumexp(z)``.
The combined loss is ``(1 - rho) * base + rho * nll`` where base is
``||Y - M||_F^2`` (mse) or ``||Y - M||_1`` (mae), summed over the window.
Batches average per-window losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import CholFactor, ShapeError, as_matrix, materialize
from .matnorm import MatnormComponent, log_normalizer

BASE_LOSSES = ("mse", "mae")


@dataclass(frozen=True)
class MixtureBank:
    components: tuple[MatnormComponent, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("MixtureBank needs at least one component")
        shapes = {c.shape for c in comps}
        if len(shapes) != 1:
            raise ShapeError(f"all components must share (N, Q), got {sorted(shapes)}")
        object.__setattr__(self, "components", comps)

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def shape(self) -> tuple[int, int]:
        return self.components[0].shape

    @classmethod
    def identity(cls, n: int, q: int, k: int) -> "MixtureBank":
        return cls(tuple(MatnormComponent.identity(n, q) for _ in range(k)))

    def rescaled(self, nus) -> "MixtureBank":
        return MixtureBank(tuple(c.rescaled(nu) for c, nu in zip(self.components, nus, strict=True)))

    def arrays(self):
        """Dense (K, N, N) spatial and (K, Q, Q) temporal factors plus per-component log normalizers."""
        ln = np.stack([materialize(c.spatial) for c in self.components])
        lq = np.stack([materialize(c.temporal) for c in self.components])
        const = np.array([log_normalizer(c) for c in self.components])
        return ln, lq, const


@dataclass(frozen=True)
class LossConfig:
    rho: float = 0.001
    base: str = "mse"

    def __post_init__(self):
        if not (np.isfinite(self.rho) and 0.0 <= self.rho <= 1.0):
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.base not in BASE_LOSSES:
            raise ValueError(f"base must be one of {BASE_LOSSES}, got {self.base!r}")


@dataclass
class LossGrad:
    """Gradients of the loss. Bank entries are (K, ...) stacks in component order."""

    mean: np.ndarray
    logits: np.ndarray
    spatial_lower: np.ndarray
    spatial_log_diag: np.ndarray
    temporal_lower: np.ndarray
    temporal_log_diag: np.ndarray


@dataclass
class BatchLoss:
    total: float
    base: float
    nll: float
    grad: LossGrad | None = field(default=None, repr=False)


def logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    zmax = np.max(z, axis=axis, keepdims=True)
    out = zmax + np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_weights(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return logits - logsumexp(logits, axis=-1)[..., None]


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_weights(logits))


def responsibilities(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("log-joints must be finite")
    # shifting by the max is exact; subtracting the full LSE would cancel digits at |z| ~ 1e4
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_window(bank: MixtureBank, r: np.ndarray, name: str = "residual") -> None:
    if r.shape[-2:] != bank.shape:
        raise ShapeError(f"{name} shape {r.shape[-2:]} does not match bank (N, Q) = {bank.shape}")


def _check_logits(bank: MixtureBank, logits: np.ndarray) -> None:
    if logits.shape[-1] != bank.K:
        raise ShapeError(f"expected {bank.K} weight logits, got {logits.shape[-1]}")


def _batch_log_joint(arrays, logits: np.ndarray, r: np.ndarray):
    """z of shape (B, K) plus the intermediates the gradient needs."""
    ln, lq, const = arrays
    rlq = r[:, None] @ lq  # (B, K, N, Q)
    zmat = ln.transpose(0, 2, 1) @ rlq  # L_N^T R L_Q
    quad = np.sum(zmat * zmat, axis=(2, 3))
    z = log_weights(logits) + const - 0.5 * quad
    return z, rlq, zmat


def batch_log_joint(bank: MixtureBank, logits, r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    _check_window(bank, r)
    _check_logits(bank, logits)
    return _batch_log_joint(bank.arrays(), logits, r)[0]


def component_log_joint(bank: MixtureBank, logits, r) -> np.ndarray:
    r = as_matrix(r, "r")
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    return batch_log_joint(bank, logits[None], r[None])[0]


def nll(bank: MixtureBank, logits, r) -> float:
    return float(-logsumexp(component_log_joint(bank, logits, r)))


def batch_nll(bank: MixtureBank, logits, r) -> np.ndarray:
    """Per-window NLL for stacked residuals of shape (B, N, Q)."""
    return -logsumexp(batch_log_joint(bank, logits, r), axis=1)


def _base(r: np.ndarray, base: str) -> np.ndarray:
    if base == "mse":
        return np.sum(r * r, axis=(-2, -1))
    return np.sum(np.abs(r), axis=(-2, -1))


def _pack(dense: np.ndarray, lower: np.ndarray):
    """Dense (K, d, d) gradient w.r.t. L -> (strict-lower, log-diag) gradients."""
    d = dense.shape[-1]
    rows, cols = np.tril_indices(d, -1)
    diag = np.arange(d)
    return dense[:, rows, cols], dense[:, diag, diag] * lower[:, diag, diag]


def batch_loss(y, m, bank: MixtureBank, logits, cfg: LossConfig, with_grad: bool = True) -> BatchLoss:
    """Mean combined loss over a batch of windows, optionally with gradients.

    ``y`` and ``m`` are (B, N, Q), ``logits`` is (B, K). Mean and logit
    gradients are per window (of the batch-mean loss); bank gradients are totals.
    """
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if y.shape != m.shape:
        raise ShapeError(f"target shape {y.shape} does not match prediction shape {m.shape}")
    _check_window(bank, y, "target")
    _check_logits(bank, logits)
    if logits.shape[0] != y.shape[0]:
        raise ShapeError(f"got {logits.shape[0]} logit rows for {y.shape[0]} windows")

    arrays = bank.arrays()
    ln, lq, _ = arrays
    n, q = bank.shape
    batch = y.shape[0]
    r = y - m
    z, rlq, zmat = _batch_log_joint(arrays, logits, r)
    nll_w = -logsumexp(z, axis=1)
    base_w = _base(r, cfg.base)
    rho = cfg.rho
    base_mean = float(np.mean(base_w))
    nll_mean = float(np.mean(nll_w))
    out = BatchLoss((1.0 - rho) * base_mean + rho * nll_mean, base_mean, nll_mean)
    if not with_grad:
        return out

    scale = 1.0 / batch
    gamma = np.exp(z + nll_w[:, None])  # responsibilities
    # d nll / d R = sum_k gamma_k L_N Z_k L_Q^T
    d_r_nll = np.einsum("bk,bknq->bnq", gamma, ln @ zmat @ lq.transpose(0, 2, 1))
    d_r_base = 2.0 * r if cfg.base == "mse" else np.sign(r)
    d_mean = -scale * ((1.0 - rho) * d_r_base + rho * d_r_nll)

    d_logits = scale * rho * (softmax(logits) - gamma)

    # d nll / d L_N = gamma_k (R L_Q Z^T - Q diag(1 / L_N))
    wk = rho * scale * gamma
    d_ln = np.einsum("bk,bkij->kij", wk, rlq @ zmat.transpose(0, 1, 3, 2))
    d_lq = np.einsum("bk,bkij->kij", wk, (r.transpose(0, 2, 1)[:, None] @ ln) @ zmat)
    gsum = wk.sum(axis=0)
    dn, dq = np.arange(n), np.arange(q)
    d_ln[:, dn, dn] -= gsum[:, None] * q / ln[:, dn, dn]
    d_lq[:, dq, dq] -= gsum[:, None] * n / lq[:, dq, dq]

    sl, sd = _pack(d_ln, ln)
    tl, td = _pack(d_lq, lq)
    out.grad = LossGrad(d_mean, d_logits, sl, sd, tl, td)
    return out


def total_loss(y, m, bank: MixtureBank, logits, cfg: LossConfig) -> float:
    y, m = as_matrix(y, "y"), as_matrix(m, "m")
    logits = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    return batch_loss(y[None], m[None], bank, logits, cfg, with_grad=False).total


def grad(y, m, bank: MixtureBank, logits, cfg: LossConfig) -> LossGrad:
    """Gradient of ``total_loss`` for one window."""
    y, m = as_matrix(y, "y"), as_matrix(m, "m")
    logits = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    g = batch_loss(y[None], m[None], bank, logits, cfg).grad
    g.mean = g.mean[0]
    g.logits = g.logits[0]
    return g


def bank_from_arrays(spatial_lower, spatial_log_diag, temporal_lower, temporal_log_diag) -> MixtureBank:
    n = np.shape(spatial_log_diag)[1]
    q = np.shape(temporal_log_diag)[1]
    return MixtureBank(
        tuple(
            MatnormComponent(CholFactor(n, sl, sd), CholFactor(q, tl, td))
            for sl, sd, tl, td in zip(spatial_lower, spatial_log_diag, temporal_lower, temporal_log_diag)
        )
    )


def bank_to_arrays(bank: MixtureBank) -> dict[str, np.ndarray]:
    n, q = bank.shape
    return {
        "spatial_lower": np.stack([c.spatial.strict_lower for c in bank.components]).reshape(bank.K, -1),
        "spatial_log_diag": np.stack([c.spatial.log_diag for c in bank.components]).reshape(bank.K, n),
        "temporal_lower": np.stack([c.temporal.strict_lower for c in bank.components]).reshape(bank.K, -1),
        "temporal_log_diag": np.stack([c.temporal.log_diag for c in bank.components]).reshape(bank.K, q),
    }
