"""Dynamic mixtures of matrix-normal distributions for spatiotemporal forecasting errors."""

__version__ = "0.1.0"

from .linalg import CholFactor, ShapeError, half_log_det_precision, kron, materialize, tri_mul
from .matnorm import MatnormComponent, log_density, sample
from .mixloss import LossConfig, MixtureBank, component_log_joint, grad, nll, responsibilities, total_loss

__all__ = [
    "CholFactor",
    "LossConfig",
    "MatnormComponent",
    "MixtureBank",
    "ShapeError",
    "component_log_joint",
    "grad",
    "half_log_det_precision",
    "kron",
    "log_density",
    "materialize",
    "nll",
    "responsibilities",
    "sample",
    "total_loss",
    "tri_mul",
]
