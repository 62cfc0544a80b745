"""Sparse-group off-the-grid recovery of tissue mixtures from MR fingerprinting
time series."""

from .errors import BoundaryError, DivergenceError, DomainError, TrainingDiverged
from .measure import SpikeMeasure, adjoint_eval, forward, merge_close_spikes, sgtv_norm
from .proxsolver import FistaConfig, eps_norm, fista_sglasso, prox_sgtv

__all__ = [
    "BoundaryError", "DivergenceError", "DomainError", "TrainingDiverged",
    "SpikeMeasure", "adjoint_eval", "forward", "merge_close_spikes", "sgtv_norm",
    "FistaConfig", "eps_norm", "fista_sglasso", "prox_sgtv",
]
