"""Normalizing-flow density estimation with analytic Jacobian bookkeeping."""

from .flow import (FlowModel, Layer, Level, backprop, layer_apply, log_likelihood,
                   nll_bits_per_dim, numeric_jacobian, numeric_logdet, sample)

__version__ = "0.1.0"

__all__ = [
    "FlowModel", "Layer", "Level", "backprop", "layer_apply", "log_likelihood",
    "nll_bits_per_dim", "numeric_jacobian", "numeric_logdet", "sample",
]
