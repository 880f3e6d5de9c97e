from .blocks import (ABLATIONS, block_init, build_model, local_maxima_count, make_block,
                     multiscale_compose)
from .contractive import NormalCDF, Tanh, contractive_activation_apply
from .coupling import DualCoupling, head_bias_for_scale, mexican_hat_scale
from .invconv import InvConv
from .simple import ElementwiseScale, Linear
from .spline import (KnotSet, RQActivation, knots_from_params, rq_activation_apply,
                     rq_derivative)

__all__ = [
    "ABLATIONS", "DualCoupling", "ElementwiseScale", "InvConv", "KnotSet", "Linear",
    "NormalCDF", "RQActivation", "Tanh", "block_init", "build_model",
    "contractive_activation_apply", "head_bias_for_scale", "knots_from_params",
    "local_maxima_count", "make_block", "mexican_hat_scale", "multiscale_compose",
    "rq_activation_apply", "rq_derivative",
]
