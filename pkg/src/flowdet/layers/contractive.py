"""Elementwise contractive activations used as Lipschitz ablations."""

import math

import numpy as np
from scipy.special import ndtr, ndtri

from ..errors import OutOfDomain
from ..flow import Layer

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _log_sech2(x):
    ax = np.abs(x)
    return 2.0 * (math.log(2.0) - ax - np.log1p(np.exp(-2.0 * ax)))


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x):
        return np.tanh(x), np.sum(_log_sech2(x), axis=1)

    def inverse(self, y):
        if np.any(np.abs(y) >= 1.0):
            raise OutOfDomain("tanh inverse needs |y| < 1")
        x = np.arctanh(y)
        return x, -np.sum(_log_sech2(x), axis=1)

    def backward(self, x, gy):
        t = np.tanh(x)
        return gy * (1.0 - t * t) - 2.0 * t, {}


class NormalCDF(Layer):
    """``y = Phi(x)``; maps onto (0, 1) with slope at most ``1/sqrt(2 pi)``."""

    kind = "normal_cdf"

    def forward(self, x):
        return ndtr(x), np.sum(-0.5 * x * x - LOG_SQRT_2PI, axis=1)

    def inverse(self, y):
        if np.any((y <= 0.0) | (y >= 1.0)):
            raise OutOfDomain("normal-CDF inverse needs 0 < y < 1")
        x = ndtri(y)
        return x, np.sum(0.5 * x * x + LOG_SQRT_2PI, axis=1)

    def backward(self, x, gy):
        dens = np.exp(-0.5 * x * x - LOG_SQRT_2PI)
        return gy * dens - x, {}


CONTRACTIVE = {"tanh": Tanh, "normal_cdf": NormalCDF}


def contractive_activation_apply(kind, direction, x):
    """Apply ``tanh`` or ``normal_cdf`` elementwise to a vector.

    Returns ``(y, logdet)`` with ``logdet`` the sum of log-derivatives of the
    applied direction.
    """
    if kind not in CONTRACTIVE:
        raise ValueError(f"unknown contractive activation {kind!r}")
    v = np.atleast_1d(np.asarray(x, dtype=np.float64))
    layer = CONTRACTIVE[kind]((v.size, 1, 1))
    fn = layer.forward if direction == "forward" else layer.inverse
    if direction not in ("forward", "inverse"):
        raise ValueError(f"bad direction {direction!r}")
    y, ld = fn(v.reshape(1, -1))
    return y.reshape(v.shape), float(ld[0])
