"""Invertible k x k convolution with stride k.

Equivalent to a space-to-depth squeeze by ``k`` followed by a channel-mixing
1x1 convolution with a ``k^2 c x k^2 c`` weight.  The log-determinant is the
number of output positions times ``log|det W|``.
"""

import numpy as np

from ..errors import NonInvertibleParams, SingularMatrixError
from ..flow import Layer
from ..linalg import invert, plu_logabsdet


def squeeze(x, shape, k):
    """``(N, c*h*w)`` in ``(c, h, w)`` layout -> ``(N, k*k*c, h/k, w/k)``."""
    c, h, w = shape
    n = x.shape[0]
    t = x.reshape(n, c, h // k, k, w // k, k)
    return t.transpose(0, 1, 3, 5, 2, 4).reshape(n, c * k * k, h // k, w // k)


def unsqueeze(t, shape, k):
    c, h, w = shape
    n = t.shape[0]
    t = t.reshape(n, c, k, k, h // k, w // k)
    return t.transpose(0, 1, 4, 2, 5, 3).reshape(n, c * h * w)


class InvConv(Layer):
    """Fused squeeze + invertible channel mixing.

    ``shape`` is the input ``(c, h, w)``; output shape is
    ``(k*k*c, h/k, w/k)``.  The weight is checked for invertibility on every
    pass.
    """

    kind = "invconv"
    param_names = ("weight",)

    def __init__(self, shape, k=1, weight=None):
        super().__init__(shape)
        c, h, w = self.shape
        if h % k or w % k:
            raise ValueError(f"spatial dims {h}x{w} not divisible by k={k}")
        self.k = int(k)
        ch = k * k * c
        self.params["weight"] = np.eye(ch) if weight is None else np.array(weight, dtype=np.float64)
        if self.params["weight"].shape != (ch, ch):
            raise ValueError(f"weight must be {ch}x{ch}")

    @property
    def out_shape(self):
        c, h, w = self.shape
        k = self.k
        return (k * k * c, h // k, w // k)

    @property
    def positions(self):
        _, h, w = self.out_shape
        return h * w

    def _logabsdet(self):
        try:
            return plu_logabsdet(self.params["weight"])[0]
        except SingularMatrixError as exc:
            raise NonInvertibleParams(str(exc)) from exc

    def forward(self, x):
        w = self.params["weight"]
        ld = self.positions * self._logabsdet()
        t = squeeze(x, self.shape, self.k)
        y = np.einsum("ij,njp->nip", w, t.reshape(t.shape[0], t.shape[1], -1))
        return y.reshape(x.shape[0], -1), np.full(x.shape[0], ld)

    def inverse(self, y):
        ld = self.positions * self._logabsdet()
        winv = invert(self.params["weight"])
        ch = self.out_shape[0]
        t = np.einsum("ij,njp->nip", winv, y.reshape(y.shape[0], ch, -1))
        return unsqueeze(t, self.shape, self.k), np.full(y.shape[0], -ld)

    def backward(self, x, gy):
        w = self.params["weight"]
        n = x.shape[0]
        ch = self.out_shape[0]
        t = squeeze(x, self.shape, self.k).reshape(n, ch, -1)
        g = gy.reshape(n, ch, -1)
        gw = np.einsum("nip,njp->ij", g, t) + n * self.positions * invert(w).T
        gt = np.einsum("ij,nip->njp", w, g)
        return unsqueeze(gt, self.shape, self.k), {"weight": gw}
