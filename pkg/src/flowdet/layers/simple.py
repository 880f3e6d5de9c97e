"""Elementary invertible layers: elementwise scaling and a dense affine map."""

import numpy as np

from ..errors import NonInvertibleParams, SingularMatrixError
from ..flow import Layer
from ..linalg import invert, plu_logabsdet


class ElementwiseScale(Layer):
    """``y = scale * x`` with one free (nonzero) scale per dimension."""

    kind = "scale"
    param_names = ("scale",)

    def __init__(self, shape, scale=1.0):
        super().__init__(shape)
        self.params["scale"] = np.broadcast_to(np.asarray(scale, dtype=np.float64),
                                               (self.dim,)).copy()

    def forward(self, x):
        s = self.params["scale"]
        if np.any(s == 0.0):
            raise NonInvertibleParams("zero scale")
        return x * s, np.full(x.shape[0], np.sum(np.log(np.abs(s))))

    def inverse(self, y):
        s = self.params["scale"]
        if np.any(s == 0.0):
            raise NonInvertibleParams("zero scale")
        return y / s, np.full(y.shape[0], -np.sum(np.log(np.abs(s))))

    def backward(self, x, gy):
        s = self.params["scale"]
        return gy * s, {"scale": np.sum(gy * x, axis=0) + x.shape[0] / s}


class Linear(Layer):
    """Dense affine map ``y = W x + b``; the PPCA-style linear flow."""

    kind = "linear"
    param_names = ("weight", "bias")

    def __init__(self, shape, weight=None, bias=None):
        super().__init__(shape)
        d = self.dim
        self.params["weight"] = np.eye(d) if weight is None else np.array(weight, dtype=np.float64)
        self.params["bias"] = np.zeros(d) if bias is None else np.array(bias, dtype=np.float64)

    def _logabsdet(self):
        try:
            return plu_logabsdet(self.params["weight"])[0]
        except SingularMatrixError as exc:
            raise NonInvertibleParams(str(exc)) from exc

    def forward(self, x):
        w, b = self.params["weight"], self.params["bias"]
        return x @ w.T + b, np.full(x.shape[0], self._logabsdet())

    def inverse(self, y):
        w, b = self.params["weight"], self.params["bias"]
        ld = self._logabsdet()
        return (y - b) @ invert(w).T, np.full(y.shape[0], -ld)

    def backward(self, x, gy):
        w = self.params["weight"]
        n = x.shape[0]
        gw = gy.T @ x + n * invert(w).T
        return gy @ w, {"weight": gw, "bias": np.sum(gy, axis=0)}
