"""Monotonic rational-quadratic activation with bounded knot derivatives.

Knots come from unconstrained vectors ``theta_x, theta_y, theta_a`` of length
``I + 1`` and a box scale ``w``::

    bx = softmax(theta_x)            x_i = (2 cumsum(bx)_i - 1) w
    by = sigmoid(theta_y) * bx       y_i = (2 cumsum(by)_i - sum(by)) w
    alpha_i = sigmoid(theta_a)_i

so every bin's height/width ratio and every knot derivative lies in (0, 1).
Two outer bins with fixed far knots at ``+-bound`` (slope ``outer_slope``)
extend the map to the real line; beyond the far knots it is linear.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import BadBeta, NoRootInBin, OutOfDomain
from ..flow import Layer

OUTER_BOUND = 1e5
LOGIT_CLIP = 30.0


def sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(t, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.clip(np.log(p) - np.log1p(-p), -LOGIT_CLIP, LOGIT_CLIP)


def softmax(t):
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(t - np.max(t, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _revcumsum(v):
    return np.cumsum(v[..., ::-1], axis=-1)[..., ::-1]


@dataclass
class KnotSet:
    """Raw parameters plus the derived knots.

    ``xs, ys, alphas`` hold the ``I + 1`` inner knots; ``full_x, full_y,
    full_a`` prepend/append the fixed far knots.  Arrays may carry leading
    channel axes.
    """

    theta_x: np.ndarray
    theta_y: np.ndarray
    theta_a: np.ndarray
    w: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    alphas: np.ndarray
    full_x: np.ndarray
    full_y: np.ndarray
    full_a: np.ndarray
    outer_slope: float
    bound: float
    # intermediates for the backward pass
    _bx: np.ndarray = None
    _cx: np.ndarray = None
    _sy: np.ndarray = None
    _cy: np.ndarray = None

    @property
    def bins(self):
        return self.xs.shape[-1] - 1

    @property
    def widths(self):
        return np.diff(self.xs, axis=-1)

    @property
    def heights(self):
        return np.diff(self.ys, axis=-1)

    @property
    def deltas(self):
        return self.heights / self.widths

    @property
    def rhos(self):
        a = self.alphas
        return a[..., 1:] + a[..., :-1] - 2.0 * self.deltas


def knots_from_params(theta_x, theta_y, theta_a, w, outer_slope=1.0, bound=OUTER_BOUND):
    theta_x = np.asarray(theta_x, dtype=np.float64)
    theta_y = np.asarray(theta_y, dtype=np.float64)
    theta_a = np.asarray(theta_a, dtype=np.float64)
    if theta_x.shape[-1] < 2:
        raise ValueError("need I >= 1 bins (parameter vectors of length >= 2)")
    if not (theta_x.shape == theta_y.shape == theta_a.shape):
        raise ValueError("theta_x, theta_y, theta_a must share a shape")
    w = np.asarray(w, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("box scale w must be positive")
    wk = w[..., None]
    bx = softmax(theta_x)
    cx = np.cumsum(bx, axis=-1)
    xs = (2.0 * cx - 1.0) * wk
    sy = sigmoid(theta_y)
    cy = np.cumsum(sy * bx, axis=-1)
    ys = (2.0 * cy - cy[..., -1:]) * wk
    alphas = sigmoid(theta_a)
    lead = xs.shape[:-1]
    lo = np.full(lead + (1,), -bound)
    hi = np.full(lead + (1,), bound)
    full_x = np.concatenate([lo, xs, hi], axis=-1)
    full_y = np.concatenate([outer_slope * lo, ys, outer_slope * hi], axis=-1)
    s = np.full(lead + (1,), float(outer_slope))
    full_a = np.concatenate([s, alphas, s], axis=-1)
    return KnotSet(theta_x, theta_y, theta_a, w, xs, ys, alphas, full_x, full_y, full_a,
                   float(outer_slope), float(bound), bx, cx, sy, cy)


def knot_param_grads(kn, g_xs, g_ys, g_alphas):
    """Pull gradients on the inner knots back to ``(theta_x, theta_y, theta_a, w)``."""
    wk = kn.w[..., None]
    bx, cx, sy, cy = kn._bx, kn._cx, kn._sy, kn._cy
    total_y = cy[..., -1:]
    gw = np.sum(g_xs * (2.0 * cx - 1.0), axis=-1) + np.sum(g_ys * (2.0 * cy - total_y), axis=-1)
    g_cy = 2.0 * wk * g_ys
    g_cy[..., -1] -= kn.w * np.sum(g_ys, axis=-1)
    g_by = _revcumsum(g_cy)
    g_bx = _revcumsum(2.0 * wk * g_xs) + g_by * sy
    g_ty = g_by * bx * sy * (1.0 - sy)
    g_tx = bx * (g_bx - np.sum(bx * g_bx, axis=-1, keepdims=True))
    g_ta = g_alphas * kn.alphas * (1.0 - kn.alphas)
    return g_tx, g_ty, g_ta, gw


# ---------------------------------------------------------------------------
# Evaluation on flat element arrays.  ``X, Y, A`` are (rows, K) full-knot
# tables and ``row`` selects the table row of every element.


def _locate(table, row, v):
    k = table.shape[1]
    idx = np.sum(v[:, None] >= table[row], axis=1) - 1
    return idx, np.clip(idx, 0, k - 2)


def _bin_terms(X, Y, A, row, b):
    x0, x1 = X[row, b], X[row, b + 1]
    y0, y1 = Y[row, b], Y[row, b + 1]
    a0, a1 = A[row, b], A[row, b + 1]
    dx, dy = x1 - x0, y1 - y0
    return x0, y0, a0, a1, dx, dy, dy / dx


def rq_eval(X, Y, A, row, x, slope, grads=False):
    """Forward map.  Returns ``y, log_dydx`` and, with ``grads``, a dict of
    per-element partials plus the bin index."""
    raw, b = _locate(X, row, x)
    x0, y0, a0, a1, dx, dy, delta = _bin_terms(X, Y, A, row, b)
    x1, y1 = X[row, b + 1], Y[row, b + 1]
    xi = (x - x0) / dx
    om = (x1 - x) / dx
    qa, qb, qc = xi * xi, xi * om, om * om
    rho = a0 + a1 - 2.0 * delta
    num = delta * qa + a0 * qb
    den = delta + rho * qb
    r = num / den
    gamma = a1 * qa + 2.0 * delta * qb + a0 * qc
    # measure from the nearer knot; 1 - r = (delta om^2 + a1 xi om) / den exactly
    y = np.where(xi <= 0.5, y0 + dy * r, y1 - dy * (delta * qc + a1 * qb) / den)
    with np.errstate(invalid="ignore", divide="ignore"):
        # tail elements are evaluated out of bin and overwritten below
        logd = 2.0 * np.log(delta) + np.log(gamma) - 2.0 * np.log(den)

    k = X.shape[1]
    left, right = raw < 0, raw > k - 2
    tail = left | right
    if np.any(tail):
        xf = np.where(left, X[row, 0], X[row, k - 1])
        yf = np.where(left, Y[row, 0], Y[row, k - 1])
        y = np.where(tail, yf + slope * (x - xf), y)
        logd = np.where(tail, np.log(slope), logd)
    if not grads:
        return y, logd

    d2 = den * den
    dnum = 2.0 * delta * xi + a0 * (1.0 - 2.0 * xi)
    dden = rho * (1.0 - 2.0 * xi)
    r_xi = (dnum * den - num * dden) / d2
    r_delta = (qa * den - num * (1.0 - 2.0 * qb)) / d2
    r_a0 = qb * (den - num) / d2
    r_a1 = -num * qb / d2
    dgamma = 2.0 * a1 * xi + 2.0 * delta * (1.0 - 2.0 * xi) - 2.0 * a0 * om
    l_xi = dgamma / gamma - 2.0 * dden / den
    l_delta = 2.0 / delta + 2.0 * qb / gamma - 2.0 * (1.0 - 2.0 * qb) / den
    l_a0 = qc / gamma - 2.0 * qb / den
    l_a1 = qa / gamma - 2.0 * qb / den
    keep = ~tail
    out = {
        "bin": b,
        "dydx": np.where(keep, delta * r_xi, slope),
        "dl_dx": np.where(keep, l_xi / dx, 0.0),
        "y_x0": delta * (r_delta * delta - r_xi * om),
        "y_x1": -delta * (r_xi * xi + r_delta * delta),
        "y_y0": 1.0 - r - delta * r_delta,
        "y_y1": r + delta * r_delta,
        "y_a0": dy * r_a0,
        "y_a1": dy * r_a1,
        "l_x0": (l_delta * delta - l_xi * om) / dx,
        "l_x1": -(l_xi * xi + l_delta * delta) / dx,
        "l_y0": -l_delta / dx,
        "l_y1": l_delta / dx,
        "l_a0": l_a0,
        "l_a1": l_a1,
    }
    for key in ("y_x0", "y_x1", "y_y0", "y_y1", "y_a0", "y_a1",
                "l_x0", "l_x1", "l_y0", "l_y1", "l_a0", "l_a1"):
        out[key] = np.where(keep, out[key], 0.0)
    return y, logd, out


def rq_invert(X, Y, A, row, y, slope):
    """Inverse map.  Returns ``x, log_dydx`` (the forward log-derivative at x)."""
    raw, b = _locate(Y, row, y)
    x0, y0, a0, a1, dx, dy, delta = _bin_terms(X, Y, A, row, b)
    x1, y1 = X[row, b + 1], Y[row, b + 1]
    # solve from the nearer knot; the reflected bin swaps a0 and a1
    near = (y - y0) <= 0.5 * dy
    t = np.where(near, y - y0, y1 - y)
    a_near = np.where(near, a0, a1)
    rho = a0 + a1 - 2.0 * delta
    qa = dy * (delta - a_near) + t * rho
    qb = dy * a_near - t * rho
    qc = -t * delta
    disc = qb * qb - 4.0 * qa * qc
    k = X.shape[1]
    tail = (raw < 0) | (raw > k - 2)
    if np.any(~(disc >= 0) & ~tail):
        raise NoRootInBin("negative discriminant; knots are corrupted")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = 2.0 * qc / (-qb - np.sqrt(np.maximum(disc, 0.0)))
    bad = ~tail & ~((u >= -1e-9) & (u <= 1.0 + 1e-9))
    if np.any(bad):
        raise NoRootInBin("root outside [0, 1]; knots are corrupted")
    u = np.clip(u, 0.0, 1.0)
    x = np.where(near, x0 + u * dx, x1 - u * dx)
    xi = np.where(near, u, 1.0 - u)
    om = np.where(near, 1.0 - u, u)
    qb2 = xi * om
    gamma = a1 * xi * xi + 2.0 * delta * qb2 + a0 * om * om
    with np.errstate(invalid="ignore", divide="ignore"):
        logd = 2.0 * np.log(delta) + np.log(gamma) - 2.0 * np.log(delta + rho * qb2)
    if np.any(tail):
        left = raw < 0
        xf = np.where(left, X[row, 0], X[row, k - 1])
        yf = np.where(left, Y[row, 0], Y[row, k - 1])
        x = np.where(tail, xf + (y - yf) / slope, x)
        logd = np.where(tail, np.log(slope), logd)
    return x, logd


def _single(kn):
    if kn.xs.ndim != 1:
        raise ValueError("expected a single-channel KnotSet")
    return kn.full_x[None, :], kn.full_y[None, :], kn.full_a[None, :]


def rq_activation_apply(kn, direction, x):
    """Apply a single-channel spline to a scalar or array.

    Returns ``(value, derivative)`` where the derivative is that of the map
    actually applied (``dy/dx`` forward, ``dx/dy`` inverse).
    """
    X, Y, A = _single(kn)
    v = np.asarray(x, dtype=np.float64)
    flat = np.ravel(v)
    row = np.zeros(flat.size, dtype=np.intp)
    if direction == "forward":
        out, logd = rq_eval(X, Y, A, row, flat, kn.outer_slope)
        deriv = np.exp(logd)
    elif direction == "inverse":
        out, logd = rq_invert(X, Y, A, row, flat, kn.outer_slope)
        deriv = np.exp(-logd)
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', not {direction!r}")
    if v.ndim == 0:
        return float(out[0]), float(deriv[0])
    return out.reshape(v.shape), deriv.reshape(v.shape)


def rq_derivative(kn, x):
    """``dy/dx`` of a single-channel spline on an array of points."""
    return rq_activation_apply(kn, "forward", np.asarray(x, dtype=np.float64))[1]


class RQActivation(Layer):
    """Elementwise rational-quadratic spline with per-channel knots.

    Parameters: ``theta_x, theta_y, theta_a`` of shape ``(c, I + 1)`` and
    ``log_w`` of shape ``(c,)``.  Initialized to the linear map with slope
    ``beta``.
    """

    kind = "rq"
    param_names = ("theta_x", "theta_y", "theta_a", "log_w")

    def __init__(self, shape, bins=16, beta=1.0, box=3.0):
        super().__init__(shape)
        self.bins = int(bins)
        if self.bins < 1:
            raise ValueError("need at least one bin")
        c = self.shape[0]
        self.params["theta_x"] = np.zeros((c, self.bins + 1))
        self.params["theta_y"] = np.zeros((c, self.bins + 1))
        self.params["theta_a"] = np.zeros((c, self.bins + 1))
        self.params["log_w"] = np.full(c, np.log(box))
        self.outer_slope = 1.0
        self.set_linear(beta)

    def set_linear(self, beta):
        """Make the map exactly linear through the origin; returns the slope used.

        The slope is ``sigmoid(logit(beta))`` with the logit clipped, so
        ``beta = 1`` maps to ``1 - 9e-14``.
        """
        if not 0.0 < beta <= 1.0:
            raise BadBeta(f"beta={beta} outside (0, 1]")
        t = float(logit(beta))
        slope = float(sigmoid(t))
        self.params["theta_x"][...] = 0.0
        self.params["theta_y"][...] = t
        self.params["theta_a"][...] = t
        self.outer_slope = slope
        return slope

    def knots(self):
        p = self.params
        return knots_from_params(p["theta_x"], p["theta_y"], p["theta_a"], np.exp(p["log_w"]),
                                 self.outer_slope)

    def _rows(self, n):
        c = self.shape[0]
        per = self.dim // c
        return np.tile(np.repeat(np.arange(c), per), n)

    def forward(self, x):
        kn = self.knots()
        n = x.shape[0]
        y, logd = rq_eval(kn.full_x, kn.full_y, kn.full_a, self._rows(n), x.ravel(),
                          self.outer_slope)
        return y.reshape(x.shape), np.sum(logd.reshape(x.shape), axis=1)

    def inverse(self, y):
        kn = self.knots()
        n = y.shape[0]
        x, logd = rq_invert(kn.full_x, kn.full_y, kn.full_a, self._rows(n), y.ravel(),
                            self.outer_slope)
        return x.reshape(y.shape), -np.sum(logd.reshape(y.shape), axis=1)

    def backward(self, x, gy):
        kn = self.knots()
        n = x.shape[0]
        rows = self._rows(n)
        g = gy.ravel()
        _, _, part = rq_eval(kn.full_x, kn.full_y, kn.full_a, rows, x.ravel(),
                             self.outer_slope, grads=True)
        gx = g * part["dydx"] + part["dl_dx"]
        c, k = kn.full_x.shape
        lo = rows * k + part["bin"]
        size = c * k

        def scatter(key):
            v0 = g * part["y_" + key + "0"] + part["l_" + key + "0"]
            v1 = g * part["y_" + key + "1"] + part["l_" + key + "1"]
            acc = np.bincount(lo, v0, size) + np.bincount(lo + 1, v1, size)
            return acc.reshape(c, k)[:, 1:-1]

        g_tx, g_ty, g_ta, gw = knot_param_grads(kn, scatter("x"), scatter("y"), scatter("a"))
        grads = {"theta_x": g_tx, "theta_y": g_ty, "theta_a": g_ta,
                 "log_w": gw * np.exp(self.params["log_w"])}
        return gx.reshape(x.shape), grads

    def check_finite(self):
        for k in self.param_names:
            if not np.all(np.isfinite(self.params[k])):
                raise OutOfDomain(f"non-finite spline parameter {k}")
