"""Dual affine coupling with a bounded Mexican-hat scale head.

For a split ``x = (x1, x2)`` with ``x1`` of size ``r``::

    y1 = s1(x2) * x1 + t1(x2)
    y2 = s2(y1) * x2 + t2(y1)

Each conditioner is a two-hidden-layer tanh MLP whose last hidden activation
``phi`` feeds ``M`` linear heads ``phi_m = W_m phi + b_m``; the log-scale is
the mean of ``(1 - phi_m^2) exp(-phi_m^2 / 2)``, which confines the scale to
``[exp(-2 exp(-1.5)), e]``.
"""

import math

import numpy as np

from ..errors import BadBeta
from ..flow import Layer

SQRT3 = math.sqrt(3.0)
#: attainable extremes of the Mexican-hat log-scale
LOG_SCALE_MAX = 1.0
LOG_SCALE_MIN = -2.0 * math.exp(-1.5)


def hat(u):
    """``(1 - u^2) exp(-u^2 / 2)``, elementwise."""
    u2 = u * u
    return (1.0 - u2) * np.exp(-0.5 * u2)


def hat_grad(u):
    u2 = u * u
    return u * np.exp(-0.5 * u2) * (u2 - 3.0)


def mexican_hat_scale(phi, heads):
    """Scale vector from a pre-output ``phi`` and heads ``[(w_m, b_m), ...]``.

    ``w_m`` has shape ``(r, len(phi))`` (or is a scalar), ``b_m`` shape ``(r,)``
    (or a scalar).
    """
    phi = np.asarray(phi, dtype=np.float64)
    if len(heads) < 1:
        raise ValueError("need at least one head")
    acc = 0.0
    for w, b in heads:
        w = np.asarray(w, dtype=np.float64)
        pm = (w @ phi if w.ndim == 2 else w * phi) + b
        acc = acc + hat(pm)
    return np.exp(acc / len(heads))


def head_bias_for_scale(scale, iters=200):
    """Bias ``b`` with ``hat(b) = log(scale)``, found by bisection on ``[0, sqrt(3)]``.

    With zero head weights, every head biased this way yields exactly
    ``scale``.  Attainable scales are ``[exp(LOG_SCALE_MIN), e]``.
    """
    target = math.log(scale)
    if not LOG_SCALE_MIN <= target <= LOG_SCALE_MAX:
        raise BadBeta(f"scale {scale} is outside the attainable head range")
    lo, hi = 0.0, SQRT3
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if hat(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class _Conditioner:
    """MLP ``u -> (log s, t)`` whose parameters live in the owning layer's dict."""

    def __init__(self, params, prefix, in_dim, out_dim, hidden, heads, scale_head, rng):
        self.p = params
        self.prefix = prefix
        self.heads = heads
        self.scale_head = scale_head
        pre = prefix
        params[pre + "A1"] = rng.standard_normal((hidden, in_dim)) / math.sqrt(max(in_dim, 1))
        params[pre + "c1"] = np.zeros(hidden)
        params[pre + "A2"] = rng.standard_normal((hidden, hidden)) / math.sqrt(hidden)
        params[pre + "c2"] = np.zeros(hidden)
        if scale_head == "mexican_hat":
            params[pre + "Wm"] = np.zeros((heads, out_dim, hidden))
            params[pre + "bm"] = np.zeros((heads, out_dim))
        elif scale_head == "exp":
            params[pre + "Ws"] = np.zeros((out_dim, hidden))
            params[pre + "bs"] = np.zeros(out_dim)
        else:
            raise ValueError(f"unknown scale head {scale_head!r}")
        params[pre + "Wt"] = np.zeros((out_dim, hidden))
        params[pre + "bt"] = np.zeros(out_dim)

    def names(self):
        tail = ("Wm", "bm") if self.scale_head == "mexican_hat" else ("Ws", "bs")
        return [self.prefix + k for k in ("A1", "c1", "A2", "c2") + tail + ("Wt", "bt")]

    def __getitem__(self, k):
        return self.p[self.prefix + k]

    def forward(self, u):
        h1 = np.tanh(u @ self["A1"].T + self["c1"])
        phi = np.tanh(h1 @ self["A2"].T + self["c2"])
        if self.scale_head == "mexican_hat":
            pm = np.einsum("mrh,nh->nmr", self["Wm"], phi) + self["bm"]
            logs = np.mean(hat(pm), axis=1)
        else:
            pm = None
            logs = phi @ self["Ws"].T + self["bs"]
        t = phi @ self["Wt"].T + self["bt"]
        return logs, t, (u, h1, phi, pm)

    def backward(self, cache, g_logs, g_t):
        u, h1, phi, pm = cache
        grads = {}
        pre = self.prefix
        if self.scale_head == "mexican_hat":
            g_pm = g_logs[:, None, :] * hat_grad(pm) / self.heads
            grads[pre + "Wm"] = np.einsum("nmr,nh->mrh", g_pm, phi)
            grads[pre + "bm"] = np.sum(g_pm, axis=0)
            g_phi = np.einsum("nmr,mrh->nh", g_pm, self["Wm"])
        else:
            grads[pre + "Ws"] = g_logs.T @ phi
            grads[pre + "bs"] = np.sum(g_logs, axis=0)
            g_phi = g_logs @ self["Ws"]
        grads[pre + "Wt"] = g_t.T @ phi
        grads[pre + "bt"] = np.sum(g_t, axis=0)
        g_phi = g_phi + g_t @ self["Wt"]
        g_a2 = g_phi * (1.0 - phi * phi)
        grads[pre + "A2"] = g_a2.T @ h1
        grads[pre + "c2"] = np.sum(g_a2, axis=0)
        g_a1 = (g_a2 @ self["A2"]) * (1.0 - h1 * h1)
        grads[pre + "A1"] = g_a1.T @ u
        grads[pre + "c1"] = np.sum(g_a1, axis=0)
        return g_a1 @ self["A1"], grads

    def set_constant_scale(self, scale):
        """Zero the head weights and bias the heads so that ``s == scale``."""
        if self.scale_head == "mexican_hat":
            self.p[self.prefix + "Wm"][...] = 0.0
            self.p[self.prefix + "bm"][...] = head_bias_for_scale(scale)
        else:
            self.p[self.prefix + "Ws"][...] = 0.0
            self.p[self.prefix + "bs"][...] = math.log(scale)
        self.p[self.prefix + "Wt"][...] = 0.0
        self.p[self.prefix + "bt"][...] = 0.0


class DualCoupling(Layer):
    """Two stacked affine couplings so every dimension is rescaled once.

    ``r`` is the size of the first partition (default ``d // 2``).
    ``scale_head="exp"`` swaps the bounded head for an unconstrained
    ``exp(linear)`` scale.
    """

    kind = "coupling"

    def __init__(self, shape, r=None, hidden=32, heads=4, scale_head="mexican_hat", rng=None):
        super().__init__(shape)
        d = self.dim
        if d < 2:
            raise ValueError("dual coupling needs d >= 2")
        self.r = d // 2 if r is None else int(r)
        if not 1 <= self.r < d:
            raise ValueError(f"split r={self.r} outside [1, {d})")
        rng = np.random.default_rng(0) if rng is None else rng
        self.scale_head = scale_head
        self.heads = heads
        self.hidden = hidden
        self.net1 = _Conditioner(self.params, "net1.", d - self.r, self.r, hidden, heads,
                                 scale_head, rng)
        self.net2 = _Conditioner(self.params, "net2.", self.r, d - self.r, hidden, heads,
                                 scale_head, rng)
        self.param_names = tuple(self.net1.names() + self.net2.names())

    def forward(self, x):
        r = self.r
        x1, x2 = x[:, :r], x[:, r:]
        logs1, t1, _ = self.net1.forward(x2)
        y1 = np.exp(logs1) * x1 + t1
        logs2, t2, _ = self.net2.forward(y1)
        y2 = np.exp(logs2) * x2 + t2
        return np.concatenate([y1, y2], axis=1), np.sum(logs1, axis=1) + np.sum(logs2, axis=1)

    def inverse(self, y):
        r = self.r
        y1, y2 = y[:, :r], y[:, r:]
        logs2, t2, _ = self.net2.forward(y1)
        x2 = (y2 - t2) * np.exp(-logs2)
        logs1, t1, _ = self.net1.forward(x2)
        x1 = (y1 - t1) * np.exp(-logs1)
        return (np.concatenate([x1, x2], axis=1),
                -(np.sum(logs1, axis=1) + np.sum(logs2, axis=1)))

    def backward(self, x, gy):
        r = self.r
        x1, x2 = x[:, :r], x[:, r:]
        logs1, t1, c1 = self.net1.forward(x2)
        s1 = np.exp(logs1)
        y1 = s1 * x1 + t1
        logs2, t2, c2 = self.net2.forward(y1)
        s2 = np.exp(logs2)
        gy1, gy2 = gy[:, :r], gy[:, r:]

        gx2 = gy2 * s2
        g_y1_net, grads = self.net2.backward(c2, gy2 * s2 * x2 + 1.0, gy2)
        gy1 = gy1 + g_y1_net
        gx1 = gy1 * s1
        g_x2_net, grads1 = self.net1.backward(c1, gy1 * s1 * x1 + 1.0, gy1)
        grads.update(grads1)
        return np.concatenate([gx1, gx2 + g_x2_net], axis=1), grads

    def scales(self, x):
        """``(s1, s2)`` evaluated along the forward pass."""
        r = self.r
        logs1, t1, _ = self.net1.forward(x[:, r:])
        y1 = np.exp(logs1) * x[:, :r] + t1
        logs2, _, _ = self.net2.forward(y1)
        return np.exp(logs1), np.exp(logs2)

    def set_constant_scale(self, scale):
        self.net1.set_constant_scale(scale)
        self.net2.set_constant_scale(scale)
