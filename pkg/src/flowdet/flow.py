"""Flow composition, exact likelihood and the analytic gradient recursion.

Every invertible layer implements the :class:`Layer` contract on batches of
flattened points (shape ``(N, d)``, channel-major ``(c, h, w)`` layout):

* ``forward(x) -> (y, logdet)`` with ``logdet[n] = log|det J(x[n])|``
* ``inverse(y) -> (x, logdet)`` with ``logdet[n] = -log|det J(x[n])|``
* ``backward(x, gy) -> (gx, grads)``, one step of the reverse recursion::

      gx[n]  = J(x[n])^T gy[n] + d logdet[n] / d x[n]
      grads  = sum_n (d y[n] / d theta)^T gy[n] + d logdet[n] / d theta

A :class:`FlowModel` chains layers across multi-scale levels.  Dimensions
split out at the end of a level are left untouched by all later levels, so
the latent vector is the concatenation of the per-level latents.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfSupport
from .linalg import plu_logabsdet

LOG_2PI = math.log(2.0 * math.pi)
BASES = ("normal", "uniform")


class Layer:
    """Base class for invertible layers with analytic backward passes."""

    kind = "layer"
    param_names = ()

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)
        self.params = {}

    @property
    def dim(self):
        return int(np.prod(self.shape))

    @property
    def out_shape(self):
        return self.shape

    def forward(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError

    def backward(self, x, gy):
        raise NotImplementedError

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def num_params(self):
        return sum(self.params[k].size for k in self.param_names)

    def get_flat(self):
        if not self.param_names:
            return np.zeros(0)
        return np.concatenate([np.ravel(self.params[k]) for k in self.param_names])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise ValueError(f"{self.kind}: expected {self.num_params()} values, got {flat.size}")
        i = 0
        for k in self.param_names:
            p = self.params[k]
            self.params[k] = flat[i:i + p.size].reshape(p.shape).copy()
            i += p.size

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def layer_apply(layer, direction, x):
    """Apply ``layer`` to a single point or a batch.

    Returns ``(y, logdet)``; for a single point ``logdet`` is a float.
    """
    xb, single = _as_batch(x)
    if not np.all(np.isfinite(xb)):
        raise ValueError("input contains NaN or Inf")
    if xb.shape[1] != layer.dim:
        raise ValueError(f"expected dimension {layer.dim}, got {xb.shape[1]}")
    if direction == "forward":
        y, ld = layer.forward(xb)
    elif direction == "inverse":
        y, ld = layer.inverse(xb)
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', not {direction!r}")
    return (y[0], float(ld[0])) if single else (y, ld)


# ---------------------------------------------------------------------------
# Base distributions


def base_log_prob(base, z):
    """Log density of the base distribution and its gradient with respect to z."""
    if base == "normal":
        d = z.shape[1]
        return -0.5 * (d * LOG_2PI + np.sum(z * z, axis=1)), -z
    if base == "uniform":
        inside = np.all((z > 0.0) & (z < 1.0), axis=1)
        if not np.all(inside):
            raise OutOfSupport(f"{int(np.sum(~inside))} latent(s) outside (0, 1)^d")
        return np.zeros(z.shape[0]), np.zeros_like(z)
    raise ValueError(f"unknown base distribution {base!r}")


# ---------------------------------------------------------------------------
# Composition


@dataclass
class Level:
    """One scale of a multi-scale flow.

    ``blocks`` is a list of layer lists.  ``split`` dims are factored out
    (left as identity) after the level; the last level uses ``split = 0``.
    """

    blocks: list
    split: int = 0

    @property
    def layers(self):
        return [layer for block in self.blocks for layer in block]


@dataclass
class BackpropResult:
    nll: float
    grads: list
    layer_logdet: np.ndarray
    layer_var: np.ndarray
    grad_norms: np.ndarray
    penalty: float = 0.0
    h_grads: list = field(default=None)
    finite: bool = True


class FlowModel:
    """Ordered invertible layers over multi-scale levels with a base density."""

    def __init__(self, levels, base="normal", config=None, dim=None):
        if dim is not None:
            self._dim = int(dim)
        if base not in BASES:
            raise ValueError(f"base must be one of {BASES}, got {base!r}")
        self.levels = list(levels)
        self.base = base
        self.config = dict(config or {})
        if not self.levels:
            raise ValueError("a FlowModel needs at least one level (use empty blocks for identity)")
        self._check_dims()

    @classmethod
    def from_layers(cls, layers, base="normal", dim=None):
        """Single-level model, one block per layer."""
        if not layers and dim is None:
            raise ValueError("dim is required for an empty model")
        return cls([Level([[layer] for layer in layers], 0)], base, dim=dim)

    def _check_dims(self):
        self.offsets = []
        offset = 0
        for i, level in enumerate(self.levels):
            self.offsets.append(offset)
            for layer in level.layers:
                if layer.dim != self._level_dim(i, offset):
                    raise ValueError(f"level {i}: layer {layer!r} has dim {layer.dim}, "
                                     f"expected {self._level_dim(i, offset)}")
            offset += level.split

    def _level_dim(self, i, offset):
        return self.dim - offset

    @property
    def dim(self):
        if hasattr(self, "_dim"):
            return self._dim
        for level in self.levels:
            if level.layers:
                return level.layers[0].dim
        raise ValueError("cannot infer dimension of an empty model")

    @property
    def layers(self):
        return [layer for level in self.levels for layer in level.layers]

    def layer_offsets(self):
        return [off for off, level in zip(self.offsets, self.levels) for _ in level.layers]

    def block_spans(self):
        """``(first_layer, last_layer, offset)`` for every block, in order."""
        spans, i = [], 0
        for off, level in zip(self.offsets, self.levels):
            for block in level.blocks:
                if block:
                    spans.append((i, i + len(block) - 1, off))
                i += len(block)
        return spans

    def level_sizes(self):
        """Number of latent dims owned by each level, in level order."""
        sizes = [level.split for level in self.levels[:-1]]
        sizes.append(self.dim - sum(sizes))
        return sizes

    def split_latents(self, z):
        z = np.asarray(z, dtype=np.float64)
        bounds = np.cumsum([0] + self.level_sizes())
        return [z[..., a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def join_latents(self, parts):
        return np.concatenate(parts, axis=-1)

    # -- passes ------------------------------------------------------------

    def forward(self, x):
        """``(z, logdet)`` for a batch ``x`` of shape ``(N, d)``."""
        z = np.array(x, dtype=np.float64)
        total = np.zeros(z.shape[0])
        for off, layer in zip(self.layer_offsets(), self.layers):
            z[:, off:], ld = layer.forward(z[:, off:])
            total += ld
        return z, total

    def inverse(self, z):
        x = np.array(z, dtype=np.float64)
        total = np.zeros(x.shape[0])
        for off, layer in zip(reversed(self.layer_offsets()), reversed(self.layers)):
            x[:, off:], ld = layer.inverse(x[:, off:])
            total += ld
        return x, total

    def log_prob(self, x):
        z, logdet = self.forward(x)
        logq, _ = base_log_prob(self.base, z)
        return logq + logdet

    def backprop(self, x, transport_lambda=0.0, keep_h_grads=False):
        """Mean NLL over the batch and its gradient for every layer.

        The reverse recursion is seeded with the gradient of the base log
        density at the latent: ``-z`` for the normal base and zero for the
        uniform base.  With ``transport_lambda > 0`` the objective also
        carries ``lambda * mean ||block_out - block_in||^2`` summed over
        blocks.  Returned gradients are of the minimized objective.
        """
        x = np.array(x, dtype=np.float64)
        n = x.shape[0]
        layers, offsets = self.layers, self.layer_offsets()
        state = x.copy()
        inputs, logdets, variances = [], [], []
        for off, layer in zip(offsets, layers):
            h = state[:, off:].copy()
            inputs.append(h)
            y, ld = layer.forward(h)
            state[:, off:] = y
            logdets.append(ld)
            variances.append(float(np.mean(np.var(y, axis=0))) if n > 1 else 0.0)
        z = state
        logq, g = base_log_prob(self.base, z)
        logp = logq + (np.sum(logdets, axis=0) if logdets else 0.0)

        spans = self.block_spans() if transport_lambda > 0.0 else []
        ends, starts = {}, {}
        penalty = 0.0
        for first, last, off in spans:
            h_out = inputs[last + 1] if last + 1 < len(layers) and offsets[last + 1] == off \
                else _output_of(layers[last], inputs[last])
            disp = h_out - inputs[first]
            penalty += transport_lambda * float(np.mean(np.sum(disp * disp, axis=1)))
            ends.setdefault(last, []).append(disp)
            starts.setdefault(first, []).append(disp)

        grads = [None] * len(layers)
        h_grads = [None] * len(layers) if keep_h_grads else None
        for l in range(len(layers) - 1, -1, -1):
            off = offsets[l]
            gy = g[:, off:]
            for disp in ends.get(l, ()):
                gy = gy - 2.0 * transport_lambda * disp
            gx, gth = layers[l].backward(inputs[l], gy)
            for disp in starts.get(l, ()):
                gx = gx + 2.0 * transport_lambda * disp
            g = g.copy()
            g[:, off:] = gx
            grads[l] = {k: -v / n for k, v in gth.items()}
            if keep_h_grads:
                h_grads[l] = gx.copy()

        norms = np.array([math.sqrt(sum(float(np.sum(v * v)) for v in gr.values()))
                          for gr in grads])
        finite = bool(np.all(np.isfinite(logp))) and all(
            np.all(np.isfinite(v)) for gr in grads for v in gr.values())
        return BackpropResult(
            nll=float(-np.mean(logp)),
            grads=grads,
            layer_logdet=np.array([float(np.mean(ld)) for ld in logdets]),
            layer_var=np.array(variances),
            grad_norms=norms,
            penalty=penalty,
            h_grads=h_grads,
            finite=finite,
        )

    # -- parameters --------------------------------------------------------

    def get_flat(self):
        parts = [layer.get_flat() for layer in self.layers]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_flat(self, flat):
        i = 0
        for layer in self.layers:
            k = layer.num_params()
            layer.set_flat(flat[i:i + k])
            i += k

    def num_params(self):
        return sum(layer.num_params() for layer in self.layers)


def _output_of(layer, h):
    return layer.forward(h)[0]


# ---------------------------------------------------------------------------
# Functional surface


def log_likelihood(model, x):
    """Log density in nats of a point (float) or batch (array)."""
    xb, single = _as_batch(x)
    if not np.all(np.isfinite(xb)):
        raise ValueError("input contains NaN or Inf")
    if xb.shape[1] != model.dim:
        raise ValueError(f"expected dimension {model.dim}, got {xb.shape[1]}")
    lp = model.log_prob(xb)
    return float(lp[0]) if single else lp


def nll_bits_per_dim(nats, d, bit_depth):
    """Negative log-likelihood in bits/dim for data dequantized to [0, 1]^d."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return -nats / (d * math.log(2.0)) + bit_depth


def backprop(model, batch, **kwargs):
    """``(mean NLL, per-layer gradient dicts)``; see :meth:`FlowModel.backprop`."""
    res = model.backprop(np.atleast_2d(np.asarray(batch, dtype=np.float64)), **kwargs)
    return res.nll, res.grads


def sample(model, n, temperature=1.0, seed=0):
    """Draw ``n`` points by inverting the flow from ``N(0, temperature^2 I)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if model.base != "normal":
        raise ValueError("sampling requires the standard-normal base")
    rng = np.random.default_rng(seed)
    z = temperature * rng.standard_normal((n, model.dim))
    x, _ = model.inverse(z)
    return x


PERTURB_MODES = ("keep_first", "resample_first")


def perturb(model, x, k, mode="keep_first", temperature=1.0, seed=0):
    """Encode ``x``, resample some levels' latents from the base, decode.

    ``keep_first`` keeps the latents of the first ``k`` levels (in the order
    they are factored out) and resamples the rest; ``resample_first`` does
    the opposite.
    """
    if mode not in PERTURB_MODES:
        raise ValueError(f"mode must be one of {PERTURB_MODES}")
    n_levels = len(model.levels)
    if not 0 <= k <= n_levels:
        raise ValueError(f"k={k} outside [0, {n_levels}]")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z, _ = model.forward(xb)
    parts = model.split_latents(z)
    rng = np.random.default_rng(seed)
    for i, part in enumerate(parts):
        keep = (i < k) if mode == "keep_first" else (i >= k)
        if keep:
            continue
        if model.base == "normal":
            parts[i] = temperature * rng.standard_normal(part.shape)
        else:
            parts[i] = rng.uniform(0.0, 1.0, part.shape)
    out, _ = model.inverse(model.join_latents(parts))
    return out


def numeric_jacobian(fn, x, h=None):
    """Central-difference Jacobian of ``fn`` at ``x``.

    ``h`` defaults to ``1e-5 * (1 + |x_i|)`` per coordinate.
    """
    x = np.asarray(x, dtype=np.float64)
    steps = 1e-5 * (1.0 + np.abs(x)) if h is None else np.full(x.shape, float(h))
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * steps[i]))
    return np.stack(cols, axis=1)


def numeric_logdet(fn, x, h=None):
    """``log|det|`` of the central-difference Jacobian."""
    return plu_logabsdet(numeric_jacobian(fn, x, h))[0]


def layer_fn(layer, direction="forward"):
    """Single-point view of a layer, for use with :func:`numeric_jacobian`."""
    def fn(v):
        return layer_apply(layer, direction, v)[0]
    return fn


def model_fn(model):
    def fn(v):
        return model.forward(np.asarray(v, dtype=np.float64)[None, :])[0][0]
    return fn
