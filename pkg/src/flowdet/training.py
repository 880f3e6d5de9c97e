"""Maximum-likelihood training with Adamax and per-step diagnostics."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTrace, NonInvertibleParams
from .flow import nll_bits_per_dim

ADAMAX_BETA1 = 0.9
ADAMAX_BETA2 = 0.999
ADAMAX_EPS = 1e-8


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 256
    lr_start: float = 0.01
    lr_end: float = 0.001
    decay_steps: int = 1000
    decay_rate: float = 0.98
    beta: float = 0.8
    seed: int = 0
    ablation: str = "none"
    transport_lambda: float = 0.0
    bit_depth: int = 0
    holdout_fraction: float = 0.1
    max_nonfinite: int = 10
    #: evaluate held-out NLL every this many steps (0: only before and after)
    eval_every: int = 0

    def lr_at(self, t):
        return lr_at(t, self.lr_start, self.lr_end, self.decay_steps, self.decay_rate)


def lr_at(t, lr_start=0.01, lr_end=0.001, decay_steps=1000, decay_rate=0.98):
    """``max(lr_end, lr_start * decay_rate ** (t / decay_steps))``."""
    return max(lr_end, lr_start * decay_rate ** (t / decay_steps))


@dataclass
class AdamaxState:
    m: np.ndarray
    u: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adamax_step(params, grads, state, lr, beta1=ADAMAX_BETA1, beta2=ADAMAX_BETA2,
                eps=ADAMAX_EPS):
    """One Adamax descent step on flat arrays; returns ``(params, state)``.

    Non-finite gradients leave both untouched; check with
    ``np.all(np.isfinite(grads))`` beforehand to log the event.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and state must have matching shapes")
    if not np.all(np.isfinite(grads)):
        return params, state
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    u = np.maximum(beta2 * state.u, np.abs(grads))
    step = (lr / (1.0 - beta1 ** t)) * m / (u + eps)
    return params - step, AdamaxState(m, u, t)


def flat_grads(model, grads):
    """Concatenate per-layer gradient dicts in :meth:`FlowModel.get_flat` order."""
    parts = [np.ravel(g[name]) for layer, g in zip(model.layers, grads)
             for name in layer.param_names]
    return np.concatenate(parts) if parts else np.zeros(0)


def l2_transport_penalty(h_in, h_out, lam):
    """``lam * mean_n ||h_out[n] - h_in[n]||^2``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    disp = np.atleast_2d(np.asarray(h_out, dtype=np.float64) - np.asarray(h_in, dtype=np.float64))
    return float(lam * np.mean(np.sum(disp * disp, axis=1)))


@dataclass
class TrainTrace:
    """Append-only per-step records.

    Row ``t`` holds the statistics of the parameters *before* update ``t``,
    so row 0 describes the initialization.
    """

    n_layers: int
    nll_nats: list = field(default_factory=list)
    nll_bpd: list = field(default_factory=list)
    logdet: list = field(default_factory=list)
    var: list = field(default_factory=list)
    gradnorm: list = field(default_factory=list)
    events: list = field(default_factory=list)
    heldout: list = field(default_factory=list)
    diverged: bool = False

    def __len__(self):
        return len(self.nll_nats)

    def append(self, nll, bpd, logdet, var, gradnorm):
        self.nll_nats.append(float(nll))
        self.nll_bpd.append(float(bpd))
        self.logdet.append(np.asarray(logdet, dtype=np.float64).copy())
        self.var.append(np.asarray(var, dtype=np.float64).copy())
        self.gradnorm.append(np.asarray(gradnorm, dtype=np.float64).copy())

    def header(self):
        cols = ["nll_nats", "nll_bpd"]
        for i in range(self.n_layers):
            cols += [f"logdet_{i}", f"var_{i}", f"gradnorm_{i}"]
        return cols

    def rows(self):
        for t in range(len(self)):
            row = [self.nll_nats[t], self.nll_bpd[t]]
            for i in range(self.n_layers):
                row += [self.logdet[t][i], self.var[t][i], self.gradnorm[t][i]]
            yield row

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise EmptyTrace(f"{path} is empty") from None
            n_layers = sum(1 for c in header if c.startswith("logdet_"))
            trace = cls(n_layers)
            for row in reader:
                v = [float(x) for x in row]
                body = np.array(v[2:]).reshape(n_layers, 3) if n_layers else np.zeros((0, 3))
                trace.append(v[0], v[1], body[:, 0], body[:, 1], body[:, 2])
        return trace

    def block_logdet(self, spans):
        """``(steps, blocks)`` log-det sums for ``model.block_spans()``."""
        ld = np.asarray(self.logdet)
        return np.stack([ld[:, a:b + 1].sum(axis=1) for a, b, _ in spans], axis=1)


def split_holdout(dataset, fraction=0.1):
    """``(train, heldout)`` with the held-out part taken from the end."""
    data = np.asarray(dataset, dtype=np.float64)
    n_hold = int(round(fraction * len(data)))
    if n_hold <= 0:
        return data, data[:0]
    return data[:-n_hold], data[-n_hold:]


def mean_nll(model, data, chunk=4096):
    """Mean negative log-likelihood (nats) over ``data``."""
    total = 0.0
    with np.errstate(all="ignore"):
        for i in range(0, len(data), chunk):
            total += float(np.sum(model.log_prob(data[i:i + chunk])))
    return -total / len(data)


def _batches(n, batch_size, rng):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]
        if n < batch_size:
            yield perm


def train(model, config, dataset):
    """Minimize the mean NLL of ``dataset`` by Adamax on seeded minibatches.

    The last ``holdout_fraction`` of the rows is held out.  Steps whose NLL or
    gradients are not finite (or whose parameters became singular) are
    skipped and logged; after ``max_nonfinite``
    consecutive such steps training stops with ``trace.diverged = True``.
    Returns ``(model, trace)``; the model is updated in place.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ValueError(f"dataset shape {data.shape} does not match model dim {model.dim}")
    train_set, held = split_holdout(data, config.holdout_fraction)
    if len(train_set) == 0:
        raise ValueError("no training data left after the held-out split")
    d = model.dim
    trace = TrainTrace(len(model.layers))
    if config.steps <= 0:
        return model, trace
    rng = np.random.default_rng(config.seed)
    batches = _batches(len(train_set), min(config.batch_size, len(train_set)), rng)
    params = model.get_flat()
    state = AdamaxState.zeros(params.size)
    if len(held):
        trace.heldout.append((0, mean_nll(model, held)))
    bad = 0
    for t in range(config.steps):
        batch = train_set[next(batches)]
        try:
            with np.errstate(all="ignore"):
                res = model.backprop(batch, transport_lambda=config.transport_lambda)
        except NonInvertibleParams:
            res = None
        if res is None:
            nan = np.full(len(model.layers), np.nan)
            trace.append(np.nan, np.nan, nan, nan, nan)
            g = None
        else:
            trace.append(res.nll, nll_bits_per_dim(-res.nll, d, config.bit_depth),
                         res.layer_logdet, res.layer_var, res.grad_norms)
            g = flat_grads(model, res.grads) if res.finite else None
        if g is None or not math.isfinite(res.nll) or not np.all(np.isfinite(g)):
            bad += 1
            trace.events.append((t, "nonfinite", "step skipped"))
            if bad >= config.max_nonfinite:
                trace.diverged = True
                trace.events.append((t, "diverged", f"{bad} consecutive non-finite steps"))
                break
            continue
        bad = 0
        params, state = adamax_step(params, g, state, config.lr_at(t))
        model.set_flat(params)
        if config.eval_every and len(held) and (t + 1) % config.eval_every == 0:
            trace.heldout.append((t + 1, mean_nll(model, held)))
    if len(held) and (not trace.heldout or trace.heldout[-1][0] != len(trace)):
        trace.heldout.append((len(trace), mean_nll(model, held)))
    return model, trace
