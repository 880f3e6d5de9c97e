"""Closed-form likelihood optima for quasi-linear flows, plus bound audits.

A quasi-linear flow ``f(x) = W x + b`` with a standard-normal base has
log-likelihood ``-1/2 (d log 2pi + tr(W S W^T)) + log|det W|`` for data
autocorrelation ``S``.  Its maximum over ``W`` depends only on the
eigenvalues of ``S``::

    L_max = -1/2 (d log 2pi + d + sum_i log lambda_i)

and is attained by ``W = U diag(lambda)^(-1/2) V^T`` for any orthogonal ``U``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateData, EmptyTrace, NotOrthogonal
from .flow import nll_bits_per_dim
from .linalg import as_matrix, invert, plu_logabsdet, spectral_norm, sym_eig

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_EPS = 1e-6
ORTHO_TOL = 1e-8


@dataclass
class QlfBoundReport:
    lmax_nats: float
    lmax_bpd: float
    eigenvalues: np.ndarray
    floored_count: int
    epsilon_floor: float
    mode: str

    def lines(self):
        """``key=value`` lines for text output."""
        eig = " ".join(repr(float(v)) for v in self.eigenvalues)
        return [
            f"mode={self.mode}",
            f"lmax_nats={self.lmax_nats!r}",
            f"lmax_bpd={self.lmax_bpd!r}",
            f"floored_count={self.floored_count}",
            f"epsilon_floor={self.epsilon_floor!r}",
            f"eigenvalues={eig}",
        ]


def _lmax(values):
    d = len(values)
    return -0.5 * (d * LOG_2PI + d + float(np.sum(np.log(values))))


def _floored(values, eps):
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    values = np.asarray(values, dtype=np.float64)
    return np.maximum(values, eps), int(np.sum(values < eps))


def qlf_lmax_per_point(x, eps=DEFAULT_EPS):
    """Optimum for a single point, using its rank-one autocorrelation ``x x^T``.

    All but one eigenvalue are zero, so the floor ``eps`` decides the value.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    values, _ = _floored(sym_eig(np.outer(x, x)).values, eps)
    return _lmax(values)


def qlf_lmax_per_point_report(dataset, eps=DEFAULT_EPS, bit_depth=0):
    """Mean of :func:`qlf_lmax_per_point` over the rows of ``dataset``."""
    data = as_matrix(dataset)
    n, d = data.shape
    if n < 1:
        raise DegenerateData("empty dataset")
    total, floored = 0.0, 0
    for row in data:
        # x x^T has the single nonzero eigenvalue |x|^2
        values = np.zeros(d)
        values[0] = float(row @ row)
        values, nf = _floored(values, eps)
        total += _lmax(values)
        floored += nf
    lmax = total / n
    return QlfBoundReport(lmax, nll_bits_per_dim(lmax, d, bit_depth), np.zeros(0), floored, eps,
                          "per_point")


def ppca_lmax(dataset, eps=DEFAULT_EPS, bit_depth=0):
    """Optimum over linear flows for a whole dataset.

    Data are centered, and the eigenvalues of the ``1/N`` sample covariance
    are floored at ``eps``.  ``bit_depth`` only affects the bits/dim figure.
    """
    data = as_matrix(dataset)
    n, d = data.shape
    if n < 2:
        raise DegenerateData(f"need at least 2 points, got {n}")
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / n
    values, floored = _floored(sym_eig(cov).values, eps)
    if floored == d:
        raise DegenerateData("every covariance eigenvalue is below the floor")
    lmax = _lmax(values)
    return QlfBoundReport(lmax, nll_bits_per_dim(lmax, d, bit_depth), values, floored, eps,
                          "covariance")


def qlf_objective(w, s):
    """Per-point log-likelihood of ``z = W x`` averaged under autocorrelation ``s``."""
    w = as_matrix(w, square=True)
    s = as_matrix(s, square=True)
    d = w.shape[0]
    return -0.5 * (d * LOG_2PI + float(np.trace(w @ s @ w.T))) + plu_logabsdet(w)[0]


def qlf_stationary_W(s, u, eps=DEFAULT_EPS):
    """``W = U diag(lambda)^(-1/2) V^T`` from the eigendecomposition of ``s``."""
    s = as_matrix(s, square=True)
    u = as_matrix(u, square=True)
    if u.shape != s.shape:
        raise ValueError(f"u has shape {u.shape}, s has shape {s.shape}")
    if np.linalg.norm(u.T @ u - np.eye(u.shape[0])) > ORTHO_TOL:
        raise NotOrthogonal("u is not orthogonal")
    values, vectors = sym_eig(s)
    values, _ = _floored(values, eps)
    return (u / np.sqrt(values)) @ vectors.T


def qlf_gradient(w, s):
    """``dL/dW = -W S^T + W^{-T}``."""
    w = as_matrix(w, square=True)
    s = as_matrix(s, square=True)
    return -w @ s.T + invert(w).T


def hadamard_audit(j, slack=1e-12):
    """Check ``|det J| <= prod_i ||J e_i|| <= ||J||_2^d``.

    Returns ``(det, col_bound, spec_bound, ok)``; ``slack`` is applied
    relative to the larger side of each inequality, with an absolute floor
    of ``slack``.
    """
    j = as_matrix(j, square=True)
    d = j.shape[0]
    logabs, sign = plu_logabsdet(j)
    det = sign * math.exp(logabs)
    col_bound = float(np.prod(np.linalg.norm(j, axis=0)))
    spec_bound = spectral_norm(j, tol=1e-14, max_iter=20000) ** d
    ok = (abs(det) <= col_bound + slack * max(1.0, col_bound)
          and col_bound <= spec_bound * (1.0 + slack) + slack)
    return det, col_bound, spec_bound, bool(ok)


@dataclass
class Prop1Report:
    """Per-step downstream log-det sums next to a layer's gradient norm."""

    layer_index: int
    threshold: float
    logdet_sums: np.ndarray
    grad_norms: np.ndarray
    flags: np.ndarray
    first_flag: int = None

    def lines(self):
        out = [f"layer={self.layer_index}", f"threshold={self.threshold!r}",
               f"first_flag={'' if self.first_flag is None else self.first_flag}",
               "step,logdet_sum,grad_norm,flag"]
        for t, (s, g, f) in enumerate(zip(self.logdet_sums, self.grad_norms, self.flags)):
            out.append(f"{t},{float(s)!r},{float(g)!r},{int(f)}")
        return out


def prop1_audit(trace, layer_index, threshold):
    """Compare ``sum_{j > l} logdet_j`` with ``||grad theta_l||`` over a trace.

    A step is flagged when the downstream log-det sum exceeds ``threshold``
    (``d log K`` for a Lipschitz bound ``K``).  This is observational; it
    never raises on a flag.
    """
    logdet = np.asarray(trace.logdet, dtype=np.float64)
    grads = np.asarray(trace.gradnorm, dtype=np.float64)
    if logdet.size == 0:
        raise EmptyTrace("trace has no records")
    n_layers = logdet.shape[1]
    if not 0 <= layer_index < n_layers:
        raise ValueError(f"layer_index {layer_index} outside [0, {n_layers})")
    sums = np.sum(logdet[:, layer_index + 1:], axis=1)
    flags = sums > threshold
    hits = np.flatnonzero(flags)
    first = int(hits[0]) if hits.size else None
    return Prop1Report(layer_index, float(threshold), sums, grads[:, layer_index].copy(), flags,
                       first)
