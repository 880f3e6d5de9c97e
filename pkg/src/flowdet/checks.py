"""Invariant suite: every numerical property the package promises, as
independent checks with explicit tolerances.

Each check returns a :class:`CheckResult`; :func:`run_checks` runs them in
order and never stops early, so the full table is always available.
"""

import functools
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .data import toy_dataset
from .flow import layer_fn, numeric_jacobian, numeric_logdet
from .layers import (DualCoupling, ElementwiseScale, InvConv, Linear, NormalCDF, RQActivation,
                     Tanh, build_model, knots_from_params, local_maxima_count, make_block)
from .layers.coupling import LOG_SCALE_MIN, hat
from .layers.spline import rq_eval, rq_invert
from .qlf import hadamard_audit, ppca_lmax, qlf_gradient, qlf_stationary_W
from .training import TrainConfig, flat_grads, split_holdout, train

S_MIN = math.exp(LOG_SCALE_MIN)
S_MAX = math.e


@dataclass
class CheckResult:
    name: str
    criterion: int
    passed: bool
    value: float
    tol: float
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  [{self.criterion}] {self.name:<26} value={self.value:.3e} "
                f"tol={self.tol:.1e}  {self.detail}")


def _within(value, tol):
    # NaN never passes
    return bool(value <= tol)


# -- random layers -------------------------------------------------------


def _perturb(layer, rng, scale):
    for k in layer.param_names:
        p = layer.params[k]
        layer.params[k] = p + scale * rng.standard_normal(p.shape)
    return layer


def random_layers(rng):
    """One randomly parameterized instance of every layer kind, all with d <= 8."""
    conv1 = InvConv((3, 1, 1), k=1, weight=np.eye(3) + 0.5 * rng.standard_normal((3, 3)))
    conv2 = InvConv((2, 2, 2), k=2, weight=np.eye(8) + 0.3 * rng.standard_normal((8, 8)))
    mh = _perturb(DualCoupling((4, 1, 1), hidden=8, heads=4, rng=rng), rng, 0.5)
    ex = _perturb(DualCoupling((5, 1, 1), hidden=8, scale_head="exp", rng=rng), rng, 0.3)
    rq = _perturb(RQActivation((3, 1, 1), bins=8, beta=0.8), rng, 1.0)
    lin = Linear((4, 1, 1), weight=np.eye(4) + 0.5 * rng.standard_normal((4, 4)),
                 bias=rng.standard_normal(4))
    scale = ElementwiseScale((3, 1, 1), scale=np.exp(rng.standard_normal(3)))
    return [conv1, conv2, mh, ex, rq, Tanh((4, 1, 1)), NormalCDF((4, 1, 1)), lin, scale]


def _random_knot_params(rng, bins):
    """Standard-normal raw knot parameters and a box scale in ``[1, 4]``."""
    return (rng.standard_normal(bins + 1), rng.standard_normal(bins + 1),
            rng.standard_normal(bins + 1), rng.uniform(1.0, 4.0))


def _rel(a, b, floor):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# -- criterion 1 ---------------------------------------------------------


def _suffix_nll(model, x, start):
    """Mean NLL recomputed from layer ``start`` given cached inputs."""
    layers, offsets = model.layers, model.layer_offsets()
    z = x.copy()
    total = np.zeros(len(z))
    for off, layer in zip(offsets[start:], layers[start:]):
        z[:, off:], ld = layer.forward(z[:, off:])
        total += ld
    logq = -0.5 * (z.shape[1] * math.log(2.0 * math.pi) + np.sum(z * z, axis=1))
    return -float(np.mean(logq + total))


#: denominator floor for relative gradient errors.  Central differences at
#: h = 1e-5 carry roundoff near eps * |NLL| / h ~ 1e-10, so smaller gradients
#: cannot be resolved to 1e-5 relative by the oracle itself.
GRAD_FLOOR = 1e-4


def fd_gradient(model, x, floor=GRAD_FLOOR):
    """``(max relative error, n_params)`` of backprop against central differences.

    Step ``h = 1e-5 (1 + |theta|)``; each parameter is perturbed in place
    and only the layers from its own onward are re-evaluated.
    """
    res = model.backprop(x)
    analytic = flat_grads(model, res.grads)
    numeric = []
    h_in = x.copy()
    inputs = []
    for off, layer in zip(model.layer_offsets(), model.layers):
        inputs.append(h_in.copy())
        h_in[:, off:] = layer.forward(h_in[:, off:])[0]
    for li, layer in enumerate(model.layers):
        for name in layer.param_names:
            p = layer.params[name]
            flat = p.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                h = 1e-5 * (1.0 + abs(old))
                flat[i] = old + h
                fp = _suffix_nll(model, inputs[li], li)
                flat[i] = old - h
                fm = _suffix_nll(model, inputs[li], li)
                flat[i] = old
                numeric.append((fp - fm) / (2.0 * h))
    numeric = np.array(numeric)
    return float(np.max(_rel(analytic, numeric, floor))), analytic.size


def check_gradients(seeds=20, tol=1e-5):
    worst, count = 0.0, 0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        model = build_model((4, 1, 1), blocks_per_level=2, bins=8, heads=4, hidden=4, beta=0.8,
                            seed=seed)
        for layer in model.layers:
            _perturb(layer, rng, 0.3)
        x = rng.standard_normal((8, 4))
        err, count = fd_gradient(model, x)
        worst = max(worst, err) if not math.isnan(err) else err
    return CheckResult("gradients", 1, _within(worst, tol), worst, tol,
                       f"{seeds} seeds x {count} params, d=4, I=8, M=4")


# -- criterion 2 ---------------------------------------------------------


def check_logdets(seeds=50, tol=1e-6):
    worst, kinds = 0.0, set()
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        for layer in random_layers(rng):
            x = rng.standard_normal(layer.dim)
            analytic = float(layer.forward(x[None, :])[1][0])
            numeric = numeric_logdet(layer_fn(layer), x)
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
            kinds.add(type(layer).__name__ + getattr(layer, "scale_head", ""))
    return CheckResult("logdets", 2, _within(worst, tol), worst, tol,
                       f"{seeds} seeds x {len(kinds)} layer kinds")


# -- criterion 3 ---------------------------------------------------------


def _roundtrip_error(model, x):
    z, _ = model.forward(x)
    xr, _ = model.inverse(z)
    return float(np.max(np.abs(xr - x)))


def check_invertibility_init(tol=1e-8):
    rng = np.random.default_rng(7)
    worst = 0.0
    for beta in (0.5, 0.8, 1.0):
        m2 = build_model((2, 1, 1), blocks_per_level=4, beta=beta, seed=3)
        worst = max(worst, _roundtrip_error(m2, 2.0 * rng.standard_normal((100, 2))))
        img = build_model((1, 8, 8), levels=3, blocks_per_level=2, k=2, beta=beta, seed=3)
        worst = max(worst, _roundtrip_error(img, rng.uniform(0.0, 1.0, (100, 64))))
    return CheckResult("invertibility_init", 3, _within(worst, tol), worst, tol,
                       "2-D and 8x8x1 three-level models")


@functools.lru_cache(maxsize=4)
def trained_rings(steps=5000, seed=0, ablation="none", blocks=4, n=20000):
    """``(model, trace, data)`` of the reference rings run; cached per process."""
    data = toy_dataset("rings", n, seed=0)
    model = build_model((2, 1, 1), blocks_per_level=blocks, beta=0.8, ablation=ablation,
                        seed=seed)
    cfg = TrainConfig(steps=steps, batch_size=256, seed=seed, ablation=ablation, eval_every=500)
    model, trace = train(model, cfg, data)
    return model, trace, data


def check_invertibility_trained(tol=1e-6, steps=5000):
    model, _, data = trained_rings(steps)
    _, held = split_holdout(data)
    worst = _roundtrip_error(model, held[:100])
    return CheckResult("invertibility_trained", 3, _within(worst, tol), worst, tol,
                       f"rings, {steps} steps, 100 held-out points")


# -- criterion 4 ---------------------------------------------------------


def check_block_init(tol=1e-9):
    rng = np.random.default_rng(11)
    worst = 0.0
    for beta in (0.5, 0.7, 0.9, 1.0):
        for shape, k in (((4, 1, 1), 1), ((1, 4, 4), 2)):
            block = make_block(shape, k=k, bins=16, heads=4, hidden=16, beta=beta, rng=rng)
            d = block[0].dim
            x = rng.standard_normal((100, d))
            # with k > 1 the identity conv still rearranges pixels into channels
            target = block[0].forward(x)[0]
            h = x
            lds = []
            for layer in block:
                h, ld = layer.forward(h)
                lds.append(ld)
            conv, coup, act = lds[0], lds[1], lds[-1]
            split = d * math.log(1.0 / beta)
            worst = max(worst, float(np.max(np.abs(h - target))),
                        float(np.max(np.abs(conv + coup + act))),
                        float(np.max(np.abs(conv + coup - split))),
                        float(np.max(np.abs(act + split))))
    return CheckResult("block_init", 4, _within(worst, tol), worst, tol,
                       "beta in {0.5,0.7,0.9,1.0}, d=4 and 16")


# -- criterion 5 ---------------------------------------------------------


def correlated_gaussian(n, d=4, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    mean = rng.standard_normal(d)
    return rng.standard_normal((n, d)) @ a.T + mean


@functools.lru_cache(maxsize=2)
def qlf_run(n=100000, d=4, steps=3000, batch_size=1024, seed=0):
    """Train a single unconstrained linear flow; returns ``(mean_loglik, bound)``."""
    from .io import linear_model

    data = correlated_gaussian(n, d, seed)
    model = linear_model(d)
    cfg = TrainConfig(steps=steps, batch_size=batch_size, seed=seed, holdout_fraction=0.0)
    model, _ = train(model, cfg, data)
    loglik = float(np.mean(model.log_prob(data)))
    return loglik, ppca_lmax(data).lmax_nats


def check_qlf_optimum(tol=1e-2):
    loglik, bound = qlf_run()
    gap = bound - loglik
    return CheckResult("qlf_optimum", 5, _within(abs(gap), tol), abs(gap), tol,
                       f"mean loglik {loglik:.6f} vs bound {bound:.6f}")


def check_qlf_bound(tol=1e-6):
    loglik, bound = qlf_run()
    excess = loglik - bound
    return CheckResult("qlf_bound_respected", 5, _within(excess, tol), excess, tol,
                       "trained value minus bound")


# -- criterion 6 ---------------------------------------------------------


def check_stationary(n=100, tol=1e-10):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 9))
        a = rng.standard_normal((d, d))
        s = a @ a.T + 0.1 * np.eye(d)
        u, _ = np.linalg.qr(rng.standard_normal((d, d)))
        w = qlf_stationary_W(s, u)
        worst = max(worst, float(np.linalg.norm(qlf_gradient(w, s))))
    return CheckResult("qlf_stationary", 6, _within(worst, tol), worst, tol,
                       f"{n} random SPD S, random orthogonal U")


# -- criterion 7 ---------------------------------------------------------


def check_hadamard(n=1000, slack=1e-12):
    rng = np.random.default_rng(8)
    violations = 0
    count = 0
    while count < n:
        for layer in random_layers(rng):
            if count >= n:
                break
            x = rng.standard_normal(layer.dim)
            j = numeric_jacobian(layer_fn(layer), x)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ok = hadamard_audit(j, slack)[3]
            violations += not ok
            count += 1
    return CheckResult("hadamard_chain", 7, violations == 0, float(violations), 0.0,
                       f"{n} layer Jacobians, slack {slack:g}")


# -- criterion 8 ---------------------------------------------------------


def _spline(rng, bins):
    tx, ty, ta, w = _random_knot_params(rng, bins)
    kn = knots_from_params(tx, ty, ta, w)
    return kn, kn.full_x[None, :], kn.full_y[None, :], kn.full_a[None, :]


def _eval(X, Y, A, x, slope):
    y, logd = rq_eval(X, Y, A, np.zeros(x.size, dtype=np.intp), x, slope)
    return y, np.exp(logd)


def check_spline_roundtrip(seeds=50, grid=10000, bins=16, tol=1e-10):
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        kn, X, Y, A = _spline(rng, bins)
        lo, hi = kn.xs[0], kn.xs[-1]
        span = hi - lo
        x = np.linspace(lo - span, hi + span, grid)
        row = np.zeros(grid, dtype=np.intp)
        with np.errstate(all="ignore"):
            try:
                y, _ = rq_eval(X, Y, A, row, x, kn.outer_slope)
                xr, _ = rq_invert(X, Y, A, row, y, kn.outer_slope)
                err = float(np.max(np.abs(xr - x)))
            except ArithmeticError:
                err = math.inf
        worst = max(worst, err) if not math.isnan(err) else err
    return CheckResult("spline_roundtrip", 8, _within(worst, tol), worst, tol,
                       f"{seeds} seeds x {grid} points, I={bins}")


def check_spline_continuity(seeds=50, bins=16, tol=1e-9):
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        kn, X, Y, A = _spline(rng, bins)
        knots = kn.xs[1:-1]
        with np.errstate(all="ignore"):
            _, left = _eval(X, Y, A, np.nextafter(knots, -np.inf), kn.outer_slope)
            _, right = _eval(X, Y, A, knots, kn.outer_slope)
        err = float(np.max(np.abs(left - right)))
        worst = max(worst, err) if not math.isnan(err) else err
    return CheckResult("spline_continuity", 8, _within(worst, tol), worst, tol,
                       f"{seeds} seeds, {bins - 1} interior knots each")


def check_spline_derivative_bound(seeds=50, grid=10000, bins=16, tol=1e-12):
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        kn, X, Y, A = _spline(rng, bins)
        x = np.linspace(kn.xs[0], kn.xs[-1], grid)
        with np.errstate(all="ignore"):
            _, dydx = _eval(X, Y, A, x, kn.outer_slope)
        excess = float(np.max(dydx)) - 1.0
        worst = max(worst, excess) if not math.isnan(excess) else excess
    return CheckResult("spline_derivative_bound", 8, _within(worst, tol), worst, tol,
                       "max dy/dx - 1 over the knot box")


def check_spline_multimodality(seeds=50, grid=10000, bins=16):
    worst = 0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        kn, X, Y, A = _spline(rng, bins)

        def deriv(x, X=X, Y=Y, A=A, s=kn.outer_slope):
            with np.errstate(all="ignore"):
                return _eval(X, Y, A, np.asarray(x, dtype=np.float64), s)[1]

        worst = max(worst, local_maxima_count(deriv, kn.xs[0], kn.xs[-1], grid))
    return CheckResult("spline_multimodality", 8, worst <= bins, float(worst), float(bins),
                       "max local maxima of dy/dx")


def check_spline_linear(tol=1e-12):
    worst = 0.0
    x = np.linspace(-20.0, 20.0, 4001)
    for beta in (0.4, 0.5, 0.8, 0.95, 1.0):
        act = RQActivation((1, 1, 1), bins=16, beta=beta)
        y, ld = act.forward(x[:, None])
        slope = np.exp(ld)
        worst = max(worst, float(np.max(np.abs(y[:, 0] - beta * x) / np.maximum(1.0, np.abs(x)))),
                    float(np.max(np.abs(slope - beta))))
    return CheckResult("spline_linear", 8, _within(worst, tol), worst, tol,
                       "alpha = delta = beta")


# -- criterion 9 ---------------------------------------------------------


def check_mexican_hat_range(n=1000000, chunk=10000):
    rng = np.random.default_rng(9)
    lo, hi = math.inf, -math.inf
    hidden, heads = 8, 4
    for _ in range(n // chunk):
        phi = rng.standard_normal((chunk, hidden)) * rng.uniform(0.1, 3.0)
        w = rng.standard_normal((heads, hidden))
        b = rng.standard_normal(heads)
        s = np.exp(np.mean(hat(phi @ w.T + b), axis=1))
        lo, hi = min(lo, float(s.min())), max(hi, float(s.max()))
    ok = 0.5 <= lo and hi <= 3.0 and S_MIN - 1e-6 <= lo and hi <= S_MAX + 1e-6
    return CheckResult("mexican_hat_range", 9, ok, hi, 3.0,
                       f"{n} inputs, observed [{lo:.6f}, {hi:.6f}]")


def check_mexican_hat_extrema(tol=1e-4):
    u = np.linspace(-4.0, 4.0, 1000001)
    s = np.exp(hat(u))
    err = max(abs(float(s.max()) - S_MAX), abs(float(s.min()) - S_MIN))
    return CheckResult("mexican_hat_extrema", 9, _within(err, tol), err, tol,
                       f"max {s.max():.6f}, min {s.min():.6f}")


CHECKS = (
    check_gradients,
    check_logdets,
    check_invertibility_init,
    check_invertibility_trained,
    check_block_init,
    check_qlf_optimum,
    check_qlf_bound,
    check_stationary,
    check_hadamard,
    check_spline_roundtrip,
    check_spline_continuity,
    check_spline_derivative_bound,
    check_spline_multimodality,
    check_spline_linear,
    check_mexican_hat_range,
    check_mexican_hat_extrema,
)


def run_checks(checks=CHECKS, report=None):
    """Run every check; ``report`` (e.g. ``print``) receives one line per check."""
    results = []
    for fn in checks:
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crash is a failure of that property
            name = fn.__name__.removeprefix("check_")
            res = CheckResult(name, 0, False, math.nan, math.nan, f"raised {exc!r}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if report is not None:
            report(res.line() + f" ({res.seconds:.1f}s)")
    return results


def first_failure(results):
    return next((r for r in results if not r.passed), None)
