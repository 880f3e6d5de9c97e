"""Command-line interface.

Exit codes: 0 success, 1 configuration or input error, 2 training diverged,
3 invariant check failed.
"""

import argparse
import contextlib
import os
import sys

import numpy as np

from . import checks
from .data import dequantize
from .errors import ConfigError, FlowError
from .flow import PERTURB_MODES, perturb, sample
from .io import (RunConfig, gray_tiles, heatmap, load_checkpoint, load_csv, read_image_raw,
                 save_checkpoint, save_csv, write_ppm)
from .qlf import prop1_audit, ppca_lmax, qlf_lmax_per_point_report
from .training import TrainTrace, mean_nll, train
from .flow import nll_bits_per_dim

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_INPUT)


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _load_data(path, seed=0):
    """``(data, image_shape or None, bit_depth)`` from a CSV or raw image file."""
    if path.lower().endswith(".csv"):
        return load_csv(path), None, 0
    images, bits = read_image_raw(path)
    data = dequantize(images, bits, seed=seed).reshape(len(images), -1)
    return data, images.shape[1:], bits


def _image_shape(model):
    shape = model.config.get("shape")
    if shape is not None and (shape[1] > 1 or shape[2] > 1):
        return tuple(shape)
    return None


def _write_points(path, model, x):
    shape = _image_shape(model)
    if path.lower().endswith(".ppm") and shape is not None and shape[0] == 1:
        write_ppm(path, gray_tiles(x.reshape(len(x), shape[1], shape[2])))
    else:
        save_csv(path, x)


# -- commands ------------------------------------------------------------


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    data, shape, bits = cfg.load_data()
    if cfg.values["bit_depth"] == 0:
        cfg.values["bit_depth"] = bits
    model = cfg.build_model(shape)
    out = cfg.path("out_dir")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(cfg.resolved())
    model, trace = train(model, cfg.train_config(), data)
    save_checkpoint(os.path.join(out, "model.ckpt"), model)
    trace.write_csv(os.path.join(out, "trace.csv"))
    with open(os.path.join(out, "events.log"), "w", encoding="utf-8") as fh:
        for step, kind, msg in trace.events:
            fh.write(f"{step},{kind},{msg}\n")
        for step, nll in trace.heldout:
            fh.write(f"{step},heldout_nll,{nll!r}\n")
    if trace.heldout:
        print(f"heldout_nll_start={trace.heldout[0][1]!r}")
        print(f"heldout_nll_end={trace.heldout[-1][1]!r}")
    print(f"steps={len(trace)}")
    print(f"out_dir={out}")
    if trace.diverged:
        _err(f"training diverged at step {len(trace) - 1}")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    data, _, bits = _load_data(args.data, args.seed)
    if args.bit_depth is not None:
        bits = args.bit_depth
    if data.shape[1] != model.dim:
        _err(f"data has dimension {data.shape[1]}, model expects {model.dim}")
        return EXIT_INPUT
    nll = mean_nll(model, data)
    if not np.isfinite(nll):
        _err("non-finite likelihood on this dataset")
        return EXIT_INPUT
    print(f"nll_nats={nll!r}")
    print(f"nll_bpd={nll_bits_per_dim(-nll, model.dim, bits)!r}")
    return EXIT_OK


def cmd_sample(args):
    model = load_checkpoint(args.checkpoint)
    x = sample(model, args.n, args.temperature, args.seed)
    _write_points(args.out, model, x)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def density_grid(model, grid, window):
    """Cell-centre lattice over ``[-window, window]^2``; returns ``(xs, density)``
    with ``density[i, j]`` at ``(xs[j], xs[i])``."""
    step = 2.0 * window / grid
    xs = -window + (np.arange(grid) + 0.5) * step
    gx, gy = np.meshgrid(xs, xs)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    with np.errstate(all="ignore"):
        dens = np.exp(model.log_prob(pts)).reshape(grid, grid)
    return xs, dens


def cmd_density2d(args):
    model = load_checkpoint(args.checkpoint)
    if model.dim != 2:
        _err(f"density2d needs a 2-D model, got d={model.dim}")
        return EXIT_INPUT
    if args.grid < 1 or args.window <= 0:
        _err("grid must be >= 1 and window > 0")
        return EXIT_INPUT
    xs, dens = density_grid(model, args.grid, args.window)
    # image rows run top to bottom, i.e. decreasing y
    write_ppm(args.out, heatmap(dens[::-1]))
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    gx, gy = np.meshgrid(xs, xs)
    save_csv(csv_path, np.stack([gx.ravel(), gy.ravel(), dens.ravel()], axis=1),
             header=("x", "y", "density"))
    mass = float(np.sum(dens)) * (2.0 * args.window / args.grid) ** 2
    print(f"riemann_sum={mass!r}")
    print(f"wrote {args.out} and {csv_path}")
    return EXIT_OK


def cmd_qlf_bound(args):
    data, _, bits = _load_data(args.data, args.seed)
    if args.bit_depth is not None:
        bits = args.bit_depth
    if args.mode == "covariance":
        report = ppca_lmax(data, args.eps, bits)
    else:
        report = qlf_lmax_per_point_report(data, args.eps, bits)
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_diagnose(args):
    trace = TrainTrace.read_csv(args.trace)
    if args.threshold is not None:
        threshold = args.threshold
    elif args.lipschitz is not None and args.dim is not None:
        threshold = args.dim * np.log(args.lipschitz)
    else:
        _err("give --threshold, or --lipschitz together with --dim")
        return EXIT_INPUT
    report = prop1_audit(trace, args.layer, threshold)
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_perturb(args):
    model = load_checkpoint(args.checkpoint)
    data, _, _ = _load_data(args.input, args.seed)
    if data.shape[1] != model.dim:
        _err(f"input has dimension {data.shape[1]}, model expects {model.dim}")
        return EXIT_INPUT
    n_levels = len(model.levels)
    if not 0 <= args.k <= n_levels:
        _err(f"k={args.k} outside [0, {n_levels}]")
        return EXIT_INPUT
    out = perturb(model, data, args.k, args.mode, args.temperature, args.seed)
    err = float(np.mean(np.sqrt(np.mean((out - data) ** 2, axis=1))))
    print(f"levels={n_levels}")
    print(f"reconstruction_rmse={err!r}")
    if args.out:
        _write_points(args.out, model, out)
    return EXIT_OK


def cmd_check(args):
    results = checks.run_checks(checks.CHECKS, report=print)
    failed = checks.first_failure(results)
    total = sum(r.seconds for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} properties passed in {total:.1f}s")
    if failed is not None:
        _err(f"invariant failed: {failed.name}")
        return EXIT_CHECK
    return EXIT_OK


# -- entry point ---------------------------------------------------------


def build_parser():
    p = _Parser(prog="flowdet", description="Normalizing-flow density estimation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a model from a key=value config")
    s.add_argument("config")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="mean NLL of a dataset under a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("data")
    s.add_argument("--seed", type=int, default=0, help="dequantization seed for images")
    s.add_argument("--bit-depth", type=int, default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("density2d", help="density heatmap of a 2-D model")
    s.add_argument("checkpoint")
    s.add_argument("--grid", type=int, default=400)
    s.add_argument("--window", type=float, default=4.0, help="half-width of the square window")
    s.add_argument("--out", required=True, help="PPM path; a CSV is written next to it")
    s.set_defaults(fn=cmd_density2d)

    s = sub.add_parser("qlf-bound", help="closed-form linear-flow likelihood bound")
    s.add_argument("data")
    s.add_argument("--mode", choices=("covariance", "per_point"), default="covariance")
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--bit-depth", type=int, default=None)
    s.set_defaults(fn=cmd_qlf_bound)

    s = sub.add_parser("diagnose", help="log-det versus gradient-norm audit of a trace")
    s.add_argument("trace")
    s.add_argument("--layer", type=int, default=0)
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--lipschitz", type=float, default=None)
    s.add_argument("--dim", type=int, default=None)
    s.set_defaults(fn=cmd_diagnose)

    s = sub.add_parser("perturb", help="keep or resample per-level latents")
    s.add_argument("checkpoint")
    s.add_argument("input")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--mode", choices=PERTURB_MODES, default="keep_first")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_perturb)

    s = sub.add_parser("check", help="run the invariant suite")
    s.set_defaults(fn=cmd_check)
    return p


def _thread_limit():
    n = os.environ.get("FLOWDET_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.fn(args)
    except (ConfigError, FlowError, OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
