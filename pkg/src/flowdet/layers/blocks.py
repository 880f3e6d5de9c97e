"""Building blocks, blockwise volume-preserving initialization and multi-scale
assembly.

A block is ``[InvConv, DualCoupling, (contractive ablation), RQActivation]``.
Blockwise initialization makes the convolution the identity, the coupling a
pure scaling by ``1/beta`` and the spline the linear map with slope ``beta``,
so the block is the identity while its parts expand and contract.
"""

import numpy as np

from ..errors import BadBeta, BadSplit
from ..flow import FlowModel, Level
from .contractive import CONTRACTIVE
from .coupling import DualCoupling
from .invconv import InvConv
from .spline import RQActivation

ABLATIONS = ("none", "insert_tanh", "insert_normal_cdf", "l2_transport", "unconstrained_scale")


def make_block(shape, k=1, bins=16, heads=4, hidden=32, beta=1.0, ablation="none", rng=None,
               box=3.0):
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    conv = InvConv(shape, k=k)
    out = conv.out_shape
    head = "exp" if ablation == "unconstrained_scale" else "mexican_hat"
    coupling = DualCoupling(out, hidden=hidden, heads=heads, scale_head=head, rng=rng)
    block = [conv, coupling]
    if ablation == "insert_tanh":
        block.append(CONTRACTIVE["tanh"](out))
    elif ablation == "insert_normal_cdf":
        block.append(CONTRACTIVE["normal_cdf"](out))
    block.append(RQActivation(out, bins=bins, beta=beta, box=box))
    block_init(block, beta)
    return block


def block_init(block, beta):
    """Blockwise volume-preserving initialization, in place.

    Returns the spline slope actually used (``beta`` up to the logit clip).
    """
    if not 0.0 < beta <= 1.0:
        raise BadBeta(f"beta={beta} outside (0, 1]")
    slope = None
    for layer in block:
        if isinstance(layer, RQActivation):
            slope = layer.set_linear(beta)
    if slope is None:
        slope = float(beta)
    for layer in block:
        if isinstance(layer, InvConv):
            layer.params["weight"] = np.eye(layer.params["weight"].shape[0])
        elif isinstance(layer, DualCoupling):
            layer.set_constant_scale(1.0 / slope)
    return slope


def multiscale_compose(levels, base="normal", config=None):
    """Build a :class:`FlowModel` from ``[(blocks, r), ...]``.

    ``r`` dims are factored out after each level except the last, whose
    ``r`` is ignored.
    """
    built = []
    d = None
    for i, (blocks, r) in enumerate(levels):
        layers = [layer for block in blocks for layer in block]
        if layers:
            d_level = layers[0].dim
        elif d is not None:
            d_level = d
        else:
            raise ValueError("first level needs at least one layer")
        last = i == len(levels) - 1
        if last:
            r = 0
        elif not 1 <= r < d_level:
            raise BadSplit(f"level {i}: split r={r} outside [1, {d_level})")
        built.append(Level([list(b) for b in blocks], int(r)))
        d = d_level - r
    return FlowModel(built, base=base, config=config)


def build_model(shape, levels=1, blocks_per_level=2, split_fraction=0.5, k=1, bins=16, heads=4,
                hidden=32, beta=0.8, ablation="none", base="normal", seed=0, box=3.0,
                config=None):
    """Proposed flow on data of shape ``(c, h, w)``.

    The first block of every level squeezes by ``k``; after each level except
    the last, ``round(split_fraction * channels)`` channels are factored out.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in shape)
    echo = dict(arch="proposed", shape=shape, levels=levels, blocks_per_level=blocks_per_level,
                split_fraction=split_fraction, k=k, bins=bins, heads=heads, hidden=hidden,
                beta=beta, ablation=ablation, base=base, seed=seed, box=box)
    echo.update(config or {})
    if blocks_per_level == 0:
        if levels != 1:
            raise BadSplit("an identity model has a single level")
        return FlowModel([Level([], 0)], base=base, config=echo, dim=int(np.prod(shape)))
    plan = []
    for lv in range(levels):
        blocks = []
        for b in range(blocks_per_level):
            kk = k if b == 0 else 1
            block = make_block(shape, k=kk, bins=bins, heads=heads, hidden=hidden, beta=beta,
                               ablation=ablation, rng=rng, box=box)
            shape = block[0].out_shape
            blocks.append(block)
        r = 0
        if lv < levels - 1:
            c, h, w = shape
            rc = int(round(split_fraction * c))
            if not 1 <= rc < c:
                raise BadSplit(f"level {lv}: cannot split {rc} of {c} channels")
            r = rc * h * w
            shape = (c - rc, h, w)
        plan.append((blocks, r))
    return multiscale_compose(plan, base=base, config=echo)


def local_maxima_count(fn, lo, hi, grid):
    """Number of strict interior local maxima of ``fn`` sampled on a uniform grid."""
    if grid < 3:
        raise ValueError("grid must be >= 3")
    xs = np.linspace(lo, hi, int(grid))
    try:
        v = np.asarray(fn(xs), dtype=np.float64)
        if v.shape != xs.shape:
            raise ValueError
    except (TypeError, ValueError):
        v = np.array([float(fn(x)) for x in xs])
    mid = v[1:-1]
    return int(np.sum((mid > v[:-2]) & (mid > v[2:])))
