"""Seeded toy datasets, dequantization and small synthetic images.

Every 2-D generator returns points with (approximately) zero mean and a
spread of order one, so that the default initialization is a reasonable
starting point.
"""

import math

import numpy as np

from .errors import UnknownDataset, ValueOutOfRange

#: ring radii and the half-width of the uniform radial band around each
RING_RADII = (0.75, 1.5, 2.25)
RING_HALF_WIDTH = 0.1


def _gaussian(rng, n):
    return rng.standard_normal((n, 2))


def _two_moons(rng, n):
    n1 = n // 2
    t = rng.uniform(0.0, math.pi, n)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    pts = np.where((np.arange(n) < n1)[:, None], upper, lower)
    pts = pts + 0.08 * rng.standard_normal((n, 2))
    return (pts - np.array([0.5, 0.25])) / 0.8


def _rings(rng, n):
    # points per ring proportional to its circumference
    weights = np.asarray(RING_RADII) / sum(RING_RADII)
    which = rng.choice(len(RING_RADII), size=n, p=weights)
    radius = np.asarray(RING_RADII)[which] + rng.uniform(-RING_HALF_WIDTH, RING_HALF_WIDTH, n)
    angle = rng.uniform(0.0, 2.0 * math.pi, n)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


def _checkerboard(rng, n):
    x1 = rng.uniform(-2.0, 2.0, n)
    x2 = rng.uniform(0.0, 1.0, n) - 2.0 * rng.integers(0, 2, n)
    x2 = x2 + np.floor(x1) % 2
    return np.stack([x1, x2], axis=1) / 1.15


def _spiral(rng, n):
    t = np.sqrt(rng.uniform(0.0, 1.0, n)) * 3.0 * math.pi
    sign = np.where(rng.integers(0, 2, n) == 0, 1.0, -1.0)
    pts = sign[:, None] * np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / (math.pi * 1.6)
    return pts + 0.05 * rng.standard_normal((n, 2))


TOY_DATASETS = {
    "gaussian": _gaussian,
    "two_moons": _two_moons,
    "rings": _rings,
    "checkerboard": _checkerboard,
    "spiral": _spiral,
}


def toy_dataset(name, n, seed=0):
    """``n`` points from the named 2-D toy distribution."""
    if name not in TOY_DATASETS:
        raise UnknownDataset(f"unknown dataset {name!r}; choose from {sorted(TOY_DATASETS)}")
    if n < 1:
        raise ValueError("n must be >= 1")
    return TOY_DATASETS[name](np.random.default_rng(seed), int(n))


def dequantize(raw, bits, seed=0, noise=None):
    """``(v + u) / 2**bits`` with ``u ~ U[0, 1)``.

    ``noise`` overrides the seeded uniform draw (same shape as ``raw``).
    """
    if not 1 <= bits <= 8:
        raise ValueOutOfRange(f"bits={bits} outside [1, 8]")
    v = np.asarray(raw)
    levels = 2 ** int(bits)
    if v.size and (np.any(v < 0) or np.any(v >= levels) or np.any(v != np.floor(v))):
        raise ValueOutOfRange(f"values must be integers in [0, {levels})")
    if noise is None:
        noise = np.random.default_rng(seed).uniform(0.0, 1.0, v.shape)
    return (v.astype(np.float64) + noise) / levels


def synthetic_images(n, size=8, bits=5, seed=0):
    """Integer images of shape ``(n, 1, size, size)`` in ``[0, 2**bits)``.

    Each image is a smooth background gradient plus one or two Gaussian
    blobs, which gives correlated pixels with coarse-to-fine structure.
    """
    rng = np.random.default_rng(seed)
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    out = np.empty((n, 1, size, size))
    for i in range(n):
        gx, gy = rng.uniform(-0.3, 0.3, 2)
        img = 0.35 + gx * (xx - 0.5) + gy * (yy - 0.5)
        for _ in range(rng.integers(1, 3)):
            cy, cx = rng.uniform(0.15, 0.85, 2)
            width = rng.uniform(0.08, 0.25)
            amp = rng.uniform(-0.3, 0.5)
            img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
        out[i, 0] = img
    levels = 2 ** bits
    return np.clip(np.floor(out * levels), 0, levels - 1).astype(np.int64)
