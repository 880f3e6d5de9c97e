"""File formats: checkpoints, run configs, CSV/raw-image datasets and PPM images.

Checkpoint layout::

    b"FLOWDET1" | u32 LE header length | UTF-8 key=value header | float64 LE params

Parameters follow layer order and, within a layer, its ``param_names`` order.
"""

import os
import re
import struct
from dataclasses import dataclass

import numpy as np

from .data import TOY_DATASETS, dequantize, toy_dataset
from .errors import ConfigError
from .flow import FlowModel
from .layers import ABLATIONS, Linear, build_model
from .training import TrainConfig

MAGIC = b"FLOWDET1"


# -- values --------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_shape(s):
    parts = tuple(int(p) for p in s.split(","))
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"shape must be c,h,w with positive entries, got {s!r}")
    return parts


def parse_kv_lines(text, types, source="<config>"):
    """Parse ``key=value`` lines; ``types`` maps each allowed key to a parser.

    Blank lines and ``#`` comments are ignored.  Raises :class:`ConfigError`
    carrying the 1-based line number for unknown keys, duplicates, malformed
    lines or unparsable values.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: expected key=value, got {raw.strip()!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}: unknown key {key!r}", lineno)
        if key in out:
            raise ConfigError(f"{source}: duplicate key {key!r}", lineno)
        try:
            out[key] = types[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}", lineno) from None
    return out


# -- model configs -------------------------------------------------------

MODEL_TYPES = {
    "arch": str, "shape": _parse_shape, "levels": int, "blocks_per_level": int,
    "split_fraction": float, "k": int, "bins": int, "heads": int, "hidden": int,
    "beta": float, "ablation": str, "base": str, "seed": int, "box": float,
}


def model_from_config(cfg):
    """Rebuild an initialized model from its config echo."""
    cfg = dict(cfg)
    arch = cfg.pop("arch", "proposed")
    if arch == "linear":
        shape = tuple(cfg["shape"])
        layer = Linear(shape)
        model = FlowModel.from_layers([layer], base=cfg.get("base", "normal"))
        model.config = {"arch": "linear", "shape": shape, "base": model.base}
        return model
    if arch != "proposed":
        raise ConfigError(f"unknown arch {arch!r}")
    keys = [k for k in MODEL_TYPES if k not in ("arch",)]
    return build_model(**{k: cfg[k] for k in keys if k in cfg})


def linear_model(d, base="normal"):
    """A single unconstrained affine map ``W x + b`` on ``R^d`` (identity init)."""
    return model_from_config({"arch": "linear", "shape": (d, 1, 1), "base": base})


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(path, model):
    cfg = {k: v for k, v in model.config.items() if k in MODEL_TYPES}
    lines = [f"{k}={_fmt(v)}" for k, v in cfg.items()]
    lines.append(f"num_params={model.num_params()}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    params = model.get_flat().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ConfigError(f"{path}: not a FLOWDET1 checkpoint")
    if len(blob) < 12:
        raise ConfigError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", blob[8:12])
    header = blob[12:12 + n].decode("utf-8")
    types = dict(MODEL_TYPES, num_params=int)
    cfg = parse_kv_lines(header, types, source=str(path))
    expected = cfg.pop("num_params", None)
    model = model_from_config(cfg)
    params = np.frombuffer(blob[12 + n:], dtype="<f8").astype(np.float64)
    if params.size != model.num_params() or (expected is not None and expected != params.size):
        raise ConfigError(f"{path}: expected {model.num_params()} parameters, found {params.size}")
    model.set_flat(params)
    return model


# -- run configs ---------------------------------------------------------

RUN_DEFAULTS = {
    "dataset": "rings",
    "data_path": "",
    "n_samples": 20000,
    "data_seed": 0,
    "arch": "proposed",
    "levels": 1,
    "blocks_per_level": 4,
    "split_fraction": 0.5,
    "k": 1,
    "bins": 16,
    "heads": 4,
    "hidden": 32,
    "beta": 0.8,
    "box": 3.0,
    "ablation": "none",
    "transport_lambda": 0.0,
    "base": "normal",
    "steps": 5000,
    "batch_size": 256,
    "lr_start": 0.01,
    "lr_end": 0.001,
    "decay_steps": 1000,
    "decay_rate": 0.98,
    "seed": 0,
    "bit_depth": 0,
    "eval_every": 0,
    "out_dir": "run",
}

DATASET_KINDS = tuple(sorted(TOY_DATASETS)) + ("csv", "image")


RUN_TYPES = {k: type(v) for k, v in RUN_DEFAULTS.items()}


@dataclass
class RunConfig:
    values: dict
    base_dir: str = "."

    @classmethod
    def parse(cls, text, base_dir=".", source="<config>"):
        values = dict(RUN_DEFAULTS)
        given = parse_kv_lines(text, RUN_TYPES, source)
        values.update(given)
        cfg = cls(values, base_dir)
        cfg.validate(given, text)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        return cls.parse(text, os.path.dirname(os.path.abspath(path)), str(path))

    def validate(self, given=(), text=""):
        v = self.values

        def fail(key, msg):
            line = None
            for i, raw in enumerate(text.splitlines(), 1):
                if raw.split("#", 1)[0].split("=", 1)[0].strip() == key:
                    line = i
            raise ConfigError(msg, line)

        if v["dataset"] not in DATASET_KINDS:
            fail("dataset", f"dataset must be one of {DATASET_KINDS}")
        if v["dataset"] in ("csv", "image") and not v["data_path"]:
            fail("dataset", f"dataset={v['dataset']} needs data_path")
        if v["ablation"] not in ABLATIONS:
            fail("ablation", f"ablation must be one of {ABLATIONS}")
        if v["arch"] not in ("proposed", "linear"):
            fail("arch", "arch must be proposed or linear")
        if v["base"] not in ("normal", "uniform"):
            fail("base", "base must be normal or uniform")
        if v["ablation"] == "l2_transport" and not v["transport_lambda"] > 0:
            fail("transport_lambda", "ablation=l2_transport needs transport_lambda > 0")
        if v["ablation"] != "l2_transport" and v["transport_lambda"] != 0:
            fail("transport_lambda", "transport_lambda is only used with ablation=l2_transport")
        if not 0.0 < v["beta"] <= 1.0:
            fail("beta", "beta must be in (0, 1]")
        for key in ("steps", "n_samples", "eval_every", "bit_depth"):
            if v[key] < 0:
                fail(key, f"{key} must be >= 0")
        for key in ("batch_size", "levels", "k", "bins", "heads", "hidden", "decay_steps"):
            if v[key] < 1:
                fail(key, f"{key} must be >= 1")

    def path(self, key):
        p = self.values[key]
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def resolved(self):
        """The config with every path absolute, as ``key=value`` text."""
        v = dict(self.values)
        v["out_dir"] = self.path("out_dir")
        if v["data_path"]:
            v["data_path"] = self.path("data_path")
        return "".join(f"{k}={_fmt(v[k])}\n" for k in RUN_DEFAULTS)

    def train_config(self):
        v = self.values
        return TrainConfig(steps=v["steps"], batch_size=v["batch_size"], lr_start=v["lr_start"],
                           lr_end=v["lr_end"], decay_steps=v["decay_steps"],
                           decay_rate=v["decay_rate"], beta=v["beta"], seed=v["seed"],
                           ablation=v["ablation"], transport_lambda=v["transport_lambda"],
                           bit_depth=v["bit_depth"], eval_every=v["eval_every"])

    def load_data(self):
        """``(data, shape, bit_depth)`` for the configured dataset."""
        v = self.values
        if v["dataset"] == "csv":
            data = load_csv(self.path("data_path"))
            return data, (data.shape[1], 1, 1), v["bit_depth"]
        if v["dataset"] == "image":
            images, bits = read_image_raw(self.path("data_path"))
            data = dequantize(images, bits, seed=v["data_seed"]).reshape(len(images), -1)
            return data, images.shape[1:], bits
        data = toy_dataset(v["dataset"], v["n_samples"], seed=v["data_seed"])
        return data, (2, 1, 1), v["bit_depth"]

    def build_model(self, shape):
        v = self.values
        if v["arch"] == "linear":
            return model_from_config({"arch": "linear", "shape": shape, "base": v["base"]})
        return build_model(shape, levels=v["levels"], blocks_per_level=v["blocks_per_level"],
                           split_fraction=v["split_fraction"], k=v["k"], bins=v["bins"],
                           heads=v["heads"], hidden=v["hidden"], beta=v["beta"],
                           ablation=v["ablation"], base=v["base"], seed=v["seed"], box=v["box"])


# -- datasets ------------------------------------------------------------


def load_csv(path):
    """One point per row, comma-separated decimal floats."""
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2, comments="#")
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data.size == 0:
        raise ConfigError(f"{path}: no data rows")
    if not np.all(np.isfinite(data)):
        raise ConfigError(f"{path}: non-finite values")
    return data


def save_csv(path, data, header=None):
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    with open(path, "w") as fh:
        if header:
            fh.write("# " + ",".join(header) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_image_raw(path, images, bits):
    """Integer images ``(n, c, h, w)`` to the raw format (pixels stored HWC)."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4H", h, w, c, bits))
        fh.write(np.transpose(images, (0, 2, 3, 1)).astype(np.uint8).tobytes())


def read_image_raw(path):
    """``(images (n, c, h, w) int64, bits)`` from the raw format."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ConfigError(f"{path}: missing 8-byte image header")
    h, w, c, bits = struct.unpack("<4H", blob[:8])
    per = h * w * c
    body = np.frombuffer(blob[8:], dtype=np.uint8)
    if per == 0 or body.size % per:
        raise ConfigError(f"{path}: {body.size} pixel bytes is not a multiple of {h}x{w}x{c}")
    if not 1 <= bits <= 8 or np.any(body >= 2 ** bits):
        raise ConfigError(f"{path}: pixel values exceed bit depth {bits}")
    images = body.reshape(-1, h, w, c).transpose(0, 3, 1, 2).astype(np.int64)
    return images, bits


# -- images --------------------------------------------------------------


def write_ppm(path, rgb):
    """Binary PPM (P6) from a ``(h, w, 3)`` uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise ValueError(f"{path}: not a P6 file")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(blob[m.end():m.end() + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


_HEAT = np.array([[0, 0, 0], [120, 20, 20], [230, 80, 10], [255, 210, 60], [255, 255, 255]],
                 dtype=np.float64)


def heatmap(values):
    """Map a 2-D array to RGB (black, red, orange, yellow, white), scaled to its max."""
    v = np.asarray(values, dtype=np.float64)
    top = np.max(v) if v.size and np.max(v) > 0 else 1.0
    t = np.clip(v / top, 0.0, 1.0) * (len(_HEAT) - 1)
    i = np.minimum(t.astype(int), len(_HEAT) - 2)
    f = (t - i)[..., None]
    rgb = _HEAT[i] * (1.0 - f) + _HEAT[i + 1] * f
    return np.round(rgb).astype(np.uint8)


def gray_tiles(images, cols=None):
    """Tile ``(n, h, w)`` values in ``[0, 1]`` into one grayscale RGB image."""
    imgs = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    n, h, w = imgs.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    canvas = np.zeros((rows * (h + 1) + 1, cols * (w + 1) + 1))
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[1 + r * (h + 1):1 + r * (h + 1) + h, 1 + c * (w + 1):1 + c * (w + 1) + w] = imgs[i]
    g = np.round(canvas * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)
