"""Run configuration: a TOML document with fixed sections and keys.

Every section and key is optional except ``[model] layers`` and
``[data] dataset``.  Unknown sections or keys, wrong value types and
out-of-range values are reported as :class:`ParseError` with the line of the
offending key.  See the README for the full key table.

Layer tokens in ``[model] layers``::

    dense:N                      fully connected, N outputs
    conv:OUT:KH:KW[:STRIDE[:PAD]]  convolution (input channels inferred)
    relu
    maxpool:WINDOW[:STRIDE]      stride defaults to the window
    norm                         variant and eps_tilde from [norm]
    softmax_ce                   loss head, must be last
"""

import os
import re
from dataclasses import dataclass, field

import tomli

from .errors import ParseError, SpecError
from .network import _out_shape, ConvAsMatrix, Dense, MaxPool, Norm, ReLU, SoftmaxCE
from .norm import VARIANTS
from .optim import MODES, OrthoConfig
from .train import TrainConfig

OUTPUT_ENV = "ORTHONET_OUTPUT_DIR"

# section -> key -> (type(s), default); None default means "required or unset"
SCHEMA = {
    "model": {
        "layers": (list, None),
        "input_shape": (list, None),
        "seed": (int, 0),
    },
    "data": {
        "dataset": (str, None),
        "path": (str, ""),
        "subset": (int, 0),
        "test_subset": (int, 0),
        "classes": (int, 3),
        "dim": (int, 8),
        "per_class": (int, 100),
        "separation": (float, 4.0),
        "seed": (int, 0),
    },
    "train": {
        "epochs": (int, 10),
        "batch_size": (int, 128),
        "lr_start": (float, 0.1),
        "lr_end": (float, 0.001),
        "schedule": (str, "geometric"),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-4),
        "seed": (int, 0),
        "eval_every": (int, 1),
        "shift_augment": (bool, False),
        "spectral_metrics": (bool, False),
    },
    "ortho": {
        "mode": (str, "none"),
        "epsilon": (float, 0.05),
        "period_steps": (int, 0),
        "period_epochs": (int, 1),
        "lam": (float, 0.1),
        "kappa": (float, 0.1),
        "pi_iters": (int, 20),
    },
    "norm": {
        "variant": (str, "bn"),
        "eps_tilde": (float, 0.2),
    },
    "probe": {
        "spectra": (bool, True),
        "radius": (bool, True),
        "isometry": (bool, True),
        "anchors": (int, 20),
        "pairs": (int, 200),
        "noise": (float, 0.05),
        "seed": (int, 0),
    },
    "output": {
        "dir": (str, "runs/default"),
    },
}
DATASETS = ("mnist", "cifar10", "blobs")


@dataclass
class RunConfig:
    model: dict
    data: dict
    train: dict
    ortho: dict
    norm: dict
    probe: dict
    output: dict
    layers: list = field(default_factory=list)

    def train_config(self, steps_per_epoch=None):
        """:class:`TrainConfig` with the SVB period resolved to steps when possible."""
        o = self.ortho
        period = None
        if o["period_steps"]:
            period = o["period_steps"]
        elif steps_per_epoch:
            period = o["period_epochs"] * steps_per_epoch
        ortho = OrthoConfig(mode=o["mode"], epsilon=o["epsilon"], svb_period=period,
                            lam=o["lam"], kappa=o["kappa"], pi_iters=o["pi_iters"])
        return TrainConfig(ortho=ortho, **self.train)

    @property
    def output_dir(self):
        return os.environ.get(OUTPUT_ENV) or self.output["dir"]

    def as_dict(self):
        return {name: dict(getattr(self, name)) for name in SCHEMA}


def _key_lines(text):
    """Map ``(section, key)`` and ``(section,)`` to the 1-based line defining it."""
    lines = {}
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"\[\s*([A-Za-z0-9_.-]+)\s*\]", stripped)
        if m:
            section = m.group(1)
            lines.setdefault((section,), n)
            continue
        m = re.match(r"([A-Za-z0-9_-]+)\s*=", stripped)
        if m:
            lines.setdefault((section, m.group(1)), n)
        m = re.match(r"([A-Za-z0-9_-]+)\.([A-Za-z0-9_-]+)\s*=", stripped)
        if m and section is None:
            lines.setdefault((m.group(1), m.group(2)), n)
    return lines


def _type_ok(value, kind):
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, kind)


def parse_layer(token, norm):
    parts = token.strip().lower().split(":")
    kind, args = parts[0], parts[1:]
    try:
        nums = [int(a) for a in args]
    except ValueError:
        raise SpecError(f"layer token {token!r}: arguments must be integers") from None
    if kind == "dense" and len(nums) == 1:
        return Dense(nums[0])
    if kind == "conv" and 3 <= len(nums) <= 5:
        out, kh, kw, *rest = nums
        stride = rest[0] if rest else 1
        pad = rest[1] if len(rest) > 1 else 0
        return ConvAsMatrix(out, -1, kh, kw, stride, pad)
    if kind == "relu" and not nums:
        return ReLU()
    if kind == "maxpool" and 1 <= len(nums) <= 2:
        return MaxPool(nums[0], nums[1] if len(nums) > 1 else nums[0])
    if kind == "norm" and not nums:
        return Norm(norm["variant"], norm["eps_tilde"])
    if kind == "softmax_ce" and not nums:
        return SoftmaxCE()
    raise SpecError(f"unrecognized layer token {token!r}")


def resolve_layers(layers, input_shape):
    """Fill in conv input channels from the shape flowing into each layer."""
    shape = tuple(input_shape)
    out = []
    for pos, layer in enumerate(layers):
        if isinstance(layer, ConvAsMatrix) and layer.in_channels == -1:
            if len(shape) != 3:
                raise SpecError(f"layer {pos}: conv needs (C, H, W) input, got {shape}")
            layer = ConvAsMatrix(layer.out_channels, shape[0], layer.kernel_h, layer.kernel_w,
                                 layer.stride, layer.pad)
        out.append(layer)
        shape = _out_shape(layer, shape, pos)
    return out


def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(doc, overrides):
    """Apply ``section.key=value`` strings to a raw document, last one wins."""
    for item in overrides:
        if "=" not in item:
            raise ParseError(f"override {item!r} must look like section.key=value")
        path, value = item.split("=", 1)
        path = path.strip().lstrip("-")
        if path.count(".") != 1:
            raise ParseError(f"override {item!r}: key must be section.key")
        section, key = path.split(".")
        doc.setdefault(section, {})[key] = _parse_value(value.strip())
    return doc


def parse_config(text, overrides=()):
    """Parse and validate a run configuration document."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(str(exc), line=getattr(exc, "lineno", None)) from None
    overridden = set()
    for item in overrides:
        overridden.add(item.split("=", 1)[0].strip().lstrip("-"))
    apply_overrides(doc, overrides)
    lines = _key_lines(text)

    def where(section, key=None):
        if key is not None and f"{section}.{key}" in overridden:
            return None
        return lines.get((section, key) if key else (section,))

    out = {}
    for section, value in doc.items():
        if section not in SCHEMA:
            raise ParseError(f"unknown section [{section}]", line=where(section))
        if not isinstance(value, dict):
            raise ParseError(f"{section} must be a section", line=lines.get((None, section)))
    for section, schema in SCHEMA.items():
        given = doc.get(section, {})
        values = {}
        for key, value in given.items():
            if key not in schema:
                raise ParseError(f"unknown key {section}.{key}", line=where(section, key))
            kind, _ = schema[key]
            if not _type_ok(value, kind):
                raise ParseError(
                    f"{section}.{key} must be of type {kind.__name__}, got {type(value).__name__}",
                    line=where(section, key),
                )
            values[key] = float(value) if kind is float else value
        for key, (_, default) in schema.items():
            values.setdefault(key, default)
        out[section] = values

    def check(cond, section, key, message):
        if not cond:
            raise ParseError(f"{section}.{key}: {message}", line=where(section, key))

    m, d, t, o, n, p = (out[s] for s in ("model", "data", "train", "ortho", "norm", "probe"))
    check(m["layers"] is not None, "model", "layers", "required")
    check(all(isinstance(x, str) for x in m["layers"]), "model", "layers", "entries must be strings")
    if m["input_shape"] is not None:
        check(all(_type_ok(x, int) and x > 0 for x in m["input_shape"]), "model", "input_shape",
              "entries must be positive integers")
    check(d["dataset"] is not None, "data", "dataset", "required")
    check(d["dataset"] in DATASETS, "data", "dataset", f"must be one of {DATASETS}")
    check(d["dataset"] == "blobs" or d["path"], "data", "path", "required for file datasets")
    for key in ("subset", "test_subset"):
        check(d[key] >= 0, "data", key, "must be >= 0")
    check(d["classes"] >= 2, "data", "classes", "must be >= 2")
    check(d["dim"] >= 1, "data", "dim", "must be >= 1")
    check(d["per_class"] >= 1, "data", "per_class", "must be >= 1")
    check(d["separation"] > 0, "data", "separation", "must be > 0")
    check(t["epochs"] >= 0, "train", "epochs", "must be >= 0")
    check(t["batch_size"] >= 1, "train", "batch_size", "must be >= 1")
    check(t["lr_end"] > 0, "train", "lr_end", "must be > 0")
    check(t["lr_start"] >= t["lr_end"], "train", "lr_start", "must be >= lr_end")
    check(t["schedule"] in ("geometric", "constant"), "train", "schedule",
          "must be 'geometric' or 'constant'")
    check(0 <= t["momentum"] < 1, "train", "momentum", "must be in [0, 1)")
    check(t["weight_decay"] >= 0, "train", "weight_decay", "must be >= 0")
    check(t["eval_every"] >= 1, "train", "eval_every", "must be >= 1")
    check(o["mode"] in MODES, "ortho", "mode", f"must be one of {MODES}")
    check(o["epsilon"] >= 0, "ortho", "epsilon", "must be >= 0")
    check(o["period_steps"] >= 0, "ortho", "period_steps", "must be >= 0 (0 means per epoch)")
    check(o["period_epochs"] >= 1, "ortho", "period_epochs", "must be >= 1")
    check(o["lam"] >= 0, "ortho", "lam", "must be >= 0")
    check(o["kappa"] >= 0, "ortho", "kappa", "must be >= 0")
    check(o["pi_iters"] >= 1, "ortho", "pi_iters", "must be >= 1")
    check(n["variant"] in VARIANTS, "norm", "variant", f"must be one of {VARIANTS}")
    check(n["eps_tilde"] >= 0, "norm", "eps_tilde", "must be >= 0")
    for key in ("anchors", "pairs"):
        check(p[key] >= 1, "probe", key, "must be >= 1")
    check(p["noise"] > 0, "probe", "noise", "must be > 0")

    try:
        layers = [parse_layer(tok, n) for tok in m["layers"]]
    except SpecError as exc:
        raise ParseError(str(exc), line=where("model", "layers")) from None
    t = dict(t)
    if any(isinstance(x, Norm) for x in layers):
        check(t["batch_size"] >= 2, "train", "batch_size", "must be >= 2 with norm layers")
    return RunConfig(layers=layers, **out)


def load_config(path, overrides=()):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


def serialize_config(cfg):
    """TOML text for ``cfg`` with every key written out (``None`` keys omitted)."""
    chunks = []
    for section in SCHEMA:
        values = getattr(cfg, section)
        body = [f"{k} = {_toml_value(v)}" for k, v in values.items() if v is not None]
        chunks.append(f"[{section}]\n" + "\n".join(body) + "\n")
    return "\n".join(chunks)
