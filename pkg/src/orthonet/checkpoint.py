"""Binary checkpoint container.

Layout::

    b"ONET"                      magic
    uint32 LE                    format version
    uint64 LE                    header length in bytes
    header                       UTF-8 JSON
    payload                      raw little-endian fp64 buffers

The header holds the network spec, every scalar of the norm states and the
optimizer, counters, the RNG state, free-form ``extra`` data, and an array
manifest of ``{name, shape, offset}`` entries into the payload.  Floats in
the header survive the round trip exactly because JSON keeps their shortest
repr.
"""

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import network as nw
from .errors import CheckpointError
from .norm import NormState
from .optim import MomentumState

MAGIC = b"ONET"
VERSION = 1
LAYER_TYPES = {cls.__name__: cls for cls in
               (nw.Dense, nw.ConvAsMatrix, nw.ReLU, nw.MaxPool, nw.Norm, nw.SoftmaxCE)}


@dataclass
class Checkpoint:
    net: nw.NetworkSpec
    params: nw.ParamSet
    momentum: MomentumState = field(default_factory=MomentumState)
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def spec_to_dict(net):
    return {
        "input_shape": list(net.input_shape),
        "layers": [{"type": type(layer).__name__, **asdict(layer)} for layer in net.layers],
    }


def spec_from_dict(doc):
    layers = []
    for entry in doc["layers"]:
        entry = dict(entry)
        kind = entry.pop("type")
        if kind not in LAYER_TYPES:
            raise CheckpointError(f"unknown layer type {kind!r} in checkpoint")
        layers.append(LAYER_TYPES[kind](**entry))
    return nw.make_spec(layers, doc["input_shape"])


def _le(a):
    return np.ascontiguousarray(a, dtype="<f8")


def save_checkpoint(path, ckpt):
    arrays = []
    for i, w in ckpt.params.weights.items():
        arrays.append((f"W{i}", w))
    for i, b in ckpt.params.biases.items():
        arrays.append((f"b{i}", b))
    norms = {}
    for i, st in ckpt.params.norms.items():
        scalars = {}
        for f in fields(st):
            value = getattr(st, f.name)
            if isinstance(value, np.ndarray):
                arrays.append((f"norm{i}.{f.name}", value))
            else:
                scalars[f.name] = value
        norms[str(i)] = scalars
    for name, v in ckpt.momentum.velocity.items():
        arrays.append((f"velocity.{name}", v))

    manifest, chunks, offset = [], [], 0
    for name, a in arrays:
        buf = _le(a).tobytes()
        manifest.append({"name": name, "shape": list(np.shape(a)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "net": spec_to_dict(ckpt.net),
        "norms": norms,
        "momentum": {"momentum": ckpt.momentum.momentum,
                     "weight_decay": ckpt.momentum.weight_decay},
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "arrays": manifest,
        "payload_bytes": offset,
    }
    head = json.dumps(header, allow_nan=False).encode("utf-8")
    data = MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(chunks)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, head_len = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    try:
        header = json.loads(raw[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = raw[16 + head_len:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}"
        )
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = a.astype(np.float64).reshape(entry["shape"])

    net = spec_from_dict(header["net"])
    params = nw.ParamSet()
    for i in net.weighted_indices():
        params.weights[i] = arrays[f"W{i}"]
        if f"b{i}" in arrays:
            params.biases[i] = arrays[f"b{i}"]
    for key, scalars in header["norms"].items():
        i = int(key)
        values = dict(scalars)
        for f in fields(NormState):
            name = f"norm{i}.{f.name}"
            if name in arrays:
                values[f.name] = arrays[name]
        params.norms[i] = NormState(**values)
    velocity = {k[len("velocity."):]: v for k, v in arrays.items() if k.startswith("velocity.")}
    momentum = MomentumState(header["momentum"]["momentum"],
                             header["momentum"]["weight_decay"], velocity)
    return Checkpoint(net, params, momentum, header["step"], header["epoch"],
                      header["rng_state"], header["extra"])
