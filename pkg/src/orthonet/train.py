"""Training loop, learning-rate schedule and evaluation."""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BatchSizeError, NumericError, TrainingDiverged
from .network import Batch, Norm, backward, forward
from .optim import MomentumState, OrthoConfig, sgd_momentum_step

EVAL_CHUNK = 1000


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr_start: float = 0.1
    lr_end: float = 0.001
    schedule: str = "geometric"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ortho: OrthoConfig = field(default_factory=OrthoConfig)
    seed: int = 0
    eval_every: int = 1
    shift_augment: bool = False
    spectral_metrics: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.schedule not in ("geometric", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


def lr_schedule(config, epoch):
    """Learning rate for ``epoch``, decayed geometrically once per two epochs.

    ``lr(e) = lr_start * (lr_end / lr_start) ** (floor(e/2) / floor((E-1)/2))``
    so the first block runs at ``lr_start`` and the last at ``lr_end``.
    """
    if not 0 <= epoch < max(config.epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    blocks = (config.epochs - 1) // 2
    if config.schedule == "constant" or blocks == 0 or config.lr_start == config.lr_end:
        return float(config.lr_start)
    block = epoch // 2
    if block == blocks:
        return float(config.lr_end)
    return float(config.lr_start * (config.lr_end / config.lr_start) ** (block / blocks))


def predict(net, params, inputs):
    """Logits ``(examples, classes)`` in inference mode, computed in chunks."""
    out = []
    for start in range(0, len(inputs), EVAL_CHUNK):
        chunk = inputs[start:start + EVAL_CHUNK]
        _, logits, _ = forward(net, params, Batch(chunk, np.zeros(len(chunk), dtype=np.int64)),
                               mode="infer")
        out.append(logits.T)
    return np.concatenate(out) if out else np.zeros((0, net.num_classes))


def error_percent(logits, labels):
    """Percent of rows whose argmax (lowest index on ties) misses the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) != labels))


def evaluate(net, params, data):
    return error_percent(predict(net, params, data.inputs), data.labels)


def evaluate_loss(net, params, data):
    """``(mean cross-entropy, error %)`` in inference mode."""
    logits = predict(net, params, data.inputs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(len(data)), data.labels]))
    return loss, error_percent(logits, data.labels)


def _shift(images, rng):
    """Random shift by up to one pixel per axis, zero filled."""
    n = images.shape[0]
    dy = rng.integers(-1, 2, n)
    dx = rng.integers(-1, 2, n)
    out = np.zeros_like(images)
    for k in range(n):
        src = np.roll(images[k], (dy[k], dx[k]), axis=(-2, -1))
        if dy[k] == 1:
            src[..., 0, :] = 0
        elif dy[k] == -1:
            src[..., -1, :] = 0
        if dx[k] == 1:
            src[..., :, 0] = 0
        elif dx[k] == -1:
            src[..., :, -1] = 0
        out[k] = src
    return out


class Trainer:
    """Owns the mutable training state: params, velocities, RNG and counters.

    ``on_epoch(trainer)`` is called after every epoch (the CLI uses it to
    write checkpoints); ``on_record(record)`` after every metrics record.
    """

    def __init__(self, net, params, train_data, test_data, config,
                 on_epoch=None, on_record=None):
        self.net = net
        self.params = params
        self.train_data = train_data
        self.test_data = test_data
        self.config = config
        self.on_epoch = on_epoch
        self.on_record = on_record
        self.momentum = MomentumState(config.momentum, config.weight_decay)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.epoch = 0
        self.metrics = []
        has_norm = any(isinstance(layer, Norm) for layer in net.layers)
        if has_norm and min(config.batch_size, len(train_data)) < 2:
            raise BatchSizeError("normalization layers need batches of >= 2 examples")
        if config.ortho.mode == "svb" and config.ortho.svb_period is None:
            self.ortho = OrthoConfig(**{**asdict(config.ortho), "svb_period": self.steps_per_epoch})
        else:
            self.ortho = config.ortho

    @property
    def steps_per_epoch(self):
        return steps_per_epoch(len(self.train_data), self.config.batch_size)

    def _batches(self, order):
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if len(idx) >= 2:
                yield idx

    def record(self, batch_loss=None):
        cfg = self.config
        train_loss, train_err = evaluate_loss(self.net, self.params, self.train_data)
        rec = {
            "step": self.step,
            "epoch": self.epoch,
            "lr": lr_schedule(cfg, min(self.epoch, cfg.epochs - 1)) if cfg.epochs else cfg.lr_start,
            "batch_loss": batch_loss,
            "train_loss": train_loss,
            "train_error": train_err,
            "test_error": evaluate(self.net, self.params, self.test_data) if self.test_data else None,
            "wall_time": time.perf_counter() - self._t0,
        }
        if cfg.spectral_metrics:
            from .probe import layer_spectra

            rep = layer_spectra(self.net, self.params)
            rec["prod_sigma_max"] = rep.prod_sigma_max
            rec["prod_sigma_min"] = rep.prod_sigma_min
        self.metrics.append(rec)
        if self.on_record:
            self.on_record(rec)
        return rec

    def train_epoch(self):
        cfg = self.config
        lr = lr_schedule(cfg, self.epoch)
        order = self.rng.permutation(len(self.train_data))
        losses = []
        for idx in self._batches(order):
            x = self.train_data.inputs[idx]
            if cfg.shift_augment and len(self.train_data.input_shape) == 3:
                images = x.reshape(len(idx), *self.train_data.input_shape)
                x = _shift(images, self.rng).reshape(len(idx), -1)
            batch = Batch(x, self.train_data.labels[idx])
            try:
                loss, _, trace = forward(self.net, self.params, batch, mode="train")
            except NumericError as exc:
                raise TrainingDiverged(f"step {self.step}: {exc}") from exc
            grads = backward(self.net, self.params, batch, trace)
            sgd_momentum_step(self.params, grads, self.momentum, lr, self.ortho, self.step)
            if not all(np.all(np.isfinite(w)) for w in self.params.weights.values()):
                raise TrainingDiverged(f"step {self.step}: weights became non-finite")
            losses.append(loss)
            self.step += 1
        self.epoch += 1
        return float(np.mean(losses)) if losses else None

    def run(self, stop_after=None):
        """Train until ``config.epochs`` (or ``stop_after`` more epochs) are done."""
        self._t0 = time.perf_counter()
        if self.step == 0 and self.epoch == 0 and not self.metrics:
            self.record()
        target = self.config.epochs
        if stop_after is not None:
            target = min(target, self.epoch + stop_after)
        while self.epoch < target:
            batch_loss = self.train_epoch()
            if self.epoch % self.config.eval_every == 0 or self.epoch == self.config.epochs:
                self.record(batch_loss)
            if self.on_epoch:
                self.on_epoch(self)
        return self.params, self.metrics

    # checkpoint support

    def state(self):
        return {
            "step": self.step,
            "epoch": self.epoch,
            "rng": self.rng.bit_generator.state,
            "metrics": self.metrics,
        }

    def restore(self, momentum, state):
        self.momentum = momentum
        self.step = state["step"]
        self.epoch = state["epoch"]
        self.rng.bit_generator.state = state["rng"]
        self.metrics = list(state["metrics"])


def train_loop(net, params, train_data, config, test_data=None):
    """Train ``params`` in place; returns ``(params, metrics records)``."""
    return Trainer(net, params, train_data, test_data, config).run()


def strip_timing(records):
    """Metrics without wall-clock fields, for reproducibility comparisons."""
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def append_jsonl(path, record):
    with open(Path(path), "a") as fh:
        fh.write(json.dumps(record) + "\n")


def steps_per_epoch(examples, batch_size):
    """Optimizer steps per epoch; a trailing batch of one example is dropped."""
    full, tail = divmod(examples, batch_size)
    return full + (1 if tail >= 2 else 0)


def corruption_table(net, params, data, seed=0):
    """Test error on clean data and on every corruption kind and severity."""
    from .data import CORRUPTIONS, corrupt_dataset

    table = {"clean": evaluate(net, params, data)}
    for kind in CORRUPTIONS:
        table[kind] = {
            str(s): evaluate(net, params, corrupt_dataset(data, kind, s, seed)) for s in range(1, 6)
        }
    return table
