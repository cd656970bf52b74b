"""Datasets: MNIST IDX and CIFAR-10 binary readers, synthetic blobs, corruptions.

Inputs are held flat as ``(examples, features)`` fp64 arrays scaled to
``[0, 1]`` with the image shape kept alongside.
"""

import gzip
from dataclasses import dataclass
from math import prod
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParseError
from .linalg import qr

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

CORRUPTIONS = ("gaussian_noise", "impulse_noise", "box_blur", "contrast")
NOISE_STD = (0.04, 0.08, 0.12, 0.18, 0.26)
IMPULSE_FRACTION = (0.01, 0.03, 0.06, 0.10, 0.17)
BLUR_KERNEL = (3, 3, 5, 5, 7)
BLUR_REPEATS = (1, 2, 1, 2, 2)
CONTRAST_FACTOR = (0.75, 0.5, 0.4, 0.3, 0.15)


@dataclass
class Dataset:
    name: str
    split: str
    inputs: np.ndarray
    labels: np.ndarray
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.inputs.ndim != 2 or self.inputs.shape[1] != prod(self.input_shape):
            raise DimensionError(
                f"inputs of shape {self.inputs.shape} do not match input shape {self.input_shape}"
            )
        if self.labels.shape != (self.inputs.shape[0],):
            raise DimensionError("one label per example required")
        if self.inputs.shape[0] == 0:
            raise ValueError(f"dataset {self.name!r} is empty")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError(f"dataset {self.name!r} has non-finite inputs")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels of {self.name!r} fall outside [0, {self.num_classes})")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def images(self):
        return self.inputs.reshape(len(self), *self.input_shape)

    def subset(self, count, seed=0):
        """First ``count`` examples of a seeded permutation (whole set if larger)."""
        if count is None or count >= len(self):
            return self
        order = np.random.default_rng(seed).permutation(len(self))[:count]
        order.sort()
        return Dataset(self.name, self.split, self.inputs[order], self.labels[order],
                       self.input_shape, self.num_classes)


# -- MNIST IDX ---------------------------------------------------------------

def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path):
    """Parse an IDX file (optionally gzip-compressed) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise ParseError(f"{path}: file too short for an IDX header", offset=len(raw))
    magic = int.from_bytes(raw[:4], "big")
    if magic >> 8 != 0x08:
        raise ParseError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise ParseError(f"{path}: unsupported IDX magic 0x{magic:08x}", offset=0)
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError(f"{path}: truncated IDX header", offset=len(raw))
    dims = [int.from_bytes(raw[4 + 4 * k: 8 + 4 * k], "big") for k in range(ndim)]
    need = head + prod(dims)
    if len(raw) < need:
        raise ParseError(
            f"{path}: truncated IDX payload, expected {need} bytes, found {len(raw)}",
            offset=len(raw),
        )
    if len(raw) > need:
        raise ParseError(f"{path}: {len(raw) - need} trailing bytes after IDX payload", offset=need)
    return np.frombuffer(raw, dtype=np.uint8, count=prod(dims), offset=head).reshape(dims)


def write_idx(path, array, compress=None):
    """Write a uint8 array as IDX; gzip when ``compress`` or the name ends in .gz."""
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES if array.ndim == 3 else IDX_LABELS
    if array.ndim not in (1, 3):
        raise DimensionError("IDX writer handles label vectors and image stacks only")
    payload = magic.to_bytes(4, "big")
    payload += b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    payload += array.tobytes()
    path = Path(path)
    if compress or (compress is None and path.suffix == ".gz"):
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_mnist_idx(images_path, labels_path, name="mnist", split="train"):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise ParseError(f"{images_path}: expected an image stack and a label vector", offset=0)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels", offset=0
        )
    if labels.size and labels.max() > 9:
        raise ParseError(f"{labels_path}: label {int(labels.max())} outside 0..9", offset=8)
    h, w = images.shape[1:]
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(name, split, inputs, labels, (1, h, w), 10)


def _find(directory, stem):
    for suffix in ("", ".gz"):
        for candidate in (stem, stem.replace("-idx", ".idx")):
            p = Path(directory) / (candidate + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, split="train"):
    """Load the standard four-file MNIST layout from ``directory``."""
    prefix = "train" if split == "train" else "t10k"
    return load_mnist_idx(
        _find(directory, f"{prefix}-images-idx3-ubyte"),
        _find(directory, f"{prefix}-labels-idx1-ubyte"),
        name=Path(directory).name,
        split=split,
    )


# -- CIFAR-10 binary ---------------------------------------------------------

def load_cifar10_bin(path, split="train"):
    """Read one or more CIFAR-10 binary batch files (3073-byte records)."""
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    labels, pixels = [], []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) % CIFAR_RECORD:
            whole = len(raw) - len(raw) % CIFAR_RECORD
            raise ParseError(
                f"{p}: size {len(raw)} is not a multiple of {CIFAR_RECORD}", offset=whole
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] > 9)[0]
        if bad.size:
            raise ParseError(f"{p}: label byte {rec[bad[0], 0]} outside 0..9",
                             offset=int(bad[0]) * CIFAR_RECORD)
        labels.append(rec[:, 0])
        pixels.append(rec[:, 1:])
    inputs = np.concatenate(pixels).astype(np.float64) / 255.0
    return Dataset("cifar10", split, inputs, np.concatenate(labels), (3, 32, 32), 10)


def write_cifar10_bin(path, data):
    """Write a dataset of 3x32x32 images in CIFAR-10 binary layout."""
    if data.input_shape != (3, 32, 32):
        raise DimensionError(f"CIFAR records hold 3x32x32 images, got {data.input_shape}")
    pix = np.rint(data.inputs * 255.0)
    if pix.min() < 0 or pix.max() > 255:
        raise ValueError("pixel values outside [0, 1]")
    rec = np.empty((len(data), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = data.labels
    rec[:, 1:] = pix.astype(np.uint8)
    Path(path).write_bytes(rec.tobytes())


# -- synthetic ---------------------------------------------------------------

def synth_blobs(classes, dim, per_class, separation, seed=0, split="train"):
    """Unit-variance Gaussian clusters around seeded centers scaled by ``separation``.

    With ``classes <= dim`` the centers are a random orthonormal frame, so any
    two sit exactly ``separation * sqrt(2)`` apart; otherwise they are random
    unit vectors.  ``split="test"`` draws fresh samples around the same centers.
    """
    if separation <= 0:
        raise ValueError("separation must be > 0")
    if per_class < 1:
        raise ValueError("per_class must be >= 1; an empty dataset is not allowed")
    if classes < 2 or dim < 1:
        raise ValueError("need classes >= 2 and dim >= 1")
    centers = np.random.default_rng((seed, 0)).standard_normal((classes, dim))
    if classes <= dim:
        centers = qr(centers.T)[0].T
    else:
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation
    rng = np.random.default_rng((seed, 1 if split == "train" else 2))
    labels = np.repeat(np.arange(classes), per_class)
    inputs = centers[labels] + rng.standard_normal((labels.size, dim))
    return Dataset("blobs", split, inputs, labels, (dim,), classes)


# -- corruptions -------------------------------------------------------------

def _box_blur(images, size):
    r = size // 2
    padded = np.pad(images, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    return sliding_window_view(padded, (size, size), axis=(2, 3)).mean(axis=(-2, -1))


def corrupt_dataset(data, kind, severity, seed=0):
    """Corrupted copy of an image dataset; outputs are clipped to ``[0, 1]``."""
    if len(data.input_shape) != 3:
        raise DimensionError(f"corruptions need (C, H, W) images, got shape {data.input_shape}")
    if kind not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")
    if not 1 <= severity <= 5:
        raise ValueError("severity must be in 1..5")
    s = severity - 1
    rng = np.random.default_rng((seed, CORRUPTIONS.index(kind), severity))
    x = data.images.copy()
    if kind == "gaussian_noise":
        x = x + rng.normal(0.0, NOISE_STD[s], x.shape)
    elif kind == "impulse_noise":
        hit = rng.random(x.shape) < IMPULSE_FRACTION[s]
        salt = rng.random(x.shape) < 0.5
        x = np.where(hit, np.where(salt, 1.0, 0.0), x)
    elif kind == "box_blur":
        for _ in range(BLUR_REPEATS[s]):
            x = _box_blur(x, BLUR_KERNEL[s])
    else:
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        x = mean + CONTRAST_FACTOR[s] * (x - mean)
    x = np.clip(x, 0.0, 1.0).reshape(len(data), -1)
    return Dataset(f"{data.name}-{kind}-{severity}", data.split, x, data.labels.copy(),
                   data.input_shape, data.num_classes)
