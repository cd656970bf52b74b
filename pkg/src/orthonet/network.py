"""Sequential feed-forward networks: definition, forward pass and gradients.

Activations are stored ``(features, batch)`` so every weighted layer is a left
multiplication.  Image-shaped activations ``(C, H, W)`` are flattened in
(channel, row, col) order.  Parameters live in a :class:`ParamSet` and are
addressed by name: ``W{i}``/``b{i}`` for weighted layer ``i`` and
``upsilon{i}``/``beta{i}`` for norm layer ``i`` (``i`` is the layer index).
"""

from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import conv
from .errors import NumericError, SpecError, TraceError
from .norm import NormState, bn_backward, bn_forward


@dataclass(frozen=True)
class Dense:
    n_out: int
    bias: bool = True


@dataclass(frozen=True)
class ConvAsMatrix:
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    bias: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Norm:
    variant: str = "bn"
    eps_tilde: float = 0.2


@dataclass(frozen=True)
class SoftmaxCE:
    pass


WEIGHTED = (Dense, ConvAsMatrix)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    shapes: tuple  # (in_shape, out_shape) per layer

    @property
    def num_classes(self):
        return self.shapes[-1][1][0]

    @property
    def input_dim(self):
        return prod(self.input_shape)

    def weighted_indices(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, WEIGHTED)]

    def norm_indices(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Norm)]

    def weight_shape(self, i):
        layer = self.layers[i]
        if isinstance(layer, Dense):
            return (layer.n_out, prod(self.shapes[i][0]))
        return (layer.out_channels, layer.in_channels * layer.kernel_h * layer.kernel_w)

    def norm_of(self, i):
        """Index of the norm layer directly after weighted layer ``i``, or None."""
        j = i + 1
        if j < len(self.layers) and isinstance(self.layers[j], Norm):
            return j
        return None


@dataclass
class ParamSet:
    weights: dict = field(default_factory=dict)
    biases: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)

    def trainable(self):
        """Name -> array view of every trainable parameter."""
        out = {}
        for i, w in self.weights.items():
            out[f"W{i}"] = w
            if i in self.biases:
                out[f"b{i}"] = self.biases[i]
        for i, st in self.norms.items():
            out[f"upsilon{i}"] = st.upsilon
            out[f"beta{i}"] = st.beta
        return out

    def copy(self):
        return ParamSet(
            weights={i: w.copy() for i, w in self.weights.items()},
            biases={i: b.copy() for i, b in self.biases.items()},
            norms={i: st.copy() for i, st in self.norms.items()},
        )


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[None, :]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class ForwardTrace:
    mode: str
    x0: np.ndarray
    pre_activations: dict  # layer index -> input of that ReLU layer
    masks: dict  # layer index -> boolean ReLU mask
    argmax: dict  # layer index -> flat input index chosen per pooled output
    caches: list
    probs: np.ndarray
    labels: np.ndarray


def _out_shape(layer, in_shape, position):
    if isinstance(layer, Dense):
        if layer.n_out < 1:
            raise SpecError(f"layer {position}: Dense needs n_out >= 1")
        return (layer.n_out,)
    if isinstance(layer, ConvAsMatrix):
        if len(in_shape) != 3:
            raise SpecError(f"layer {position}: ConvAsMatrix needs (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if c != layer.in_channels:
            raise SpecError(
                f"layer {position}: ConvAsMatrix expects {layer.in_channels} input channels, "
                f"previous layer gives {c}"
            )
        ho = conv.conv_output_size(h, layer.kernel_h, layer.stride, layer.pad)
        wo = conv.conv_output_size(w, layer.kernel_w, layer.stride, layer.pad)
        if ho < 1 or wo < 1:
            raise SpecError(f"layer {position}: kernel larger than padded input {in_shape}")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, (ReLU, Norm)):
        return in_shape
    if isinstance(layer, MaxPool):
        if len(in_shape) == 3:
            c, h, w = in_shape
            ho = (h - layer.window) // layer.stride + 1
            wo = (w - layer.window) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise SpecError(f"layer {position}: pooling window larger than input {in_shape}")
            return (c, ho, wo)
        d = prod(in_shape)
        n = (d - layer.window) // layer.stride + 1
        if n < 1:
            raise SpecError(f"layer {position}: pooling window larger than input {in_shape}")
        return (n,)
    if isinstance(layer, SoftmaxCE):
        if len(in_shape) != 1 or in_shape[0] < 2:
            raise SpecError(f"layer {position}: SoftmaxCE head needs a flat input of >= 2 classes")
        return in_shape
    raise SpecError(f"layer {position}: unknown layer type {type(layer).__name__}")


def make_spec(layers, input_shape):
    """Validate ``layers`` against ``input_shape`` and compute all shapes."""
    layers = tuple(layers)
    shape = tuple(int(s) for s in input_shape)
    if not layers or not isinstance(layers[-1], SoftmaxCE):
        raise SpecError("layer list must end with a SoftmaxCE head")
    shapes = []
    for i, layer in enumerate(layers):
        if isinstance(layer, SoftmaxCE) and i != len(layers) - 1:
            raise SpecError(f"layer {i}: SoftmaxCE head must be last")
        try:
            out = _out_shape(layer, shape, i)
        except SpecError as exc:
            if i == 0:
                raise
            raise SpecError(f"layers {i - 1} -> {i} do not compose: {exc}") from None
        shapes.append((shape, out))
        shape = out
    return NetworkSpec(shape_tuple(input_shape), layers, tuple(shapes))


def shape_tuple(shape):
    return tuple(int(s) for s in shape)


def build_network(layers, input_shape, seed=0):
    """Validated :class:`NetworkSpec` plus an orthogonally initialized :class:`ParamSet`."""
    from .optim import orthogonal_init

    net = make_spec(layers, input_shape)
    params = ParamSet()
    for i, layer in enumerate(net.layers):
        if isinstance(layer, WEIGHTED):
            params.weights[i] = orthogonal_init(net.weight_shape(i), seed=(seed, i))
            if layer.bias:
                params.biases[i] = np.zeros(net.weight_shape(i)[0])
        elif isinstance(layer, Norm):
            in_shape = net.shapes[i][0]
            n = in_shape[0] if len(in_shape) == 3 else prod(in_shape)
            params.norms[i] = NormState.create(n, layer.variant, layer.eps_tilde)
    return net, params


# -- per-layer kernels -------------------------------------------------------

def _conv_forward(layer, w, x, in_shape):
    c, h, wd = in_shape
    batch = x.shape[1]
    images = x.T.reshape(batch, c, h, wd)
    cols = conv.im2col_batch(images, layer.kernel_h, layer.kernel_w, layer.stride, layer.pad)
    y = w @ cols  # (out, B*Ho*Wo)
    ho = conv.conv_output_size(h, layer.kernel_h, layer.stride, layer.pad)
    wo = conv.conv_output_size(wd, layer.kernel_w, layer.stride, layer.pad)
    y = y.reshape(layer.out_channels, batch, ho, wo).transpose(0, 2, 3, 1)
    return y.reshape(-1, batch), cols


def _conv_backward(layer, w, cols, dy, in_shape, out_shape):
    batch = dy.shape[1]
    oc, ho, wo = out_shape
    dy = dy.reshape(oc, ho, wo, batch).transpose(0, 3, 1, 2).reshape(oc, -1)
    dw = dy @ cols.T
    dcols = w.T @ dy
    c, h, wd = in_shape
    dx = conv.col2im_batch(dcols, (batch, c, h, wd), layer.kernel_h, layer.kernel_w,
                           layer.stride, layer.pad)
    return dx.reshape(batch, -1).T, dw, dy.sum(axis=1)


def _pool_index(layer, in_shape):
    """Flat input indices of every window: shape (outputs, window_size)."""
    if len(in_shape) == 3:
        c, h, w = in_shape
        grid = np.arange(c * h * w).reshape(c, h, w)
        win = np.lib.stride_tricks.sliding_window_view(grid, (layer.window, layer.window), axis=(1, 2))
        win = win[:, ::layer.stride, ::layer.stride]
        return win.reshape(-1, layer.window * layer.window)
    d = prod(in_shape)
    win = np.lib.stride_tricks.sliding_window_view(np.arange(d), layer.window)[::layer.stride]
    return win


def _norm_view(x, in_shape):
    """(features, B) -> (neurons, samples) for normalization."""
    if len(in_shape) == 3:
        c = in_shape[0]
        return x.reshape(c, -1)
    return x


def forward(net, params, batch, mode="train", update_stats=None):
    """Run the network on ``batch``.

    Returns ``(loss, logits, trace)`` with logits laid out ``(classes, batch)``
    and ``loss`` the mean softmax cross-entropy.  Norm-layer running
    statistics are updated in train mode unless ``update_stats=False``.
    """
    if update_stats is None:
        update_stats = mode == "train"
    x = batch.inputs
    if x.shape[1] != net.input_dim:
        raise TraceError(f"batch has {x.shape[1]} features, network expects {net.input_dim}")
    if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= net.num_classes):
        raise TraceError(f"labels must lie in [0, {net.num_classes})")
    a = x.T.copy()
    trace = ForwardTrace(mode, x.copy(), {}, {}, {}, [], None, batch.labels)
    for i, layer in enumerate(net.layers):
        in_shape, out_shape = net.shapes[i]
        cache = None
        if isinstance(layer, Dense):
            cache = a
            a = params.weights[i] @ a
            if i in params.biases:
                a = a + params.biases[i][:, None]
        elif isinstance(layer, ConvAsMatrix):
            a, cache = _conv_forward(layer, params.weights[i], a, in_shape)
            if i in params.biases:
                a = (a.reshape(layer.out_channels, -1, a.shape[1])
                     + params.biases[i][:, None, None]).reshape(a.shape)
        elif isinstance(layer, Norm):
            st = params.norms[i]
            # conv outputs normalize per channel over batch and positions
            view = _norm_view(a, in_shape)
            out, cache = bn_forward(st, view, mode, update_stats=update_stats)
            a = out.reshape(a.shape)
        elif isinstance(layer, ReLU):
            trace.pre_activations[i] = a
            mask = a > 0
            trace.masks[i] = mask
            a = np.where(mask, a, 0.0)
        elif isinstance(layer, MaxPool):
            idx = _pool_index(layer, in_shape)
            vals = a[idx]  # (outputs, window, B)
            choice = np.argmax(vals, axis=1)  # first maximum wins
            chosen = np.take_along_axis(idx, choice, axis=1)
            trace.argmax[i] = chosen
            a = np.take_along_axis(a, chosen, axis=0)
        elif isinstance(layer, SoftmaxCE):
            logits = a
            shifted = logits - logits.max(axis=0, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
            probs = np.exp(logp)
            labels = batch.labels
            loss = -float(np.mean(logp[labels, np.arange(labels.size)]))
            trace.probs = probs
            trace.caches.append(None)
            if not np.isfinite(loss):
                raise NumericError(f"layer {i} (SoftmaxCE): loss is not finite")
            return loss, logits, trace
        if not np.all(np.isfinite(a)):
            raise NumericError(f"layer {i} ({type(layer).__name__}): non-finite activations")
        trace.caches.append(cache)
    raise SpecError("network has no SoftmaxCE head")


def backward(net, params, batch, trace):
    """Gradient of the mean loss with respect to every trainable parameter."""
    if len(trace.caches) != len(net.layers) or trace.probs is None:
        raise TraceError("trace does not come from a forward pass of this network")
    if trace.probs.shape[1] != len(batch) or not np.array_equal(trace.labels, batch.labels):
        raise TraceError("trace was recorded on a different batch")
    bsz = len(batch)
    grads = {}
    d = trace.probs.copy()
    d[batch.labels, np.arange(bsz)] -= 1.0
    d /= bsz
    for i in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[i]
        in_shape, out_shape = net.shapes[i]
        cache = trace.caches[i]
        if isinstance(layer, Dense):
            grads[f"W{i}"] = d @ cache.T
            if i in params.biases:
                grads[f"b{i}"] = d.sum(axis=1)
            d = params.weights[i].T @ d
        elif isinstance(layer, ConvAsMatrix):
            d, dw, db = _conv_backward(layer, params.weights[i], cache, d, in_shape, out_shape)
            grads[f"W{i}"] = dw
            if i in params.biases:
                grads[f"b{i}"] = db
        elif isinstance(layer, Norm):
            st = params.norms[i]
            view = _norm_view(d, in_shape)
            dh, dups, dbeta = bn_backward(st, cache, view)
            grads[f"upsilon{i}"] = dups
            grads[f"beta{i}"] = dbeta
            d = dh.reshape(d.shape)
        elif isinstance(layer, ReLU):
            d = np.where(trace.masks[i], d, 0.0)
        elif isinstance(layer, MaxPool):
            chosen = trace.argmax[i]
            dx = np.zeros((prod(in_shape), d.shape[1]))
            cols = np.broadcast_to(np.arange(d.shape[1]), chosen.shape)
            np.add.at(dx, (chosen, cols), d)
            d = dx
    return grads
