"""Batch normalization and its orthogonality-friendly variants.

Three variants share one state type:

* ``bn``  -- per-neuron scale ``upsilon_i`` and running std ``phi_i``.
* ``dbn`` -- one scale shared by the layer; at inference the running mean of
  the per-neuron batch stds (``running_std_bar``) replaces ``phi_i``, so the
  layer transform is a scalar multiple of ``W``.
* ``bbn`` -- BN whose ratios ``upsilon_i / phi_i`` are clamped into a band
  around their mean after each optimizer step (:func:`bbn_clamp`).

Pre-activations are laid out ``(neurons, samples)``.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import BatchSizeError

VARIANTS = ("bn", "dbn", "bbn")
EPS_VAR = 1e-5
MOMENTUM = 0.9


@dataclass
class NormState:
    variant: str
    upsilon: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_std: np.ndarray
    running_std_bar: float = 1.0
    eps_tilde: float = 0.2
    momentum: float = MOMENTUM
    eps_var: float = EPS_VAR

    @classmethod
    def create(cls, n, variant="bn", eps_tilde=0.2, momentum=MOMENTUM, eps_var=EPS_VAR):
        if variant not in VARIANTS:
            raise ValueError(f"unknown norm variant {variant!r}")
        if eps_tilde < 0:
            raise ValueError("eps_tilde must be >= 0")
        return cls(
            variant=variant,
            upsilon=np.ones(1 if variant == "dbn" else n),
            beta=np.zeros(n),
            running_mean=np.zeros(n),
            running_std=np.ones(n),
            eps_tilde=float(eps_tilde),
            momentum=float(momentum),
            eps_var=float(eps_var),
        )

    @property
    def size(self):
        return self.beta.shape[0]

    def inference_scale(self):
        """Per-neuron factor ``upsilon_i / phi_i`` applied at inference."""
        if self.variant == "dbn":
            return np.full(self.size, self.upsilon[0] / self.running_std_bar)
        return self.upsilon / self.running_std

    def copy(self):
        return replace(
            self,
            upsilon=self.upsilon.copy(),
            beta=self.beta.copy(),
            running_mean=self.running_mean.copy(),
            running_std=self.running_std.copy(),
        )


def bn_forward(state, pre_act, mode="train", update_stats=True):
    """Normalize ``pre_act`` of shape ``(n, samples)``.

    In train mode batch statistics are used and, if ``update_stats``, folded
    into the running averages.  Returns ``(out, cache)``; ``cache`` feeds
    :func:`bn_backward`.
    """
    h = np.asarray(pre_act, dtype=np.float64)
    if mode == "train":
        count = h.shape[1]
        if count < 2:
            raise BatchSizeError("batch normalization in train mode needs >= 2 samples")
        mu = h.mean(axis=1)
        centered = h - mu[:, None]
        phi = np.sqrt(np.mean(centered * centered, axis=1) + state.eps_var)
        xhat = centered / phi[:, None]
        ups = state.upsilon[0] if state.variant == "dbn" else state.upsilon[:, None]
        out = ups * xhat + state.beta[:, None]
        if update_stats:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1 - m) * mu
            state.running_std = m * state.running_std + (1 - m) * phi
            if state.variant == "dbn":
                state.running_std_bar = m * state.running_std_bar + (1 - m) * float(phi.mean())
        return out, ("train", xhat, phi)
    if mode != "infer":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    g = state.inference_scale()
    out = g[:, None] * (h - state.running_mean[:, None]) + state.beta[:, None]
    return out, ("infer", (h - state.running_mean[:, None]), g)


def bn_backward(state, cache, dout):
    """Gradients ``(d_pre_act, d_upsilon, d_beta)`` for a :func:`bn_forward` call."""
    kind = cache[0]
    dbeta = dout.sum(axis=1)
    if kind == "train":
        _, xhat, phi = cache
        count = dout.shape[1]
        if state.variant == "dbn":
            dups = np.array([np.sum(dout * xhat)])
            dxhat = dout * state.upsilon[0]
        else:
            dups = np.sum(dout * xhat, axis=1)
            dxhat = dout * state.upsilon[:, None]
        dh = (
            count * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=1, keepdims=True)
        ) / (count * phi[:, None])
        return dh, dups, dbeta
    _, centered, g = cache
    if state.variant == "dbn":
        dups = np.array([np.sum(dout * centered) / state.running_std_bar])
    else:
        dups = np.sum(dout * centered, axis=1) / state.running_std
    return g[:, None] * dout, dups, dbeta


def effective_transform(state, w, bias=None):
    """Fold inference-time normalization into the preceding weight matrix.

    Returns ``(w_tilde, b_tilde)`` with ``w_tilde = diag(upsilon/phi) w`` and
    ``b_tilde = beta + diag(upsilon/phi) (bias - mu)``.
    """
    g = state.inference_scale()
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(state.size) if bias is None else np.asarray(bias, dtype=np.float64)
    return g[:, None] * w, state.beta + g * (b - state.running_mean)


def bbn_clamp(state):
    """Clamp ``upsilon_i / phi_i`` into ``[alpha/(1+e), alpha*(1+e)]``.

    ``alpha`` is the mean ratio, computed once before any entry moves.  The
    running std is used for ``phi``.
    """
    if state.variant != "bbn":
        raise ValueError("bbn_clamp applies to the 'bbn' variant only")
    phi = state.running_std
    ratio = state.upsilon / phi
    alpha = ratio.mean()
    rel = ratio / alpha
    band = 1.0 + state.eps_tilde
    ups = state.upsilon.copy()
    hi = rel > band
    lo = rel < 1.0 / band
    ups[hi] = alpha * phi[hi] * band
    ups[lo] = alpha * phi[lo] / band
    return replace(state, upsilon=ups)
