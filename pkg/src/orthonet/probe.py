"""Geometry probes on concrete networks.

Everything here runs in inference mode: norm layers are folded into the
preceding weight matrix via :func:`orthonet.norm.effective_transform`, which
turns the network into alternating affine maps, ReLU masks and pooling
selectors.  At a fixed input the masks and selectors are constant in a
neighborhood, so the network restricted to that neighborhood is one affine
map (:func:`induced_linear_map`).
"""

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .network import (
    Batch, ConvAsMatrix, Dense, MaxPool, Norm, ReLU, SoftmaxCE, _pool_index, forward,
)
from .norm import effective_transform
from .linalg import svd

NONZERO_REL = 1e-10


@dataclass
class LayerSpectrum:
    layer: int
    spectrum: np.ndarray
    sigma_max: float
    sigma_min: float
    rank: int
    folded: bool  # True when a following norm layer is folded in

    def as_dict(self):
        return {
            "layer": self.layer,
            "spectrum": self.spectrum.tolist(),
            "sigma_max": self.sigma_max,
            "sigma_min": self.sigma_min,
            "rank": self.rank,
            "folded_norm": self.folded,
        }


@dataclass
class SpectralReport:
    layers: list
    effective: list = field(default_factory=list)

    @property
    def prod_sigma_max(self):
        return float(np.prod([s.sigma_max for s in self.layers]))

    @property
    def prod_sigma_min(self):
        return float(np.prod([s.sigma_min for s in self.layers]))

    def delta(self, bound):
        """``2 b max(|prod sigma_max - 1|, |prod sigma_min - 1|)``."""
        return 2.0 * bound * max(abs(self.prod_sigma_max - 1), abs(self.prod_sigma_min - 1))

    def as_dict(self):
        return {
            "layers": [s.as_dict() for s in self.layers],
            "effective": [s.as_dict() for s in self.effective],
            "prod_sigma_max": self.prod_sigma_max,
            "prod_sigma_min": self.prod_sigma_min,
        }


def spectrum_of(w, layer=-1, folded=False):
    s = svd(w).S
    nonzero = s[s > NONZERO_REL * s[0]] if s[0] > 0 else s[:0]
    smin = float(nonzero[-1]) if nonzero.size else 0.0
    return LayerSpectrum(layer, s, float(s[0]), smin, int(nonzero.size), folded)


def layer_spectra(net, params):
    """Full spectra of every weight matrix, plus of ``W~`` where a norm follows."""
    raw, eff = [], []
    for i in net.weighted_indices():
        w = params.weights[i]
        raw.append(spectrum_of(w, i))
        j = net.norm_of(i)
        if j is not None:
            st = params.norms[j]
            if isinstance(net.layers[i], ConvAsMatrix) or st.size == w.shape[0]:
                wt, _ = effective_transform(st, w)
                eff.append(spectrum_of(wt, i, folded=True))
    return SpectralReport(raw, eff)


# -- folded affine view ------------------------------------------------------

def _conv_operator(layer, w, in_shape):
    """Dense matrix of a conv layer acting on flattened (C, H, W) inputs."""
    from .conv import im2col_batch

    n = prod(in_shape)
    eye = np.eye(n).reshape(n, *in_shape)
    cols = im2col_batch(eye, layer.kernel_h, layer.kernel_w, layer.stride, layer.pad)
    y = w @ cols  # (out, n*Ho*Wo)
    out = y.reshape(layer.out_channels, n, -1).transpose(0, 2, 1)
    return out.reshape(-1, n)


def folded_stages(net, params):
    """List of stages ``("affine", M, c)``, ``("relu", layer)``, ``("pool", layer, idx)``.

    Conv layers become their dense operator and norm layers are folded into
    the preceding affine stage, so ``M`` is the map the network applies at
    inference.
    """
    stages = []
    for i, layer in enumerate(net.layers):
        in_shape, out_shape = net.shapes[i]
        if isinstance(layer, Dense):
            b = params.biases.get(i, np.zeros(layer.n_out))
            stages.append(["affine", params.weights[i], b, i])
        elif isinstance(layer, ConvAsMatrix):
            m = _conv_operator(layer, params.weights[i], in_shape)
            ho, wo = out_shape[1:]
            b = params.biases.get(i, np.zeros(layer.out_channels))
            stages.append(["affine", m, np.repeat(b, ho * wo), i])
        elif isinstance(layer, Norm):
            st = params.norms[i]
            reps = prod(in_shape[1:]) if len(in_shape) == 3 else 1
            g = np.repeat(st.inference_scale(), reps)
            shift = np.repeat(st.beta - st.inference_scale() * st.running_mean, reps)
            if stages and stages[-1][0] == "affine":
                m, c = stages[-1][1], stages[-1][2]
                stages[-1][1] = g[:, None] * m
                stages[-1][2] = g * c + shift
            else:
                stages.append(["affine", np.diag(g), shift, i])
        elif isinstance(layer, ReLU):
            stages.append(["relu", i])
        elif isinstance(layer, MaxPool):
            stages.append(["pool", i, _pool_index(layer, in_shape)])
        elif isinstance(layer, SoftmaxCE):
            break
    return [tuple(s) for s in stages]


@dataclass
class InducedMap:
    anchor: np.ndarray
    matrix: np.ndarray
    bias: np.ndarray
    masks: dict
    selectors: dict

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.matrix @ x + self.bias


def induced_linear_map(net, params, x):
    """The affine map the network applies on the linear region containing ``x``.

    ReLU masks are strict (``pre > 0``) and pooling picks the lowest index
    among tied maxima, matching :func:`orthonet.network.forward`.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    a = x.copy()
    mat = np.eye(x.size)
    off = np.zeros(x.size)
    masks, selectors = {}, {}
    for stage in folded_stages(net, params):
        kind = stage[0]
        if kind == "affine":
            _, m, c, _ = stage
            a = m @ a + c
            mat = m @ mat
            off = m @ off + c
        elif kind == "relu":
            mask = a > 0
            masks[stage[1]] = mask
            a = np.where(mask, a, 0.0)
            mat = mat * mask[:, None]
            off = np.where(mask, off, 0.0)
        else:
            _, i, idx = stage
            chosen = idx[np.arange(idx.shape[0]), np.argmax(a[idx], axis=1)]
            selectors[i] = chosen
            a = a[chosen]
            mat = mat[chosen]
            off = off[chosen]
    return InducedMap(x, mat, off, masks, selectors)


def activation_pattern(net, params, x):
    """Masks and pooling selectors at ``x`` (from the network's own forward pass)."""
    batch = Batch(np.asarray(x, dtype=np.float64).reshape(1, -1), [0])
    _, _, trace = forward(net, params, batch, mode="infer")
    masks = {i: m[:, 0].copy() for i, m in trace.masks.items()}
    pools = {i: a[:, 0].copy() for i, a in trace.argmax.items()}
    return masks, pools


def same_pattern(p, q):
    return all(np.array_equal(p[0][i], q[0][i]) for i in p[0]) and all(
        np.array_equal(p[1][i], q[1][i]) for i in p[1]
    )


def radius_context(net, params):
    """Folded stages paired with their operator norms, reusable across anchors."""
    stages = folded_stages(net, params)
    return [(st, svd(st[1]).S[0] if st[0] == "affine" else None) for st in stages]


def local_region_radius(net, params, x, context=None):
    """Radius of a ball around ``x`` on which the activation pattern is constant.

    Every ReLU input neuron ``k`` of stage ``l`` contributes
    ``|a_lk(x)| / prod_{i<=l} sigma_max(M_i)``, where ``M_i`` are the folded
    affine maps up to that neuron (masks and pooling never increase the
    Lipschitz constant).  With max pooling a window's winner can also change
    without any ReLU flipping, so each live member ``u`` of a window won by
    ``m`` contributes ``(a_m - a_u) / (sqrt(2) prod sigma_max)``.  Entries
    held at exactly zero by an earlier ReLU stay zero inside the ball and are
    skipped.  The minimum is returned; 0 means ``x`` lies on a boundary.
    Pass ``context`` from :func:`radius_context` to probe many anchors.
    """
    if context is None:
        context = radius_context(net, params)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    a = x.copy()
    lip = 1.0
    best = np.inf
    dead = np.zeros(x.size, dtype=bool)
    for stage, sigma_max in context:
        kind = stage[0]
        if kind == "affine":
            _, m, c, _ = stage
            a = m @ a + c
            lip *= sigma_max
            dead = np.zeros(a.size, dtype=bool)
        elif kind == "relu":
            live = np.abs(a[~dead])
            if live.size:
                best = min(best, _ratio(float(live.min()), lip))
            dead = dead | (a <= 0)
            a = np.where(a > 0, a, 0.0)
        else:
            _, _, idx = stage
            vals = a[idx]
            win = np.argmax(vals, axis=1)
            rows = np.arange(idx.shape[0])
            gaps = vals[rows, win][:, None] - vals
            skip = dead[idx].copy()
            skip[rows, win] = True
            if np.any(~skip):
                best = min(best, _ratio(float(gaps[~skip].min()), np.sqrt(2.0) * lip))
            chosen = idx[rows, win]
            a = a[chosen]
            dead = dead[chosen]
    return float(best)


def _ratio(num, den):
    if num == 0.0:
        return 0.0
    return num / den if den > 0 else np.inf


# -- isometry statistics -----------------------------------------------------

@dataclass
class IsometryStats:
    pairs: int
    skipped: int
    ratio_min: float
    ratio_max: float
    ratio_mean: float
    quantiles: dict
    delta_hat: float
    bound: float
    sandwich_checked: int = 0
    sandwich_violations: int = 0

    def as_dict(self):
        return dict(self.__dict__)


def _output(net, params, x):
    batch = Batch(np.asarray(x, dtype=np.float64).reshape(1, -1), [0])
    return forward(net, params, batch, mode="infer")[1][:, 0]


def region_sandwich(net, params, x):
    """``(prod sigma_min, prod sigma_max)`` over the masked per-layer maps at ``x``.

    Each factor is the spectrum of ``P_l diag(tau_l) M_l`` for the folded
    affine map ``M_l`` with the mask of the ReLU (and selector of the pool)
    that follows it.
    """
    imap = induced_linear_map(net, params, x)
    lo, hi = 1.0, 1.0
    pending = None
    stages = folded_stages(net, params)

    def close(block):
        nonlocal lo, hi
        if block is None:
            return
        if not np.any(block):
            lo, hi = 0.0, 0.0
            return
        s = spectrum_of(block)
        lo *= s.sigma_min
        hi *= s.sigma_max

    for stage in stages:
        if stage[0] == "affine":
            close(pending)
            pending = stage[1]
        elif stage[0] == "relu":
            pending = pending * imap.masks[stage[1]][:, None]
        else:
            pending = pending[imap.selectors[stage[1]]]
    close(pending)
    return lo, hi


def isometry_ratio_stats(net, params, pairs, tol=1e-8, check_sandwich=True):
    """Ratios ``||T x - T x'|| / ||x - x'||`` over ``pairs``.

    ``pairs`` is an iterable of ``(x, x_prime)``.  For pairs sharing one
    linear region the ratio is additionally checked against the product of
    the masked per-layer extreme singular values; the sandwich is only a
    guarantee when the difference avoids the null space of the first map and
    later maps are injective, so violations are counted, not raised.
    """
    ratios, gaps, norms = [], [], []
    skipped = checked = violations = 0
    for x, xp in pairs:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        xp = np.asarray(xp, dtype=np.float64).reshape(-1)
        d = float(np.linalg.norm(x - xp))
        if d == 0.0:
            skipped += 1
            continue
        dt = float(np.linalg.norm(_output(net, params, x) - _output(net, params, xp)))
        ratios.append(dt / d)
        gaps.append(abs(dt - d))
        norms.extend([np.linalg.norm(x), np.linalg.norm(xp)])
        if check_sandwich and same_pattern(
            activation_pattern(net, params, x), activation_pattern(net, params, xp)
        ):
            lo, hi = region_sandwich(net, params, x)
            checked += 1
            if not (lo - tol <= dt / d <= hi + tol):
                violations += 1
    r = np.array(ratios) if ratios else np.array([np.nan])
    qs = {str(q): float(np.quantile(r, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95)}
    return IsometryStats(
        pairs=len(ratios),
        skipped=skipped,
        ratio_min=float(r.min()),
        ratio_max=float(r.max()),
        ratio_mean=float(r.mean()),
        quantiles=qs,
        delta_hat=float(max(gaps)) if gaps else 0.0,
        bound=float(max(norms)) if norms else 0.0,
        sandwich_checked=checked,
        sandwich_violations=violations,
    )


def dataset_radius(net, params, inputs):
    """Smallest per-point radius over a set of inputs (aggregate mode)."""
    context = radius_context(net, params)
    return min(local_region_radius(net, params, x, context) for x in inputs)
