"""Orthogonality mechanisms and the momentum SGD step that applies them.

Modes (``OrthoConfig.mode``):

``none``     plain momentum SGD with weight decay
``svb``      momentum SGD, then every ``svb_period`` steps clamp all singular
             values of every weight matrix into ``[1/(1+eps), 1+eps]``
``stiefel``  Riemannian SGD on the Stiefel manifold: momentum is projected to
             the tangent space and the step is retracted with QR
``soft``     adds ``lam * ||W^T W - I||_F^2`` per weight matrix
``srip``     adds ``kappa * sigma_max(W^T W - I)`` per weight matrix

Wide matrices (rows < cols) are handled through their transpose throughout,
so the Gram matrix is always the smaller one.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ManifoldError, RetractionError, RankError
from .linalg import power_iteration_sigma_max, qr, svd
from .norm import bbn_clamp

MODES = ("none", "svb", "stiefel", "soft", "srip")
MANIFOLD_TOL = 1e-6


@dataclass(frozen=True)
class OrthoConfig:
    mode: str = "none"
    epsilon: float = 0.05
    svb_period: int | None = None  # steps; None means once per epoch
    lam: float = 0.1
    kappa: float = 0.1
    pi_iters: int = 20

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ortho mode {self.mode!r}; expected one of {MODES}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.lam < 0 or self.kappa < 0:
            raise ValueError("penalty weights must be >= 0")
        if self.svb_period is not None and self.svb_period < 1:
            raise ValueError("svb_period must be >= 1")
        if self.pi_iters < 1:
            raise ValueError("pi_iters must be >= 1")


@dataclass
class MomentumState:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)


@dataclass
class StepInfo:
    penalty: float = 0.0
    svb_applied: bool = False
    srip_unconverged: int = 0


def orthogonal_init(shape, seed=0):
    """Q factor of a seeded Gaussian matrix, transposed for wide shapes."""
    m, n = shape
    if m < 1 or n < 1:
        raise ValueError(f"invalid shape {shape}")
    rng = np.random.default_rng(seed)
    tall = (max(m, n), min(m, n))
    q = qr(rng.standard_normal(tall)).Q
    return q if m >= n else q.T.copy()


def svb_project(w, epsilon):
    """Clamp every singular value of ``w`` into ``[1/(1+eps), 1+eps]``."""
    u, s, v = svd(w)
    s = np.clip(s, 1.0 / (1.0 + epsilon), 1.0 + epsilon)
    return (u * s) @ v.T


def _wide(w):
    return w.shape[0] < w.shape[1]


def manifold_residual(w):
    w = np.asarray(w, dtype=np.float64)
    if _wide(w):
        w = w.T
    return float(np.linalg.norm(w.T @ w - np.eye(w.shape[1])))


def stiefel_tangent_project(w, g):
    """Project ``g`` onto the tangent space of the Stiefel manifold at ``w``.

    ``(I - W W^T) G + W (W^T G - G^T W) / 2``.  ``w`` must have orthonormal
    columns (rows >= cols).
    """
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {g.shape}")
    if w.shape[0] < w.shape[1]:
        raise ValueError("tangent projection needs rows >= cols; pass the transpose")
    res = float(np.linalg.norm(w.T @ w - np.eye(w.shape[1])))
    if res > MANIFOLD_TOL:
        raise ManifoldError(f"point is off the manifold: ||W^T W - I||_F = {res:.3e}", res)
    wtg = w.T @ g
    return g - w @ wtg + 0.5 * w @ (wtg - wtg.T)


def stiefel_retract(w, step):
    """QR retraction: Q factor of ``w + step`` with nonnegative ``diag(R)``."""
    try:
        return qr(np.asarray(w) + np.asarray(step)).Q
    except RankError as exc:
        raise RetractionError(f"retraction failed ({exc}); try a smaller step", exc.residual) from exc


def soft_ortho_penalty(w, lam):
    """``lam * ||W^T W - I||_F^2`` (``W W^T`` for wide ``w``) and its gradient."""
    w = np.asarray(w, dtype=np.float64)
    if _wide(w):
        a = w @ w.T - np.eye(w.shape[0])
        return lam * float(np.sum(a * a)), 4.0 * lam * a @ w
    a = w.T @ w - np.eye(w.shape[1])
    return lam * float(np.sum(a * a)), 4.0 * lam * w @ a


def srip_penalty(w, kappa, pi_iters=20, tol=1e-10, floor=1e-12):
    """Spectral penalty ``kappa * sigma_max(W^T W - I)`` by power iteration.

    Returns ``(value, grad, converged)``.  With ``v`` the dominant unit
    eigenvector of the symmetric ``A`` and ``s = v^T A v`` the gradient is
    ``2 kappa sign(s) W v v^T``; it is zero once ``sigma_max(A)`` drops below
    ``floor``.
    """
    w = np.asarray(w, dtype=np.float64)
    wide = _wide(w)
    if wide:
        w = w.T
    a = w.T @ w - np.eye(w.shape[1])
    if not np.any(np.abs(a) > floor):
        grad = np.zeros_like(w)
        return 0.0, (grad.T if wide else grad), True
    res = power_iteration_sigma_max(a, tol=tol, max_iter=pi_iters)
    v = res.vector
    s = float(v @ a @ v)
    value = kappa * res.sigma
    if res.sigma < floor:
        grad = np.zeros_like(w)
    else:
        grad = 2.0 * kappa * np.sign(s) * np.outer(w @ v, v)
    return value, (grad.T if wide else grad), res.converged


def sgd_momentum_step(params, grads, state, lr, ortho, step_index):
    """One optimizer step, in place on ``params`` and ``state``.

    ``step_index`` is the zero-based index of this step; in SVB mode the
    bounding runs after steps whose count ``step_index + 1`` is a multiple of
    ``ortho.svb_period``.  BBN norm layers are clamped after every step.
    """
    info = StepInfo()
    m = state.momentum
    wd = state.weight_decay
    vel = state.velocity

    for i, w in list(params.weights.items()):
        name = f"W{i}"
        g = grads[name]
        if ortho.mode == "stiefel":
            wide = _wide(w)
            wt = w.T if wide else w
            v = m * vel.get(name, np.zeros_like(w)) + g
            vt = stiefel_tangent_project(wt, v.T if wide else v)
            vel[name] = vt.T if wide else vt
            new = stiefel_retract(wt, -lr * vt)
            params.weights[i] = new.T.copy() if wide else new
            continue
        g = g + wd * w
        if ortho.mode == "soft" and ortho.lam > 0:
            value, pg = soft_ortho_penalty(w, ortho.lam)
            info.penalty += value
            g = g + pg
        elif ortho.mode == "srip" and ortho.kappa > 0:
            value, pg, ok = srip_penalty(w, ortho.kappa, ortho.pi_iters)
            info.penalty += value
            info.srip_unconverged += not ok
            g = g + pg
        v = m * vel.get(name, np.zeros_like(w)) + g
        vel[name] = v
        params.weights[i] = w - lr * v

    for i, b in list(params.biases.items()):
        name = f"b{i}"
        v = m * vel.get(name, np.zeros_like(b)) + grads[name]
        vel[name] = v
        params.biases[i] = b - lr * v

    for i, st in list(params.norms.items()):
        for attr in ("upsilon", "beta"):
            name = f"{attr}{i}"
            p = getattr(st, attr)
            v = m * vel.get(name, np.zeros_like(p)) + grads[name]
            vel[name] = v
            setattr(st, attr, p - lr * v)
        if st.variant == "bbn":
            params.norms[i] = bbn_clamp(st)

    if ortho.mode == "svb":
        if ortho.svb_period is None:
            raise ValueError("svb_period must be resolved to a step count before stepping")
        if (step_index + 1) % ortho.svb_period == 0:
            for i, w in list(params.weights.items()):
                params.weights[i] = svb_project(w, ortho.epsilon)
            info.svb_applied = True
    return info
