"""Dense fp64 linear algebra used by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The SVD is
a one-sided (Hestenes) Jacobi iteration run on the triangular factor of a
Householder QR, and the QR itself is Householder with a nonnegative diagonal
on R so that the Q factor is unique.
"""

from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import DecompositionError, DimensionError, RankError

MAX_SWEEPS = 60
JACOBI_TOL = 1e-14
RANK_TOL = 1e-12


class SvdFactors(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


class QrFactors(NamedTuple):
    Q: np.ndarray
    R: np.ndarray


class PowerIterationResult(NamedTuple):
    sigma: float
    vector: np.ndarray
    converged: bool
    iterations: int


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _require_finite(a, name):
    if not np.all(np.isfinite(a)):
        raise DecompositionError(f"{name} contains NaN or Inf entries")


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


PANEL = 32


@njit(cache=True)
def _panel_kernel(pt):
    # pt holds one column panel as rows (b x m); returns unit reflectors (b x m)
    b, m = pt.shape
    vs = np.zeros((b, m))
    for k in range(b):
        normx = 0.0
        for i in range(k, m):
            normx += pt[k, i] * pt[k, i]
        normx = np.sqrt(normx)
        if normx == 0.0:
            continue
        alpha = -normx if pt[k, k] >= 0 else normx
        for i in range(k, m):
            vs[k, i] = pt[k, i]
        vs[k, k] -= alpha
        vnorm = 0.0
        for i in range(k, m):
            vnorm += vs[k, i] * vs[k, i]
        vnorm = np.sqrt(vnorm)
        for i in range(k, m):
            vs[k, i] /= vnorm
        for j in range(k, b):
            d = 0.0
            for i in range(k, m):
                d += vs[k, i] * pt[j, i]
            d *= 2.0
            for i in range(k, m):
                pt[j, i] -= d * vs[k, i]
    return vs


def _wy_factor(v):
    """Upper-triangular ``T`` with ``H_1 ... H_b = I - V T V^T`` for unit reflectors."""
    b = v.shape[1]
    t = np.zeros((b, b))
    for j in range(b):
        if not v[:, j].any():
            continue  # zero column: that reflector is the identity
        t[j, j] = 2.0
        if j:
            t[:j, j] = -2.0 * t[:j, :j] @ (v[:, :j].T @ v[:, j])
    return t


def _householder(a):
    """Thin blocked Householder QR without sign fixing or rank checks.

    Panels of ``PANEL`` columns are factored by a compiled kernel; the
    trailing matrix and the Q accumulation use the compact WY form so the
    bulk of the work runs as matrix products.
    """
    m, n = a.shape
    r = np.array(a, dtype=np.float64, copy=True)
    blocks = []
    for k in range(0, n, PANEL):
        b = min(PANEL, n - k)
        pt = np.ascontiguousarray(r[k:, k:k + b].T)
        v = _panel_kernel(pt).T
        r[k:, k:k + b] = pt.T
        t = _wy_factor(v)
        if k + b < n:
            trail = r[k:, k + b:]
            trail -= v @ (t.T @ (v.T @ trail))
        blocks.append((k, v, t))
    q = np.eye(m, n)
    for k, v, t in reversed(blocks):
        sub = q[k:, k:]
        sub -= v @ (t @ (v.T @ sub))
    return q, np.triu(r[:n, :])


def qr(w):
    """Thin QR of a tall (or square) matrix with ``diag(R) >= 0``.

    Raises :class:`RankError` if any ``|R[i, i]|`` falls below
    ``1e-12 * ||w||_F``.
    """
    w = as_matrix(w, "w")
    m, n = w.shape
    if m < n:
        raise DimensionError(f"qr needs rows >= cols, got {w.shape}")
    _require_finite(w, "w")
    q, r = _householder(w)
    d = np.diag(r)
    signs = np.where(d < 0, -1.0, 1.0)
    q = q * signs
    r = signs[:, None] * r
    scale = frobenius_norm(w)
    diag = np.abs(np.diag(r))
    if n and (scale == 0.0 or diag.min() < RANK_TOL * scale):
        i = int(np.argmin(diag))
        raise RankError(
            f"matrix is numerically rank deficient: |R[{i},{i}]| = {diag[i]:.3e}",
            residual=float(diag[i]),
        )
    return QrFactors(q, r)


@njit(cache=True)
def _jacobi_kernel(bt, vt, tol, floor, max_sweeps):
    # one-sided Jacobi on the rows of bt (= columns of B), cyclic pair order
    n, m = bt.shape
    off = 0.0
    for sweep in range(max_sweeps):
        rotated = False
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    x = bt[p, i]
                    y = bt[q, i]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                norms = np.sqrt(alpha * beta)
                if norms <= floor or abs(gamma) <= tol * norms:
                    continue
                rotated = True
                off = max(off, abs(gamma) / norms)
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = bt[p, i]
                    y = bt[q, i]
                    bt[p, i] = c * x - s * y
                    bt[q, i] = s * x + c * y
                for i in range(n):
                    x = vt[p, i]
                    y = vt[q, i]
                    vt[p, i] = c * x - s * y
                    vt[q, i] = s * x + c * y
        if not rotated:
            return sweep + 1, True, off
    return max_sweeps, False, off


def _complete_basis(u, keep):
    """Replace columns of ``u`` not in ``keep`` by an orthonormal completion."""
    m, p = u.shape
    basis = [u[:, j] for j in range(p) if keep[j]]
    candidates = iter(np.eye(m))
    out = u.copy()
    for j in range(p):
        if keep[j]:
            continue
        seed = u[:, j]
        while True:
            v = seed.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.sqrt(v @ v)
            if nv > 1e-8:
                v /= nv
                break
            seed = next(candidates)
        out[:, j] = v
        basis.append(v)
    return out


def _jacobi_tall(a):
    m, n = a.shape
    q, r = _householder(a)
    scale = frobenius_norm(a)
    if scale == 0.0:
        return SvdFactors(np.eye(m, n), np.zeros(n), np.eye(n))

    bt = np.array(r.T, order="C", copy=True)
    vt = np.eye(n)
    floor = (JACOBI_TOL * scale) ** 2 * 1e-14
    _, converged, off = _jacobi_kernel(bt, vt, JACOBI_TOL, floor, MAX_SWEEPS)
    if not converged:
        raise DecompositionError(
            f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps", residual=off
        )
    b = bt.T
    v = vt.T
    sigma = np.sqrt(np.einsum("ij,ij->j", b, b))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    b = b[:, order]
    v = v[:, order]
    keep = sigma > 1e-13 * sigma[0]
    ur = np.zeros_like(b)
    ur[:, keep] = b[:, keep] / sigma[keep]
    if not keep.all():
        ur = _complete_basis(ur, keep)
    return SvdFactors(q @ ur, sigma, v)


def svd(w):
    """Thin SVD ``w = U diag(S) V^T`` with ``S`` sorted descending."""
    w = as_matrix(w, "w")
    _require_finite(w, "w")
    m, n = w.shape
    if m >= n:
        return _jacobi_tall(w)
    u, s, v = _jacobi_tall(w.T)
    return SvdFactors(v, s, u)


def singular_values(w):
    return svd(w).S


def power_iteration_sigma_max(a, tol=1e-10, max_iter=1000, seed=0, start=None):
    """Largest singular value of ``a`` by iterating ``v <- A^T A v / ||.||``.

    The start vector is a seeded Gaussian unless ``start`` is given.  When
    ``max_iter`` runs out the last estimate is returned with
    ``converged=False``.
    """
    a = as_matrix(a, "a")
    if not np.any(a):
        raise ValueError("power iteration needs a nonzero matrix")
    n = a.shape[1]
    if start is None:
        v = np.random.default_rng(seed).standard_normal(n)
    else:
        v = np.asarray(start, dtype=np.float64).copy()
    v /= np.sqrt(v @ v)
    sigma = 0.0
    for it in range(1, max_iter + 1):
        av = a @ v
        new_sigma = float(np.sqrt(av @ av))
        z = a.T @ av
        nz = np.sqrt(z @ z)
        if nz == 0.0:
            # start vector in the null space; restart from a fixed direction
            v = np.ones(n) / np.sqrt(n)
            continue
        v = z / nz
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return PowerIterationResult(new_sigma, v, True, it)
        sigma = new_sigma
    return PowerIterationResult(sigma, v, False, max_iter)
