"""Riemannian geometry of the SPD manifold under the affine-invariant metric.

All operations work on plain numpy arrays. Matrices are p x p symmetric
positive definite; tangent vectors are p x p symmetric. Matrix exp/log/powers
go through the symmetric eigendecomposition, which is exact for symmetric
input and keeps everything symmetric up to floating-point roundoff.

Functions accept stacked inputs with shape (..., p, p) wherever the
implementation is a pointwise eigendecomposition.
"""

from __future__ import annotations

import warnings

import numpy as np

# An input counts as PD when lambda_min > PD_RTOL * lambda_max.
PD_RTOL = 1e-12
SYM_RTOL = 1e-12


class KarcherConvergenceWarning(UserWarning):
    """Karcher mean hit max_iter before reaching the gradient tolerance."""


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetrize: (A + A^T) / 2, applied to the last two axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def is_symmetric(a: np.ndarray, rtol: float = SYM_RTOL) -> bool:
    scale = np.max(np.abs(a))
    if scale == 0.0:
        return True
    return bool(np.max(np.abs(a - np.swapaxes(a, -1, -2))) <= rtol * scale)


def check_spd(a: np.ndarray, name: str = "matrix") -> None:
    """Raise ValueError unless `a` is symmetric positive definite."""
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not is_symmetric(a):
        raise ValueError(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(a)
    if np.any(w[..., 0] <= PD_RTOL * np.abs(w[..., -1])):
        raise ValueError(f"{name} is not positive definite (lambda_min={w[..., 0].min():.3e})")


def _eigh_apply(a: np.ndarray, fn) -> np.ndarray:
    """Apply a scalar function to the eigenvalues of a symmetric matrix."""
    w, u = np.linalg.eigh(a)
    fw = fn(w)
    return sym(np.einsum("...ik,...k,...jk->...ij", u, fw, u))


def expm_sym(a: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric matrix."""
    return _eigh_apply(a, np.exp)


def logm_spd(a: np.ndarray) -> np.ndarray:
    """Matrix logarithm of an SPD matrix."""
    return _eigh_apply(a, np.log)


def powm_spd(a: np.ndarray, t: float) -> np.ndarray:
    """Matrix power A^t of an SPD matrix."""
    return _eigh_apply(a, lambda w: np.power(w, t))


def _sqrt_and_inv_sqrt(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # One eigendecomposition serves both roots.
    w, u = np.linalg.eigh(a)
    sw = np.sqrt(w)
    half = sym(np.einsum("...ik,...k,...jk->...ij", u, sw, u))
    inv_half = sym(np.einsum("...ik,...k,...jk->...ij", u, 1.0 / sw, u))
    return half, inv_half


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def exp_map(base: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Riemannian exponential Exp(p, v) = p^{1/2} exp(p^{-1/2} v p^{-1/2}) p^{1/2}."""
    _check_same_dim(base, v)
    half, inv_half = _sqrt_and_inv_sqrt(base)
    inner = expm_sym(sym(inv_half @ v @ inv_half))
    return sym(half @ inner @ half)


def log_map(base: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Riemannian logarithm Log(p, q) = p^{1/2} log(p^{-1/2} q p^{-1/2}) p^{1/2}."""
    _check_same_dim(base, q)
    half, inv_half = _sqrt_and_inv_sqrt(base)
    inner = logm_spd(sym(inv_half @ q @ inv_half))
    return sym(half @ inner @ half)


def geodesic_distance(p: np.ndarray, q: np.ndarray) -> float | np.ndarray:
    """Affine-invariant distance d(p, q) = ||log(p^{-1/2} q p^{-1/2})||_F."""
    _check_same_dim(p, q)
    _, inv_half = _sqrt_and_inv_sqrt(p)
    inner = logm_spd(sym(inv_half @ q @ inv_half))
    d2 = np.einsum("...ij,...ij->...", inner, inner)
    return np.sqrt(d2)


def inner_product(base: np.ndarray, u: np.ndarray, v: np.ndarray) -> float | np.ndarray:
    """Metric inner product <u, v>_b = tr(b^{-1/2} u b^{-1} v b^{-1/2})."""
    _check_same_dim(base, u)
    _check_same_dim(base, v)
    binv = powm_spd(base, -1.0)
    # tr(b^{-1/2} u b^{-1} v b^{-1/2}) = tr(b^{-1} u b^{-1} v)
    return np.einsum("...ij,...jk,...kl,...li->...", binv, u, binv, v)


def norm(base: np.ndarray, v: np.ndarray) -> float | np.ndarray:
    """Metric norm of a tangent vector at `base`."""
    return np.sqrt(inner_product(base, v, v))


def parallel_transport(p: np.ndarray, q: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Transport tangent w from T_p to T_q along the connecting geodesic.

    Gamma_{p->q}(w) = p^{1/2} r p^{-1/2} w p^{-1/2} r p^{1/2}
    with r = exp(p^{-1/2} (v/2) p^{-1/2}) and v = Log(p, q).
    """
    _check_same_dim(p, q)
    _check_same_dim(p, w)
    half, inv_half = _sqrt_and_inv_sqrt(p)
    # r = exp(log(p^{-1/2} q p^{-1/2}) / 2) = (p^{-1/2} q p^{-1/2})^{1/2}
    r = powm_spd(sym(inv_half @ q @ inv_half), 0.5)
    outer = half @ r @ inv_half
    return sym(outer @ w @ np.swapaxes(outer, -1, -2))


def transport_to_identity(p: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Transport w from T_p to the identity: Gamma_{p->I}(w) = p^{-1/2} w p^{-1/2}.

    Follows from the general transport formula with q = I, where
    r = exp(-log(p)/2) = p^{-1/2}; the whitening by p^{-1/2} is what makes the
    trajectory statistic a plain Frobenius norm at the identity.
    """
    _, inv_half = _sqrt_and_inv_sqrt(p)
    return sym(inv_half @ w @ inv_half)


def karcher_mean(
    points: np.ndarray,
    step: float = 1.0,
    tol: float | None = None,
    max_iter: int = 200,
    full_output: bool = False,
):
    """Karcher (Frechet) mean of SPD matrices by tangent-space averaging.

    Starting from the first point, repeat
        delta = (step / N) * sum_i Log(mean, y_i)
        mean  = Exp(mean, delta)
    until ||sum_i Log(mean, y_i)||_F <= tol.

    Parameters
    ----------
    points : array, shape (N, p, p)
        SPD matrices to average.
    step : float
        Gradient step size alpha.
    tol : float, optional
        Convergence threshold on the Frobenius norm of the summed logs.
        Defaults to 1e-9 * N.
    max_iter : int
        Iteration cap; the last iterate is returned (with a warning, or a
        False flag under ``full_output``) if the tolerance is not reached.
    full_output : bool
        When true, return ``(mean, info)`` where info carries the convergence
        flag, iteration count, and final gradient norm.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 3 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty stack of square matrices")
    n = points.shape[0]
    if tol is None:
        tol = 1e-9 * n

    mean = points[0].copy()
    grad_norm = np.inf
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        half, inv_half = _sqrt_and_inv_sqrt(mean)
        whitened = sym(inv_half[None] @ points @ inv_half[None])
        logs = logm_spd(whitened)
        log_sum = sym(half @ logs.sum(axis=0) @ half)
        grad_norm = float(np.linalg.norm(log_sum))
        if grad_norm <= tol:
            converged = True
            break
        inner = expm_sym((step / n) * logs.sum(axis=0))
        mean = sym(half @ inner @ half)

    if not converged and not full_output:
        warnings.warn(
            f"Karcher mean stopped at max_iter={max_iter} with gradient norm "
            f"{grad_norm:.3e} > tol={tol:.3e}",
            KarcherConvergenceWarning,
        )
    if full_output:
        info = {"converged": converged, "iterations": iterations, "grad_norm": grad_norm}
        return mean, info
    return mean


def project_to_spd(s: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Project a symmetric matrix to SPD: clip eigenvalues at 0, then add eps*I.

    eps starts at 1e-8 and is multiplied by 10 until the smallest eigenvalue
    of the result reaches `floor`. Input already satisfying the floor is
    returned unchanged.
    """
    s = np.asarray(s, dtype=np.float64)
    if not is_symmetric(s):
        raise ValueError("project_to_spd expects a symmetric matrix")
    w, u = np.linalg.eigh(s)
    if w[0] >= floor:
        return s
    clipped = np.maximum(w, 0.0)
    eps = 1e-8
    out = sym((u * (clipped + eps)) @ u.T)
    # The recomposition can shave a ulp off clipped+eps, so check the actual
    # smallest eigenvalue rather than the intended one.
    while np.linalg.eigvalsh(out)[0] < floor:
        eps *= 10.0
        out = sym((u * (clipped + eps)) @ u.T)
    return out


def vech(a: np.ndarray) -> np.ndarray:
    """Half-vectorize a symmetric matrix, scaling off-diagonals by sqrt(2).

    The scaling makes the Euclidean inner product of coordinate vectors equal
    the Frobenius inner product of the matrices, so tangent norms at the
    identity can be read off the coordinates directly. Order: upper triangle,
    row-major, diagonal included.
    """
    a = np.asarray(a)
    p = a.shape[-1]
    iu, ju = np.triu_indices(p)
    coords = a[..., iu, ju].copy()
    coords[..., iu != ju] *= np.sqrt(2.0)
    return coords


def unvech(v: np.ndarray, p: int | None = None) -> np.ndarray:
    """Inverse of :func:`vech`."""
    v = np.asarray(v)
    m = v.shape[-1]
    if p is None:
        p = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if p * (p + 1) // 2 != m:
        raise ValueError(f"coordinate length {m} does not match dimension {p}")
    iu, ju = np.triu_indices(p)
    out = np.zeros(v.shape[:-1] + (p, p), dtype=v.dtype)
    scaled = v.copy()
    scaled[..., iu != ju] /= np.sqrt(2.0)
    out[..., iu, ju] = scaled
    out[..., ju, iu] = scaled
    return out


def tangent_dim(p: int) -> int:
    """Dimension of the tangent space of SPD(p): p(p+1)/2."""
    return p * (p + 1) // 2
