"""Geodesic regression of SPD-valued responses: the longitudinal-covariance GLM.

The model is C(x) = Exp(b, sum_j V_j x_j) with b the Karcher mean of the
responses and V_j tangent slopes at b. Following the log-Euclidean
approximation, slopes are the closed-form least-squares solution
V = y~ x~^T (x~ x~^T)^{-1} computed on tangent coordinates, with covariates
mean-centered so the intercept is absorbed by the mean.

Covariates handed to :func:`predict` are measured from the training covariate
mean (the fit stores ``covariate_means``); the zero vector predicts the base.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .stats import chi2_quantile, chi2_sf


class KarcherConvergenceError(RuntimeError):
    """The Karcher mean under the fit did not reach tolerance."""


@dataclass(frozen=True)
class TrajectoryFit:
    """LCGLM fit: base point, tangent slopes, and their identity transports."""

    base: np.ndarray  # (p, p) Karcher mean of the responses
    slopes: np.ndarray  # (k, p, p) tangents at base, one per covariate
    slopes_at_identity: np.ndarray  # (k, p, p) transported slopes
    residual_sse: float
    n_points: int
    covariate_means: np.ndarray = field(default=None)  # (k,)

    @property
    def dim(self) -> int:
        return self.base.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.slopes.shape[0]


def fit_lcglm(responses: np.ndarray, covariates: np.ndarray) -> TrajectoryFit:
    """Fit the LCGLM to SPD responses against (mean-centered) covariates.

    Parameters
    ----------
    responses : array, shape (n, p, p)
        SPD matrices, e.g. per-timepoint covariance estimates.
    covariates : array, shape (n,) or (n, k)
        Real covariates (time, possibly more); centered internally.
    """
    responses = np.asarray(responses, dtype=np.float64)
    covariates = np.asarray(covariates, dtype=np.float64)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    n = responses.shape[0]
    if n == 0:
        raise ValueError("responses must be non-empty")
    if covariates.shape[0] != n:
        raise ValueError(
            f"covariate count {covariates.shape[0]} != response count {n}"
        )
    k = covariates.shape[1]
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points for an identifiable fit")

    base, info = geo.karcher_mean(responses, full_output=True)
    if not info["converged"]:
        raise KarcherConvergenceError(
            f"Karcher mean did not converge (gradient norm {info['grad_norm']:.3e})"
        )

    x_mean = covariates.mean(axis=0)
    xc = covariates - x_mean
    gram = xc.T @ xc
    # duplicate covariate rows with k >= 2 make this singular; error out
    if np.linalg.matrix_rank(gram, tol=1e-10 * max(1.0, np.linalg.norm(gram))) < k:
        raise ValueError("singular centered Gram matrix: covariates are not identifiable")

    half, inv_half = geo._sqrt_and_inv_sqrt(base)
    logs_white = geo.logm_spd(geo.sym(inv_half[None] @ responses @ inv_half[None]))
    tangents = geo.sym(half[None] @ logs_white @ half[None])  # (n, p, p)

    coords = geo.vech(tangents)  # (n, q)
    coef = np.linalg.solve(gram, xc.T @ coords)  # (k, q)
    slopes = geo.unvech(coef, responses.shape[1])  # (k, p, p)
    slopes_id = geo.sym(inv_half[None] @ slopes @ inv_half[None])

    fitted_coords = xc @ coef
    resid_tangents = geo.unvech(coords - fitted_coords, responses.shape[1])
    # geodesic residual distances: predictions and responses compared on the
    # manifold, not in the tangent space
    sse = 0.0
    for i in range(n):
        pred = geo.exp_map(base, geo.unvech(fitted_coords[i], responses.shape[1]))
        sse += float(geo.geodesic_distance(pred, responses[i]) ** 2)
    del resid_tangents

    return TrajectoryFit(
        base=base,
        slopes=slopes,
        slopes_at_identity=slopes_id,
        residual_sse=sse,
        n_points=n,
        covariate_means=x_mean,
    )


def predict(fit: TrajectoryFit, x: np.ndarray | float) -> np.ndarray:
    """Evaluate Exp(base, sum_j V_j x_j); x is centered covariate units."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (fit.n_covariates,):
        raise ValueError(f"expected {fit.n_covariates} covariates, got shape {x.shape}")
    v = np.tensordot(x, fit.slopes, axes=(0, 0))
    return geo.exp_map(fit.base, v)


def trajectory_stat(fit1: TrajectoryFit, fit2: TrajectoryFit) -> float:
    """Squared distance of identity-transported slopes: ||G1 V1 - G2 V2||_F^2.

    At the identity the metric inner product is the Frobenius inner product,
    so the statistic is a plain squared Frobenius norm, summed over
    covariates.
    """
    if fit1.slopes.shape != fit2.slopes.shape:
        raise ValueError("fits have mismatched dimensions")
    diff = fit1.slopes_at_identity - fit2.slopes_at_identity
    return float(np.sum(diff * diff))


def trajectory_test(
    fit1: TrajectoryFit,
    fit2: TrajectoryFit,
    alpha: float,
    df: int | None = None,
) -> tuple[bool, float, float]:
    """Chi-square test on the trajectory statistic.

    df defaults to the number of free tangent coordinates, k * p(p+1)/2.
    Returns (reject, statistic, p_value); rejection is strict (L > quantile).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if df is None:
        df = fit1.n_covariates * geo.tangent_dim(fit1.dim)
    stat = trajectory_stat(fit1, fit2)
    p_value = chi2_sf(stat, df)
    return stat > chi2_quantile(1.0 - alpha, df), stat, p_value
