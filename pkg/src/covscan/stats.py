"""Distribution functions, Euclidean GLM baselines, and region statistics.

Everything here is Euclidean-space statistics: the chi-square helpers used to
threshold trajectory tests, the naive covariance GLM and interaction GLM that
serve as baselines, the region statistic standardization, and the
product-space likelihood-ratio statistic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .geometry import project_to_spd, vech


def chi2_sf(x: float, df: int) -> float:
    """Survival function of the chi-square distribution.

    Computed as the regularized upper incomplete gamma Q(df/2, x/2).
    """
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if x < 0:
        raise ValueError(f"x must be non-negative, got {x}")
    return float(special.gammaincc(df / 2.0, x / 2.0))


def chi2_quantile(prob: float, df: int) -> float:
    """Quantile of the chi-square distribution: chi2_sf(result, df) == 1 - prob."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if not 0.0 < prob < 1.0:
        raise ValueError(f"prob must be in (0, 1), got {prob}")
    return float(2.0 * special.gammainccinv(df / 2.0, 1.0 - prob))


@dataclass(frozen=True)
class LinearFit:
    """OLS fit of q response coordinates on k covariates (plus intercept)."""

    intercepts: np.ndarray  # (q,)
    slopes: np.ndarray  # (q, k)
    residual_variance: float
    n: int

    def __post_init__(self):
        if not (np.all(np.isfinite(self.intercepts)) and np.all(np.isfinite(self.slopes))):
            raise ValueError("non-finite fit coefficients")
        if self.residual_variance < 0:
            raise ValueError("residual variance must be non-negative")


def linear_fit(responses: np.ndarray, covariates: np.ndarray) -> LinearFit:
    """OLS of an (n, q) response block on (n, k) covariates with intercept."""
    responses = np.atleast_2d(np.asarray(responses, dtype=np.float64))
    covariates = np.asarray(covariates, dtype=np.float64)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    n, k = covariates.shape
    if responses.shape[0] != n:
        raise ValueError("responses and covariates disagree on n")
    design = np.column_stack([np.ones(n), covariates])
    coef, _, rank, _ = np.linalg.lstsq(design, responses, rcond=None)
    if rank < k + 1:
        raise ValueError("design matrix is rank-deficient (need more distinct covariate values)")
    resid = responses - design @ coef
    dof = responses.size - responses.shape[1] * (k + 1)
    sigma2 = float(np.sum(resid**2) / dof) if dof > 0 else 0.0
    return LinearFit(
        intercepts=coef[0], slopes=coef[1:].T, residual_variance=sigma2, n=n
    )


def naive_cov_glm(cov_path: list[np.ndarray] | np.ndarray, times) -> LinearFit:
    """Fit vec(C_t) = beta0 + beta * t by OLS on half-vectorized covariances."""
    times = np.asarray(times, dtype=np.float64)
    if len(np.unique(times)) < 2:
        raise ValueError("need at least 2 distinct times")
    coords = np.stack([vech(c) for c in cov_path])
    return linear_fit(coords, times)


def region_slope_stat(
    beta1: np.ndarray, beta2: np.ndarray, sigma_inverse: np.ndarray | None = None
) -> float:
    """Quadratic form (beta1 - beta2)^T Sigma^{-1} (beta1 - beta2)."""
    beta1 = np.ravel(beta1)
    beta2 = np.ravel(beta2)
    if beta1.shape != beta2.shape:
        raise ValueError("slope vectors must have matching shapes")
    d = beta1 - beta2
    if sigma_inverse is None:
        return float(d @ d)
    sigma_inverse = np.asarray(sigma_inverse)
    if sigma_inverse.shape != (d.size, d.size):
        raise ValueError("sigma_inverse shape mismatch")
    return float(d @ sigma_inverse @ d)


def euclidean_slope_test(
    fit1: LinearFit,
    fit2: LinearFit,
    noise_cov_inverse: np.ndarray | None,
    alpha: float,
) -> tuple[bool, float]:
    """Test equality of slope vectors: L = (b1-b2)^T Sigma^{-1} (b1-b2) vs chi2_q.

    Returns (reject, statistic); rejection uses the strict inequality
    L > chi2_quantile(1 - alpha, q).
    """
    if fit1.slopes.shape != fit2.slopes.shape:
        raise ValueError("fits have mismatched slope shapes")
    stat = region_slope_stat(fit1.slopes, fit2.slopes, noise_cov_inverse)
    q = fit1.slopes.size
    return stat > chi2_quantile(1.0 - alpha, q), stat


def standardize_region_stat(raw: float, edge_count: int) -> float:
    """Standardize a raw region statistic: (raw - |E(R)|) / sqrt(|E(R)|)."""
    if edge_count < 1:
        raise ValueError("edge_count must be >= 1 (singleton regions are excluded upstream)")
    return (raw - edge_count) / np.sqrt(edge_count)


# ---------------------------------------------------------------------------
# Gaussian product-space statistic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianModelPath:
    """Per-timepoint Gaussian model: times[i] carries (means[i], covs[i])."""

    times: np.ndarray  # (T,)
    means: np.ndarray  # (T, p)
    covs: np.ndarray  # (T, p, p)

    def __post_init__(self):
        if not (len(self.times) == len(self.means) == len(self.covs)):
            raise ValueError("times, means, covs must align")
        if self.means.shape[1] != self.covs.shape[1]:
            raise ValueError("mean and covariance dimensions disagree")


def gaussian_mle_path(samples_by_time: dict[float, np.ndarray], floor: float = 1e-6) -> GaussianModelPath:
    """Per-timepoint Gaussian MLE (mean, 1/m covariance), floored to SPD."""
    times = sorted(samples_by_time)
    means, covs = [], []
    for t in times:
        x = np.asarray(samples_by_time[t], dtype=np.float64)
        mu = x.mean(axis=0)
        xc = x - mu
        covs.append(project_to_spd((xc.T @ xc) / x.shape[0], floor=floor))
        means.append(mu)
    return GaussianModelPath(
        times=np.asarray(times, dtype=np.float64),
        means=np.stack(means),
        covs=np.stack(covs),
    )


def gaussian_path_loglik(samples_by_time: dict[float, np.ndarray], path: GaussianModelPath) -> float:
    """Log-likelihood of per-timepoint samples under a Gaussian model path.

    Decomposes exactly per timepoint. Log-determinants go through the
    symmetric eigendecomposition.
    """
    total = 0.0
    time_index = {float(t): i for i, t in enumerate(path.times)}
    for t, x in samples_by_time.items():
        if float(t) not in time_index:
            raise ValueError(f"timepoint {t} not covered by the model path")
        i = time_index[float(t)]
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m, p = x.shape
        w, u = np.linalg.eigh(path.covs[i])
        if w[0] <= 0:
            raise np.linalg.LinAlgError(f"singular model covariance at time {t}")
        logdet = float(np.sum(np.log(w)))
        xc = (x - path.means[i]) @ u
        quad = float(np.sum((xc**2) / w))
        total += -0.5 * (m * p * np.log(2.0 * np.pi) + m * logdet + quad)
    return total


def product_space_stat(
    data_g1: dict[float, np.ndarray],
    data_g2: dict[float, np.ndarray],
    path_g1: GaussianModelPath,
    path_g2: GaussianModelPath,
    pooled_path: GaussianModelPath,
) -> float:
    """Likelihood-ratio statistic for separate vs pooled Gaussian paths.

    Returns -2 log Lambda where Lambda is pooled-over-separate, i.e.
    2*(loglik_g1 + loglik_g2 - loglik_pooled); non-negative (up to estimation
    noise) when the per-group paths are the per-group MLEs.
    """
    ll1 = gaussian_path_loglik(data_g1, path_g1)
    ll2 = gaussian_path_loglik(data_g2, path_g2)
    pooled = {
        t: np.vstack([a for a in (data_g1.get(t), data_g2.get(t)) if a is not None])
        for t in set(data_g1) | set(data_g2)
    }
    ll_pooled = gaussian_path_loglik(pooled, pooled_path)
    return 2.0 * (ll1 + ll2 - ll_pooled)


# ---------------------------------------------------------------------------
# Interaction-GLM baseline
# ---------------------------------------------------------------------------


def sample_interaction_pairs(p: int, n_terms: int, seed: int) -> list[tuple[int, int]]:
    """Draw n_terms distinct feature pairs (i < j) uniformly at random."""
    all_pairs = [(i, j) for i in range(p) for j in range(i + 1, p)]
    if n_terms > len(all_pairs):
        raise ValueError(f"requested {n_terms} pairs but only {len(all_pairs)} exist")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(all_pairs), size=n_terms, replace=False)
    return [all_pairs[i] for i in sorted(idx)]


def interaction_glm_test(
    samples1: np.ndarray,
    times1: np.ndarray,
    samples2: np.ndarray,
    times2: np.ndarray,
    pairs: list[tuple[int, int]],
    alpha: float,
) -> tuple[bool, float] | None:
    """Slope-difference test on randomly selected pairwise interaction terms.

    Each sample is mapped to the products x_i * x_j over the given pairs; per
    group, each term is regressed on time by OLS and the slope differences
    are combined into sum(delta_c^2 / var_c) ~ chi2 with len(pairs) df under
    the null. Returns None when either group cannot support the fit (fewer
    than 3 samples, fewer than 2 distinct times, or no residual degrees of
    freedom), rather than fabricating a rate.
    """
    stat = 0.0
    slope_by_group = []
    var_by_group = []
    for x, t in ((samples1, times1), (samples2, times2)):
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if x.shape[0] < 3 or len(np.unique(t)) < 2 or x.shape[0] - 2 < 1:
            return None
        z = np.stack([x[:, i] * x[:, j] for i, j in pairs], axis=1)
        tc = t - t.mean()
        ss_t = float(tc @ tc)
        slopes = (tc @ (z - z.mean(axis=0))) / ss_t
        resid = z - z.mean(axis=0) - np.outer(tc, slopes)
        sigma2 = np.sum(resid**2, axis=0) / (x.shape[0] - 2)
        slope_by_group.append(slopes)
        var_by_group.append(sigma2 / ss_t)
    delta = slope_by_group[0] - slope_by_group[1]
    var = var_by_group[0] + var_by_group[1]
    if np.any(var <= 0):
        return None
    stat = float(np.sum(delta**2 / var))
    return stat > chi2_quantile(1.0 - alpha, len(pairs)), stat
