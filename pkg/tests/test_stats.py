"""Statistics tests against quadrature, bisection, and normal-equation oracles."""

import numpy as np
import pytest
from scipy import integrate, special

from covscan import stats
from covscan.geometry import vech
from conftest import random_spd


def chi2_sf_quadrature(x: float, df: int) -> float:
    """Survival function by adaptive quadrature of the chi-square density."""

    def density(u):
        return np.exp(
            (df / 2.0 - 1.0) * np.log(u) - u / 2.0
            - (df / 2.0) * np.log(2.0) - special.gammaln(df / 2.0)
        )

    if x == 0.0:
        return 1.0
    val, err = integrate.quad(density, x, np.inf, limit=400, epsabs=1e-13, epsrel=1e-11)
    assert err < 1e-10
    return val


def chi2_quantile_bisection(prob: float, df: int) -> float:
    lo, hi = 0.0, 1e4
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_sf_quadrature(mid, df) > 1.0 - prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestChi2:
    def test_sf_at_zero(self):
        for df in (1, 2, 7, 50):
            assert stats.chi2_sf(0.0, df) == 1.0

    def test_sf_matches_quadrature(self):
        for df in (1, 2, 5, 10, 23, 50):
            for x in (0.3, 1.0, 4.2, 10.0, 42.0, 99.0):
                assert abs(stats.chi2_sf(x, df) - chi2_sf_quadrature(x, df)) <= 1e-8

    def test_sf_monotone_decreasing(self):
        xs = np.linspace(0, 50, 60)
        vals = [stats.chi2_sf(float(x), 4) for x in xs]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_sf_rejects_bad_input(self):
        with pytest.raises(ValueError):
            stats.chi2_sf(-1.0, 3)
        with pytest.raises(ValueError):
            stats.chi2_sf(1.0, 0)

    def test_chi2_1_median(self):
        # median of chi2_1 is about 0.4549
        assert abs(stats.chi2_sf(0.4549, 1) - 0.5) <= 1e-3

    def test_quantile_known_values(self):
        assert abs(stats.chi2_quantile(0.5, 2) - 2.0 * np.log(2.0)) <= 1e-6
        assert abs(stats.chi2_quantile(0.95, 1) - 3.841) <= 1e-3
        assert abs(stats.chi2_quantile(0.95, 1) - chi2_quantile_bisection(0.95, 1)) <= 1e-6

    def test_quantile_round_trip(self):
        for df in (1, 3, 12, 50):
            for prob in (0.05, 0.5, 0.9, 0.999):
                x = stats.chi2_quantile(prob, df)
                assert abs(stats.chi2_sf(x, df) - (1.0 - prob)) <= 1e-9

    def test_quantile_monotone(self):
        probs = np.linspace(0.01, 0.99, 25)
        vals = [stats.chi2_quantile(float(q), 5) for q in probs]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_quantile_rejects_bad_prob(self):
        with pytest.raises(ValueError):
            stats.chi2_quantile(0.0, 3)
        with pytest.raises(ValueError):
            stats.chi2_quantile(1.0, 3)


class TestNaiveCovGlm:
    def test_constant_path_zero_slopes(self, rng):
        c = random_spd(rng, 3)
        fit = stats.naive_cov_glm([c, c, c, c], [0.0, 1.0, 2.0, 3.0])
        assert np.allclose(fit.slopes, 0.0, atol=1e-12)
        assert np.allclose(fit.intercepts, vech(c), atol=1e-12)

    def test_exact_linear_path(self, rng):
        a = vech(random_spd(rng, 3))
        b = vech(0.1 * (lambda m: 0.5 * (m + m.T))(rng.standard_normal((3, 3))))
        times = np.array([0.0, 1.0, 2.0, 3.0])
        from covscan.geometry import unvech

        path = [unvech(a + b * t) for t in times]
        fit = stats.naive_cov_glm(path, times)
        assert np.allclose(fit.slopes.ravel(), b, atol=1e-10)

    def test_matches_normal_equations_oracle(self, rng):
        times = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
        path = [random_spd(rng, 4) for _ in times]
        fit = stats.naive_cov_glm(path, times)
        # direct normal equations on the same coordinates
        y = np.stack([vech(c) for c in path])
        x = np.column_stack([np.ones(len(times)), times])
        coef = np.linalg.solve(x.T @ x, x.T @ y)
        assert np.max(np.abs(fit.slopes.ravel() - coef[1])) <= 1e-10 * max(
            1.0, np.max(np.abs(coef[1]))
        )
        assert np.max(np.abs(fit.intercepts - coef[0])) <= 1e-10 * max(
            1.0, np.max(np.abs(coef[0]))
        )

    def test_identical_times_rejected(self, rng):
        c = random_spd(rng, 2)
        with pytest.raises(ValueError):
            stats.naive_cov_glm([c, c], [1.0, 1.0])


class TestSlopeTests:
    def test_identical_fits_no_rejection(self, rng):
        path = [random_spd(rng, 3) for _ in range(4)]
        fit = stats.naive_cov_glm(path, [0, 1, 2, 3])
        reject, stat = stats.euclidean_slope_test(fit, fit, None, alpha=0.05)
        assert stat == 0.0 and not reject

    def test_identity_noise_is_squared_norm(self, rng):
        b1 = rng.standard_normal(6)
        b2 = rng.standard_normal(6)
        assert abs(stats.region_slope_stat(b1, b2) - np.sum((b1 - b2) ** 2)) < 1e-12

    def test_quadratic_form_oracle(self, rng):
        b1 = rng.standard_normal(5)
        b2 = rng.standard_normal(5)
        siginv = random_spd(rng, 5)
        expected = float((b1 - b2) @ siginv @ (b1 - b2))
        assert abs(stats.region_slope_stat(b1, b2, siginv) - expected) < 1e-12

    def test_null_calibration(self):
        # Euclidean responses with known noise: rejection rate ~ alpha
        rng = np.random.default_rng(7)
        times = np.array([0.0, 1.0, 2.0, 3.0])
        tc = times - times.mean()
        q = 6
        sigma = 0.7
        var_diff = 2.0 * sigma**2 / float(tc @ tc)
        siginv = np.eye(q) / var_diff
        rejections = 0
        runs = 500
        for _ in range(runs):
            fits = []
            for _g in range(2):
                y = 1.0 + 0.3 * times[:, None] + sigma * rng.standard_normal((4, q))
                fits.append(stats.linear_fit(y, times))
            reject, _ = stats.euclidean_slope_test(fits[0], fits[1], siginv, alpha=0.05)
            rejections += reject
        rate = rejections / runs
        assert 0.02 <= rate <= 0.08  # 3 binomial SE around 0.05

    def test_standardize_values(self):
        assert stats.standardize_region_stat(4.0, 4) == 0.0
        assert stats.standardize_region_stat(8.0, 4) == 2.0
        with pytest.raises(ValueError):
            stats.standardize_region_stat(1.0, 0)

    def test_standardized_chi2_moments(self):
        rng = np.random.default_rng(11)
        n = 10**5
        k = 9
        draws = rng.chisquare(k, size=n)
        z = np.array([stats.standardize_region_stat(float(d), k) for d in draws[:100]])
        # vectorized equivalent for the full sample
        zfull = (draws - k) / np.sqrt(k)
        assert np.allclose(z, zfull[:100])
        assert abs(zfull.mean()) <= 3.0 * np.sqrt(2.0 / n)
        assert abs(zfull.var() - 2.0) <= 0.1


class TestProductSpaceStat:
    def test_identical_groups_zero(self, rng):
        x = rng.standard_normal((40, 3))
        data = {0.0: x, 1.0: x + 0.0}
        path = stats.gaussian_mle_path({0.0: np.vstack([x, x]), 1.0: np.vstack([x, x])})
        # identical data in both groups: group MLE == pooled MLE, statistic 0
        s = stats.product_space_stat(data, data, path, path, path)
        assert abs(s) < 1e-8

    def test_matches_classical_two_sample_lrt(self, rng):
        # single timepoint, mean shift only: closed-form Wilks statistic
        n1, n2, p = 120, 150, 2
        x1 = rng.standard_normal((n1, p))
        x2 = rng.standard_normal((n2, p)) + np.array([0.8, -0.2])
        d1, d2 = {0.0: x1}, {0.0: x2}
        path1 = stats.gaussian_mle_path(d1)
        path2 = stats.gaussian_mle_path(d2)
        pooled = stats.gaussian_mle_path({0.0: np.vstack([x1, x2])})
        got = stats.product_space_stat(d1, d2, path1, path2, pooled)

        def mle_cov(x):
            xc = x - x.mean(axis=0)
            return (xc.T @ xc) / x.shape[0]

        n12 = n1 + n2
        expected = (
            n12 * np.linalg.slogdet(mle_cov(np.vstack([x1, x2])))[1]
            - n1 * np.linalg.slogdet(mle_cov(x1))[1]
            - n2 * np.linalg.slogdet(mle_cov(x2))[1]
        )
        assert abs(got - expected) <= 1e-8 * max(1.0, abs(expected))

    def test_nonnegative_at_mle(self, rng):
        for _ in range(5):
            x1 = rng.standard_normal((30, 3)) * 1.5
            x2 = rng.standard_normal((25, 3))
            d1 = {0.0: x1[:15], 1.0: x1[15:]}
            d2 = {0.0: x2[:12], 1.0: x2[12:]}
            pooled = {
                0.0: np.vstack([x1[:15], x2[:12]]),
                1.0: np.vstack([x1[15:], x2[12:]]),
            }
            s = stats.product_space_stat(
                d1,
                d2,
                stats.gaussian_mle_path(d1),
                stats.gaussian_mle_path(d2),
                stats.gaussian_mle_path(pooled),
            )
            assert s >= -1e-8

    def test_loglik_decomposes_per_timepoint(self, rng):
        x0 = rng.standard_normal((20, 2))
        x1 = rng.standard_normal((25, 2))
        data = {0.0: x0, 1.0: x1}
        path = stats.gaussian_mle_path(data)
        total = stats.gaussian_path_loglik(data, path)
        parts = stats.gaussian_path_loglik({0.0: x0}, path) + stats.gaussian_path_loglik(
            {1.0: x1}, path
        )
        assert abs(total - parts) < 1e-10

    def test_uncovered_timepoint_rejected(self, rng):
        x = rng.standard_normal((10, 2))
        path = stats.gaussian_mle_path({0.0: x})
        with pytest.raises(ValueError):
            stats.gaussian_path_loglik({2.0: x}, path)


class TestInteractionGlm:
    def test_pair_sampling_deterministic(self):
        a = stats.sample_interaction_pairs(10, 5, seed=3)
        b = stats.sample_interaction_pairs(10, 5, seed=3)
        assert a == b
        assert len(set(a)) == 5
        assert all(i < j for i, j in a)

    def test_too_many_pairs_rejected(self):
        with pytest.raises(ValueError):
            stats.sample_interaction_pairs(3, 4, seed=0)

    def test_not_applicable_on_tiny_groups(self, rng):
        x = rng.standard_normal((2, 4))
        t = np.array([0.0, 1.0])
        out = stats.interaction_glm_test(x, t, x, t, [(0, 1)], alpha=0.05)
        assert out is None

    def test_detects_planted_interaction_difference(self):
        rng = np.random.default_rng(5)
        n = 400
        times = np.tile(np.array([0.0, 1.0, 2.0, 3.0]), n // 4)
        # group 2's (0,1) covariance grows with time; group 1 static
        x1 = rng.standard_normal((n, 3))
        x2 = rng.standard_normal((n, 3))
        mix = 0.45 * times
        x2[:, 1] = mix * x2[:, 0] + np.sqrt(np.maximum(1 - mix**2, 0.05)) * x2[:, 1]
        out = stats.interaction_glm_test(x1, times, x2, times, [(0, 1)], alpha=0.05)
        assert out is not None
        reject, stat = out
        assert reject and stat > stats.chi2_quantile(0.95, 1)
