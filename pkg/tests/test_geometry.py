"""Geometry tests: closed-form cases plus independent numerical oracles.

Oracles used here deliberately avoid the library's own code paths:
distance via generalized eigenvalues, the two-point mean via golden-section
search along the connecting geodesic, and the SPD projection via a direct
eigenvalue clip.
"""

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from covscan import geometry as geo
from conftest import random_spd, random_sym


def distance_oracle(p: np.ndarray, q: np.ndarray) -> float:
    """d(p,q) from the generalized eigenvalues of (q, p).

    The affine-invariant distance equals sqrt(sum log^2 lambda_i) where
    lambda_i solve q x = lambda p x; no matrix square roots involved.
    """
    w = scipy.linalg.eigvalsh(q, p)
    return float(np.sqrt(np.sum(np.log(w) ** 2)))


def geodesic_point(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Point at parameter t on the geodesic from a to b, via the exp/log maps."""
    return geo.exp_map(a, t * geo.log_map(a, b))


def golden_section_mean(a: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Two-point Karcher mean by 1-D search along the connecting geodesic.

    The mean of two points lies on their geodesic, so minimizing
    f(t) = d(g(t),a)^2 + d(g(t),b)^2 over t in [0,1] is an exact oracle.
    """
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0

    def f(t: float) -> float:
        g = geodesic_point(a, b, t)
        return distance_oracle(g, a) ** 2 + distance_oracle(g, b) ** 2

    lo, hi = 0.0, 1.0
    c = hi - inv_phi * (hi - lo)
    d = lo + inv_phi * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - inv_phi * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv_phi * (hi - lo)
            fd = f(d)
    return geodesic_point(a, b, 0.5 * (lo + hi))


class TestExpLog:
    def test_exp_zero_tangent_is_base(self, rng):
        base = random_spd(rng, 4)
        assert np.allclose(geo.exp_map(base, np.zeros((4, 4))), base)

    def test_exp_at_identity_is_matrix_exp(self):
        v = np.log(2.0) * np.eye(2)
        assert np.allclose(geo.exp_map(np.eye(2), v), 2.0 * np.eye(2), atol=1e-14)

    def test_log_at_identity_is_matrix_log(self):
        assert np.allclose(geo.log_map(np.eye(2), np.e * np.eye(2)), np.eye(2), atol=1e-14)

    def test_log_of_base_is_zero(self, rng):
        p = random_spd(rng, 5)
        assert np.linalg.norm(geo.log_map(p, p)) < 1e-12

    def test_round_trip_random_dims(self, rng):
        # exp(log(q)) across dims 2..8
        for _ in range(200):
            p_dim = int(rng.integers(2, 9))
            base = random_spd(rng, p_dim, spread=1.5)
            q = random_spd(rng, p_dim, spread=1.5)
            q_rt = geo.exp_map(base, geo.log_map(base, q))
            assert np.linalg.norm(q_rt - q) <= 1e-10 * np.linalg.norm(q)

    def test_tangent_round_trip(self, rng):
        # log(exp(v)) on random 3x3 pairs
        for _ in range(200):
            base = random_spd(rng, 3)
            v = random_sym(rng, 3)
            v_rt = geo.log_map(base, geo.exp_map(base, v))
            assert np.linalg.norm(v_rt - v) <= 1e-10 * max(1.0, np.linalg.norm(v))

    def test_dimension_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            geo.exp_map(random_spd(rng, 3), np.zeros((4, 4)))


class TestDistance:
    def test_distance_to_self_zero(self, rng):
        p = random_spd(rng, 4)
        assert geo.geodesic_distance(p, p) < 1e-12

    def test_identity_to_scaled_identity(self):
        # log(e * I_2) = I_2, so d = sqrt(tr I_2) = sqrt(2)
        d = geo.geodesic_distance(np.eye(2), np.e * np.eye(2))
        assert abs(d - np.sqrt(2.0)) <= 1e-12

    def test_matches_generalized_eigenvalue_oracle(self, rng):
        for _ in range(50):
            p = random_spd(rng, 5)
            q = random_spd(rng, 5)
            assert abs(geo.geodesic_distance(p, q) - distance_oracle(p, q)) < 1e-10

    def test_symmetry(self, rng):
        for _ in range(20):
            p, q = random_spd(rng, 4), random_spd(rng, 4)
            assert abs(geo.geodesic_distance(p, q) - geo.geodesic_distance(q, p)) < 1e-10

    def test_affine_invariance(self, rng):
        for _ in range(20):
            p, q = random_spd(rng, 4), random_spd(rng, 4)
            g = rng.standard_normal((4, 4)) + 0.1 * np.eye(4)
            d0 = geo.geodesic_distance(p, q)
            d1 = geo.geodesic_distance(g.T @ p @ g, g.T @ q @ g)
            assert abs(d0 - d1) <= 1e-8 * max(1.0, d0)

    @given(st.integers(0, 10_000), st.integers(2, 6))
    @settings(max_examples=40, deadline=None)
    def test_distance_axioms(self, seed, dim):
        r = np.random.default_rng(seed)
        p, q = random_spd(r, dim), random_spd(r, dim)
        d = geo.geodesic_distance(p, q)
        assert d >= 0.0
        assert abs(d - geo.geodesic_distance(q, p)) < 1e-9
        if d < 1e-12:
            assert np.allclose(p, q, atol=1e-10)


class TestInnerProductAndTransport:
    def test_inner_product_at_identity_is_frobenius(self, rng):
        u, v = random_sym(rng, 4), random_sym(rng, 4)
        assert abs(geo.inner_product(np.eye(4), u, v) - np.sum(u * v)) < 1e-12

    def test_inner_product_symmetric_positive(self, rng):
        b = random_spd(rng, 4)
        u, v = random_sym(rng, 4), random_sym(rng, 4)
        assert abs(geo.inner_product(b, u, v) - geo.inner_product(b, v, u)) < 1e-10
        assert geo.inner_product(b, u, u) > 0.0

    def test_transport_to_same_point_is_identity(self, rng):
        p = random_spd(rng, 4)
        w = random_sym(rng, 4)
        assert np.allclose(geo.parallel_transport(p, p, w), w, atol=1e-12)

    def test_transport_isometry(self, rng):
        for _ in range(30):
            p, q = random_spd(rng, 5), random_spd(rng, 5)
            w = random_sym(rng, 5)
            moved = geo.parallel_transport(p, q, w)
            n0 = geo.inner_product(p, w, w)
            n1 = geo.inner_product(q, moved, moved)
            assert abs(n0 - n1) <= 1e-8 * max(1.0, n0)

    def test_transport_preserves_angles(self, rng):
        for _ in range(10):
            p, q = random_spd(rng, 4), random_spd(rng, 4)
            w1, w2 = random_sym(rng, 4), random_sym(rng, 4)
            m1 = geo.parallel_transport(p, q, w1)
            m2 = geo.parallel_transport(p, q, w2)
            cos0 = geo.inner_product(p, w1, w2) / (geo.norm(p, w1) * geo.norm(p, w2))
            cos1 = geo.inner_product(q, m1, m2) / (geo.norm(q, m1) * geo.norm(q, m2))
            assert abs(cos0 - cos1) <= 1e-8

    def test_transport_to_identity_matches_general_formula(self, rng):
        p = random_spd(rng, 5)
        w = random_sym(rng, 5)
        direct = geo.transport_to_identity(p, w)
        general = geo.parallel_transport(p, np.eye(5), w)
        assert np.allclose(direct, general, atol=1e-10)


class TestKarcherMean:
    def test_single_point(self, rng):
        a = random_spd(rng, 3)
        assert np.allclose(geo.karcher_mean(a[None]), a, atol=1e-12)

    def test_repeated_point(self, rng):
        a = random_spd(rng, 3)
        assert np.allclose(geo.karcher_mean(np.stack([a, a])), a, atol=1e-10)

    def test_commuting_pair_geometric_mean(self):
        pts = np.stack([np.eye(2), np.e**2 * np.eye(2)])
        mean = geo.karcher_mean(pts)
        assert np.allclose(mean, np.e * np.eye(2), atol=1e-8)

    def test_two_point_mean_matches_golden_section_oracle(self, rng):
        a, b = random_spd(rng, 4), random_spd(rng, 4)
        mean = geo.karcher_mean(np.stack([a, b]))
        oracle = golden_section_mean(a, b)
        assert np.linalg.norm(mean - oracle) <= 1e-6 * np.linalg.norm(oracle)

    def test_gradient_norm_at_convergence(self, rng):
        pts = np.stack([random_spd(rng, 4) for _ in range(7)])
        mean, info = geo.karcher_mean(pts, full_output=True)
        assert info["converged"]
        half, inv_half = geo._sqrt_and_inv_sqrt(mean)
        logs = geo.logm_spd(geo.sym(inv_half[None] @ pts @ inv_half[None]))
        grad = geo.sym(half @ logs.sum(axis=0) @ half)
        assert np.linalg.norm(grad) <= 1e-9 * len(pts)

    def test_congruence_equivariance(self, rng):
        # mean(g^T y g) == g^T mean(y) g under the affine-invariant metric
        pts = np.stack([random_spd(rng, 3) for _ in range(5)])
        g = rng.standard_normal((3, 3)) + 0.2 * np.eye(3)
        moved = np.stack([g.T @ y @ g for y in pts])
        m0 = geo.karcher_mean(pts, tol=1e-12 * len(pts))
        m1 = geo.karcher_mean(moved, tol=1e-12 * len(moved))
        assert np.allclose(g.T @ m0 @ g, m1, atol=1e-7 * np.linalg.norm(m1))

    def test_non_convergence_flagged(self, rng):
        pts = np.stack([random_spd(rng, 4) for _ in range(6)])
        _, info = geo.karcher_mean(pts, max_iter=1, full_output=True)
        assert not info["converged"]
        with pytest.warns(geo.KarcherConvergenceWarning):
            geo.karcher_mean(pts, max_iter=1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            geo.karcher_mean(np.zeros((0, 3, 3)))


class TestProjectToSpd:
    def test_already_pd_unchanged(self, rng):
        a = random_spd(rng, 4) + np.eye(4)
        assert geo.project_to_spd(a, floor=1e-6) is a or np.array_equal(
            geo.project_to_spd(a, floor=1e-6), a
        )

    def test_indefinite_diagonal(self):
        s = np.diag([1.0, -1.0])
        out = geo.project_to_spd(s, floor=1e-6)
        w = np.linalg.eigvalsh(out)
        assert w[0] >= 1e-6
        # negative eigenvalue clipped to 0, then the eps ridge added to both
        assert abs(out[0, 0] - (1.0 + w[0])) < 1e-12
        assert abs(out[0, 1]) < 1e-15

    def test_matches_eigenvalue_clip_oracle(self, rng):
        # rank-deficient sample covariance: n < p
        x = rng.standard_normal((3, 6))
        s = np.cov(x.T)
        out = geo.project_to_spd(s, floor=1e-6)
        w, u = np.linalg.eigh(s)
        # result must be the eigenvalue clip plus a uniform ridge from the
        # documented ladder eps in {1e-8, 1e-7, ...}, the first that works
        for k in range(6):
            eps = 1e-8 * 10.0**k
            oracle = (u * (np.maximum(w, 0.0) + eps)) @ u.T
            if np.linalg.eigvalsh(oracle)[0] >= 1e-6:
                break
        assert np.allclose(out, oracle, atol=1e-12)
        assert np.linalg.eigvalsh(out)[0] >= 1e-6

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            geo.project_to_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestVech:
    @given(st.integers(0, 10_000), st.integers(1, 7))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_and_norm(self, seed, dim):
        r = np.random.default_rng(seed)
        a = random_sym(r, dim)
        v = geo.vech(a)
        assert v.shape == (dim * (dim + 1) // 2,)
        assert np.allclose(geo.unvech(v), a, atol=1e-12)
        # sqrt(2) off-diagonal scaling makes coordinate norm == Frobenius norm
        assert abs(np.dot(v, v) - np.sum(a * a)) < 1e-10

    def test_tangent_dim(self):
        assert geo.tangent_dim(5) == 15
