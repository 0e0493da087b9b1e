import numpy as np
import pytest

from conftest import QuadraticProblem, make_problem
from hlode.errors import SingularInnerBlock
from hlode.hlik import hl_subject, numeric_block_derivatives
from hlode.inference import (_schur_hessian, confidence_intervals, profile_random_effects,
                             sandwich, sandwich_covariance, subject_hessian, subject_score,
                             subject_scores_hessians, wald_contrast, wald_statistic)


class TestWald:
    def test_reported_contrast(self):
        r = wald_statistic(0.242, 5.16e-3)
        assert r.statistic == pytest.approx(3.37, abs=0.01)
        assert r.p_value == pytest.approx(7e-4, abs=1e-4)

    def test_contrast_vector(self):
        theta = np.array([1.0, 0.3, 0.542])
        cov = np.diag([1.0, 2e-3, 3.16e-3])
        r = wald_contrast(theta, cov, [0, -1, 1])
        assert r.estimate == pytest.approx(0.242)
        assert r.variance == pytest.approx(5.16e-3)

    def test_errors(self):
        with pytest.raises(ValueError):
            wald_contrast(np.ones(3), np.eye(3), np.zeros(3))
        with pytest.raises(ValueError):
            wald_contrast(np.ones(3), np.eye(3), np.ones(2))
        with pytest.raises(ValueError):
            wald_statistic(1.0, 0.0)

    def test_unit_contrast_matches_interval(self):
        theta = np.array([0.4, -1.2])
        cov = np.array([[0.04, 0.01], [0.01, 0.09]])
        iv = confidence_intervals(theta, cov)[1]
        r = wald_contrast(theta, cov, [0, 1])
        assert iv.lower == pytest.approx(r.estimate - 1.959964 * np.sqrt(r.variance), abs=1e-6)
        assert iv.upper == pytest.approx(r.estimate + 1.959964 * np.sqrt(r.variance), abs=1e-6)


class TestIntervals:
    def test_standard_normal(self):
        iv = confidence_intervals([0.0], [[1.0]], 0.95)[0]
        assert iv.lower == pytest.approx(-1.96, abs=1e-3)
        assert iv.upper == pytest.approx(1.96, abs=1e-3)

    def test_zero_se(self):
        iv = confidence_intervals([2.5], [[0.0]])[0]
        assert iv.lower == iv.upper == 2.5

    def test_natural_scale(self):
        centre, half = 4.04, 0.05
        se = half / 1.959964
        iv = confidence_intervals([centre], [[se ** 2]], names=["lambda"])[0]
        est, lo, hi = iv.natural
        assert iv.name == "lambda"
        assert round(lo, 1) == 54.1 and round(hi, 1) == 59.7
        assert np.exp(3.99) == pytest.approx(54.1, abs=0.05)
        assert np.exp(4.09) == pytest.approx(59.7, abs=0.05)
        assert lo < est < hi

    def test_level_checked(self):
        with pytest.raises(ValueError):
            confidence_intervals([0.0], [[1.0]], level=1.0)


class TestSandwichArithmetic:
    def test_iid_mean(self):
        y = np.random.default_rng(0).normal(size=25)
        mu = y.mean()
        sw = sandwich_covariance((y - mu)[:, None], -np.ones((25, 1, 1)))
        assert sw.covariance[0, 0] == pytest.approx(np.mean((y - mu) ** 2) / 25, rel=1e-10)

    def test_duplication_halves(self):
        rng = np.random.default_rng(1)
        u = rng.normal(size=(10, 3))
        H = -np.stack([np.eye(3) + 0.1 * np.outer(v, v) for v in rng.normal(size=(10, 3))])
        one = sandwich_covariance(u, H).covariance
        two = sandwich_covariance(np.tile(u, (2, 1)), np.tile(H, (2, 1, 1))).covariance
        np.testing.assert_allclose(two, one / 2, rtol=1e-12)

    def test_reorder_invariant(self):
        rng = np.random.default_rng(2)
        u = rng.normal(size=(8, 2))
        H = -np.stack([np.eye(2) * (1 + k) for k in range(8)])
        perm = rng.permutation(8)
        np.testing.assert_allclose(sandwich_covariance(u[perm], H[perm]).covariance,
                                   sandwich_covariance(u, H).covariance, rtol=1e-12)

    def test_symmetric_psd(self):
        rng = np.random.default_rng(3)
        u = rng.normal(size=(12, 3))
        H = -np.stack([np.eye(3) + 0.3 * np.outer(v, v) for v in rng.normal(size=(12, 3))])
        cov = sandwich_covariance(u, H).covariance
        np.testing.assert_array_equal(cov, cov.T)
        assert np.all(np.linalg.eigvalsh(cov) >= -1e-15)


class TestQuadraticScores:
    def test_iid_mean_pipeline(self):
        y = np.random.default_rng(4).normal(size=15)
        prob = QuadraticProblem(np.ones((15, 1, 1)), y[:, None], R=0)
        theta = np.array([y.mean()])
        sw = sandwich(prob, theta)
        # the curvature is differenced, hence a looser tolerance than the pure arithmetic
        assert sw.covariance[0, 0] == pytest.approx(np.mean((y - y.mean()) ** 2) / 15, rel=1e-6)

    def test_no_random_effects_score(self):
        rng = np.random.default_rng(5)
        M = np.stack([np.diag([2.0, 3.0])] * 2)
        m = rng.normal(size=(2, 2))
        prob = QuadraticProblem(M, m, R=0)
        theta = np.array([0.1, 0.2])
        for i in range(2):
            np.testing.assert_allclose(subject_score(prob, theta, np.zeros((2, 0)), i),
                                       -M[i] @ (theta - m[i]), rtol=1e-7)

    def test_no_cross_dependence(self):
        # beta does not interact with a: its profile curvature is plain l_beta_beta
        M = np.array([[[4.0, 0.0, 0.0], [0.0, 2.0, 0.5], [0.0, 0.5, 1.0]]])
        prob = QuadraticProblem(M, np.zeros((1, 3)), R=1, tau=0.5)
        theta = np.array([0.1, 0.2, -0.3])
        a = profile_random_effects(prob, theta)
        H = subject_hessian(prob, theta, a, 0)
        np.testing.assert_allclose(H[1:, 1:], -M[0, 1:, 1:], rtol=1e-6)

    def test_singular_inner_block(self):
        L = np.array([[4.0, 1.0], [1.0, -1.0]])
        with pytest.raises(SingularInnerBlock):
            _schur_hessian(L, 1, np.array([0.5]))


@pytest.fixture(scope="module")
def single(spec, theta_true):
    """One simulated subject with its random effects profiled near the truth."""
    prob = make_problem(spec, theta_true, 1, 21)
    theta = theta_true + 0.02
    return prob, theta, profile_random_effects(prob, theta)


class TestHivScores:
    def test_profile_gradient_zero(self, single):
        prob, theta, a = single
        d = numeric_block_derivatives(prob, theta, a, grad_vars="a", hess_vars="none")
        assert np.max(np.abs(d.hl_grad(theta[:3], a, prob.tau)[:, :3])) <= 1e-5

    def test_envelope_score(self, single):
        """The score (b held fixed) equals the total derivative of the profile."""
        prob, theta, a = single
        u = subject_score(prob, theta, a, 0)
        h = 1e-4
        for j in range(theta.size):
            vals = []
            for s in (1, -1):
                th = theta.copy()
                th[j] += s * h
                aa = profile_random_effects(prob, th, a + (th - theta)[:3])
                vals.append(hl_subject(prob, th, aa[0], 0))
            assert (vals[0] - vals[1]) / (2 * h) == pytest.approx(u[j], rel=1e-3, abs=1e-3)

    def test_hessian_vs_profile_differences(self, single):
        """Second differences of theta -> max_b hl_i match the Schur-complement Hessian."""
        prob, theta, a = single
        H = subject_hessian(prob, theta, a, 0)
        q, h = theta.size, 2e-3

        def p(th):
            aa = profile_random_effects(prob, th, a + (th - theta)[:3])
            return hl_subject(prob, th, aa[0], 0)

        f0 = p(theta)
        E = np.eye(q) * h
        brute = np.empty((q, q))
        for j in range(q):
            brute[j, j] = (p(theta + E[j]) - 2 * f0 + p(theta - E[j])) / h ** 2
            for k in range(j):
                brute[j, k] = brute[k, j] = (p(theta + E[j] + E[k]) - p(theta + E[j] - E[k])
                                             - p(theta - E[j] + E[k])
                                             + p(theta - E[j] - E[k])) / (4 * h ** 2)
        np.testing.assert_allclose(H, brute, atol=1e-3 * np.abs(H).max())

    def test_mean_score_vanishes(self, fitted_medium):
        prob, res = fitted_medium
        a = profile_random_effects(prob, res.theta, res.a)
        u, _, _ = subject_scores_hessians(prob, res.theta, a)
        assert np.max(np.abs(u.mean(axis=0))) < 1e-3

    def test_sandwich_shape(self, fitted_medium):
        prob, res = fitted_medium
        sw = sandwich(prob, res.theta, res.a)
        assert sw.covariance.shape == (6, 6)
        np.testing.assert_array_equal(sw.covariance, sw.covariance.T)
        assert np.all(sw.se > 0) and np.all(sw.se < 1)
        assert sw.excluded == []
