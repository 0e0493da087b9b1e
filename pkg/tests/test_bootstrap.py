import numpy as np
import pytest

import hlode.bootstrap as bootstrap
from conftest import make_problem
from hlode.bootstrap import (bias_correct, correction_from_estimates, inflate_variance,
                             replicate_seed)
from hlode.errors import NonConvergence, TooFewConverged
from hlode.optimizer import hybrid_fit
from hlode.toy import ToyProblem, simulate_toy


@pytest.fixture(scope="module")
def toy():
    data = simulate_toy(12, 4, 1.0, 0.5, 1.0, seed=3)
    prob = ToyProblem(data, 1.0, 0.5)
    return prob, hybrid_fit(prob, np.array([0.0])).theta


class TestInflation:
    def test_factors(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        factor = inflate_variance(np.eye(1), 10 ** 9)[0, 0]
        assert abs(factor - 1) <= 1e-9 + 1e-15
        np.testing.assert_allclose(inflate_variance(cov, 20), 1.05 * cov, rtol=1e-15)
        np.testing.assert_allclose(inflate_variance(cov, 1), 2 * cov, rtol=1e-15)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            inflate_variance(np.eye(2), 0)


class TestCorrection:
    def test_degenerate(self):
        theta = np.array([1.0, -2.0])
        bias, corr = correction_from_estimates(theta, np.tile(theta, (5, 1)), np.ones(5, bool))
        np.testing.assert_array_equal(bias, 0.0)
        np.testing.assert_array_equal(corr, theta)

    def test_formula(self):
        theta = np.array([1.0])
        est = np.array([[1.2], [1.4], [np.nan], [1.0]])
        ok = np.array([True, True, False, True])
        bias, corr = correction_from_estimates(theta, est, ok)
        assert bias[0] == pytest.approx(0.2)
        assert corr[0] == pytest.approx(0.8)

    def test_too_few(self):
        ok = np.array([True, False, False, False, False])
        with pytest.raises(TooFewConverged):
            correction_from_estimates(np.zeros(1), np.zeros((5, 1)), ok)
        with pytest.raises(TooFewConverged):
            correction_from_estimates(np.zeros(1), np.zeros((1, 1)), np.array([True]))

    def test_seeds_independent_of_order(self):
        a = np.random.default_rng(replicate_seed(5, 3)).random()
        b = np.random.default_rng(replicate_seed(5, 3)).random()
        c = np.random.default_rng(replicate_seed(5, 4)).random()
        assert a == b != c
        ss = np.random.SeedSequence(5, spawn_key=(1, 2))
        assert replicate_seed(ss, 0).spawn_key == (1, 2, 0)


class TestToyBootstrap:
    def test_deterministic(self, toy):
        prob, theta = toy
        r1 = bias_correct(prob, theta, S=6, seed=11)
        r2 = bias_correct(prob, theta, S=6, seed=11)
        np.testing.assert_array_equal(r1.estimates, r2.estimates)
        np.testing.assert_array_equal(r1.corrected, r2.corrected)
        assert r1.n_converged == 6

    def test_translation_equivariant(self, toy):
        prob, theta = toy
        shift = 2.5
        moved = ToyProblem([y + shift for y in prob.data], prob.sigma, prob.penalty)
        r0 = bias_correct(prob, theta, S=5, seed=1)
        r1 = bias_correct(moved, theta + shift, S=5, seed=1)
        np.testing.assert_allclose(r1.estimates, r0.estimates + shift, atol=1e-6)
        np.testing.assert_allclose(r1.bias, r0.bias, atol=1e-6)

    def test_toy_mhle_is_nearly_unbiased(self, toy):
        prob, theta = toy
        r = bias_correct(prob, theta, S=40, seed=2)
        # the MHLE of the intercept is unbiased, so the correction is pure noise
        assert abs(r.bias[0]) < 3 * 0.5 / np.sqrt(12 * 40) + 1e-3

    def test_failed_replicates_counted(self, toy, monkeypatch):
        prob, theta = toy
        calls = {"k": 0}
        real_fit = bootstrap.fit

        def flaky(*args, **kwargs):
            calls["k"] += 1
            if calls["k"] % 4 == 0:
                raise NonConvergence("forced")
            return real_fit(*args, **kwargs)

        monkeypatch.setattr(bootstrap, "fit", flaky)
        r = bias_correct(prob, theta, S=8, seed=0, covariance=np.eye(1))
        assert r.n_converged == 6
        assert np.isnan(r.estimates[~r.converged]).all()
        np.testing.assert_allclose(r.covariance, (1 + 1 / 6) * np.eye(1))
        expected = np.mean(r.estimates[r.converged], axis=0) - theta
        np.testing.assert_allclose(r.bias, expected, rtol=1e-12)

    def test_rejects_bad_S(self, toy):
        prob, theta = toy
        with pytest.raises(ValueError):
            bias_correct(prob, theta, S=0)


def test_hiv_smoke(spec, theta_true):
    prob = make_problem(spec, theta_true, 6, 5)
    res = hybrid_fit(prob, theta_true)
    r = bias_correct(prob, res.theta, S=2, seed=4)
    assert r.n_converged == 2
    assert np.all(np.isfinite(r.corrected))
    np.testing.assert_allclose(r.corrected, res.theta - r.bias)
