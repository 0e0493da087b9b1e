import numpy as np
import pytest

from hlode.errors import ConfigError, DomainError
from hlode.hlik import PenaltyConfig
from hlode.model import (CANONICAL, REFERENCE_TRUE, HivProblem, ModelSpec, SubjectData,
                         link_to_natural, observe_transform, standard_design,
                         read_dataset, simulate_dataset, simulate_subject, subject_loglik,
                         write_dataset)
from hlode.ode import HIV_SYSTEM, hiv_equilibrium, integrate
from hlode.problem import LOG_2PI


def _baseline(spec, theta, z=(0, 0)):
    """Equilibrium state at t = 0 for a subject with zero random effects."""
    alpha, beta = spec.layout.split(theta)
    pre, _ = spec.natural_arrays(alpha[None], beta[None], np.zeros((1, 2)))
    return hiv_equilibrium(pre[0])


class TestModelSpec:
    def test_default_layout(self, spec):
        assert spec.layout.alpha_names == ("lambda", "mu_Tstar", "pi")
        assert spec.layout.beta_names == ("gamma0", "beta1", "beta2")

    def test_estimated_sigma_enters_beta(self):
        s = ModelSpec(sigma_estimated=(1, 2))
        assert s.layout.beta_names[-2:] == ("log_sigma1", "log_sigma2")
        th = s.theta_from_values(REFERENCE_TRUE)
        assert th[-1] == pytest.approx(np.log(0.5))

    def test_every_parameter_once(self, spec):
        names = spec.layout.names + tuple(spec.fixed)
        assert sorted(names) == sorted(CANONICAL)

    @pytest.mark.parametrize("kw,field", [
        ({"random_effects": ("lambda", "nope")}, "random_effects"),
        ({"fixed": {"lambda": 1.0}}, "fixed"),
        ({"markers": (1, 4)}, "markers"),
        ({"sigma": {1: 0.5, 2: 0.5}}, "sigma"),
        ({"detection_limits": {4: 1.7}}, "detection_limits"),
    ])
    def test_validation_names_field(self, kw, field):
        with pytest.raises(ConfigError) as exc:
            ModelSpec(**kw).validate()
        assert exc.value.field == field

    def test_values_round_trip(self, spec, theta_true):
        vals = spec.values_from_theta(theta_true)
        np.testing.assert_array_equal(spec.theta_from_values(vals), theta_true)


class TestLink:
    def test_zero_is_one(self):
        spec = ModelSpec(fixed={"mu_V": 0.0, "mu_T": 0.0})
        theta = np.zeros(spec.layout.q)
        p = link_to_natural(spec, theta, np.zeros(3))
        np.testing.assert_allclose(p.as_array(), 1.0)

    def test_treatment_shifts_gamma(self, spec, theta_true):
        p = link_to_natural(spec, theta_true, theta_true[:3], z=(1, 0), time=1.0)
        assert p.gamma == pytest.approx(np.exp(-4.10), rel=1e-14)

    def test_no_treatment_before_zero(self, spec, theta_true):
        p = link_to_natural(spec, theta_true, theta_true[:3], z=(1, 0), time=-1.0)
        assert p.gamma == pytest.approx(np.exp(-3.00), rel=1e-14)


class TestObserve:
    def test_log_viral_load(self):
        assert observe_transform((1, 1, 1000), 1) == pytest.approx(3.0)

    def test_total_cd4(self):
        assert observe_transform((10, 6, 1), 2) == pytest.approx(2.0)

    def test_infected_cd4(self):
        assert observe_transform((1, 81, 1), 3) == pytest.approx(3.0)

    def test_nonpositive_viral_load(self):
        with pytest.raises(DomainError):
            observe_transform((1, 1, 0), 1)


class TestSubjectLoglik:
    def test_zero_residual(self, theta_true):
        spec = ModelSpec(sigma={1: 1.0, 2: 1.0, 3: 1.0})
        phi = np.log10(_baseline(spec, theta_true)[2])
        d = SubjectData("1", [0.0], [1], [phi], [False])
        assert subject_loglik(spec, theta_true, theta_true[:3], d) == pytest.approx(
            -0.5 * LOG_2PI, abs=1e-9)

    def test_censored_at_prediction(self, theta_true):
        phi = np.log10(_baseline(ModelSpec(), theta_true)[2])
        spec = ModelSpec(detection_limits={1: phi})
        d = SubjectData("1", [0.0], [1], [phi], [True])
        assert subject_loglik(spec, theta_true, theta_true[:3], d) == pytest.approx(
            np.log(0.5), abs=1e-9)

    def test_two_residuals(self, spec, theta_true):
        T, Ts, V = _baseline(spec, theta_true)
        y = [np.log10(V) + 0.5, (T + Ts) ** 0.25 - 0.5]
        d = SubjectData("1", [0.0, 0.0], [1, 2], y, [False, False])
        expected = -2 * 0.5 * np.log(2 * np.pi * 0.25) - (0.25 + 0.25) / (2 * 0.25)
        assert subject_loglik(spec, theta_true, theta_true[:3], d) == pytest.approx(
            expected, abs=1e-8)

    def test_censored_term_monotone_in_limit(self, theta_true):
        phi = np.log10(_baseline(ModelSpec(), theta_true)[2])
        vals = []
        for d_m in (phi - 3, phi, phi + 3):
            spec = ModelSpec(detection_limits={1: d_m})
            d = SubjectData("1", [0.0], [1], [d_m], [True])
            vals.append(subject_loglik(spec, theta_true, theta_true[:3], d))
        assert vals[0] < vals[1] < vals[2] < 0
        assert vals[2] > -1e-8

    def test_infeasible_point_is_minus_inf(self, spec, theta_true):
        d = SubjectData("1", [0.0], [1], [3.0], [False])
        a = theta_true[:3].copy()
        a[0] = -5.0  # production far below the infection threshold
        assert subject_loglik(spec, theta_true, a, d) == -np.inf

    def test_richardson_consistency(self, tiny_problem, theta_true):
        rng = np.random.default_rng(0)
        x0 = np.concatenate([theta_true[:3] + 0.05, theta_true[3:]])

        def f(x):
            return tiny_problem.loglik_points([0], x[None, :3], x[None, 3:])[0]

        for _ in range(3):
            u = rng.standard_normal(6)
            u /= np.linalg.norm(u)
            d = [(f(x0 + h * u) - f(x0 - h * u)) / (2 * h) for h in (1e-4, 5e-5)]
            assert d[0] == pytest.approx(d[1], rel=1e-4)


class TestSimulation:
    def test_noiseless_matches_trajectory(self, theta_true):
        spec = ModelSpec(sigma={1: 0.0, 2: 0.0, 3: 0.0})
        design = standard_design(2)[0]
        d1 = simulate_subject(spec, theta_true, np.zeros(3), design, 1)
        d2 = simulate_subject(spec, theta_true, np.zeros(3), design, 2)
        np.testing.assert_array_equal(d1.values, d2.values)
        alpha, beta = spec.layout.split(theta_true)
        pre, post = spec.natural_arrays(alpha[None], beta[None], np.array([[1.0, 0.0]]))
        t = np.unique(design.times)
        states = integrate(HIV_SYSTEM, post[0], hiv_equilibrium(pre[0]), t).states
        np.testing.assert_allclose(d1.values[:10], np.log10(states[:, 2]), rtol=1e-12)
        np.testing.assert_allclose(d1.values[10:20], (states[:, 0] + states[:, 1]) ** 0.25,
                                   rtol=1e-12)

    def test_same_seed_identical(self, spec, theta_true):
        design = standard_design(2)[1]
        a = simulate_subject(spec, theta_true, [0.2] * 3, design, 5)
        b = simulate_subject(spec, theta_true, [0.2] * 3, design, 5)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.z == b.z == (0, 1)

    def test_default_design_size(self, spec, theta_true):
        subjects = simulate_dataset(spec, theta_true, [0.2] * 3, standard_design(100), 1)
        assert len(subjects) == 100
        assert all(len(s) == 30 for s in subjects)
        assert all(np.sum(s.markers == m) == 10 for s in subjects for m in (1, 2, 3))
        assert sum(s.z == (1, 0) for s in subjects) == 50

    def test_censoring_replaces_values(self, theta_true):
        spec = ModelSpec(detection_limits={1: 3.5})
        d = simulate_subject(spec, theta_true, [0.2] * 3, standard_design(2)[0], 3)
        assert np.any(d.censored)
        np.testing.assert_array_equal(d.values[d.censored], 3.5)
        assert np.all(d.markers[d.censored] == 1)

    def test_loglik_finite_at_truth_over_seeds(self, spec, theta_true):
        design = standard_design(2)[0]
        prob = None
        for seed in range(1000):
            d, a = simulate_subject(spec, theta_true, [0.2] * 3, design, seed, return_effects=True)
            if prob is None:
                prob = HivProblem(spec, [d], PenaltyConfig(0.2))
            else:
                prob.subjects = [d]
                prob._prepare()
            _, beta = spec.layout.split(theta_true)
            assert np.isfinite(prob.loglik_points([0], a[None], beta[None])[0])


class TestDatasetIO:
    def test_round_trip(self, tmp_path, spec, theta_true):
        subjects = simulate_dataset(ModelSpec(detection_limits={1: 3.5}), theta_true,
                                    [0.2] * 3, standard_design(4), 2)
        path = tmp_path / "d.csv"
        write_dataset(path, subjects)
        back = read_dataset(path)
        assert [s.subject for s in back] == [s.subject for s in subjects]
        for a, b in zip(subjects, back):
            np.testing.assert_array_equal(a.values, b.values)
            np.testing.assert_array_equal(a.censored, b.censored)
            assert a.z == b.z
        assert path.read_text().splitlines()[0] == "subject,time,marker,value,censored,z1,z2"

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("subject,time,marker,value\n1,0,1,3.0\n")
        with pytest.raises(ConfigError):
            read_dataset(path)

    def test_censored_value_must_equal_limit(self, theta_true):
        spec = ModelSpec(detection_limits={1: 1.7})
        d = SubjectData("1", [0.0], [1], [1.5], [True])
        with pytest.raises(ConfigError):
            HivProblem(spec, [d], PenaltyConfig(0.2))

    def test_unknown_marker_rejected(self):
        spec = ModelSpec(markers=(1, 2), sigma={1: 0.5, 2: 0.5})
        d = SubjectData("1", [0.0], [3], [1.0], [False])
        with pytest.raises(ConfigError):
            HivProblem(spec, [d], PenaltyConfig(0.2))


def test_feasible_start_restores_equilibrium(spec, theta_initial):
    prob = HivProblem(spec, [SubjectData("1", [0.0], [2], [3.0], [False])], PenaltyConfig(0.2))
    alpha, beta = spec.layout.split(theta_initial)
    assert prob.loglik_points([0], alpha[None], beta[None])[0] == -np.inf
    th = prob.feasible_start(theta_initial)
    alpha, beta = spec.layout.split(th)
    assert np.isfinite(prob.loglik_points([0], alpha[None], beta[None])[0])
    changed = np.flatnonzero(th != theta_initial)
    assert [spec.layout.names[j] for j in changed] == ["gamma0"]
