import numpy as np
import pytest

from hlode.hlik import PenaltyConfig
from hlode.problem import HLProblem, ThetaLayout
from hlode.model import REFERENCE_INITIAL, REFERENCE_TRUE, HivProblem, ModelSpec, standard_design, simulate_dataset


@pytest.fixture(scope="session")
def spec():
    return ModelSpec()


@pytest.fixture(scope="session")
def theta_true(spec):
    return spec.theta_from_values(REFERENCE_TRUE)


@pytest.fixture(scope="session")
def theta_initial(spec):
    return spec.theta_from_values(REFERENCE_INITIAL)


def make_problem(spec, theta, n, seed, tau_sim=0.2, tau_u=0.2):
    subjects = simulate_dataset(spec, theta, [tau_sim] * spec.layout.R, standard_design(n), seed)
    return HivProblem(spec, subjects, PenaltyConfig(tau_u))


@pytest.fixture(scope="session")
def tiny_problem(spec, theta_true):
    """n = 3 subjects, R = 3 random effects."""
    return make_problem(spec, theta_true, 3, 11)


@pytest.fixture(scope="session")
def fitted_medium(spec, theta_true, theta_initial):
    """A converged hybrid fit on 40 subjects, shared by several modules."""
    from hlode.optimizer import hybrid_fit

    prob = make_problem(spec, theta_true, 40, 7)
    return prob, hybrid_fit(prob, theta_initial)


class QuadraticProblem(HLProblem):
    """l_i(x) = -1/2 (x - m_i)^T M_i (x - m_i) + k_i with x = (a_i, beta)."""

    def __init__(self, M, m, k=None, R=1, tau=0.5):
        self.M = np.asarray(M, dtype=float)
        self.m = np.asarray(m, dtype=float)
        self.n = self.M.shape[0]
        self.k = np.zeros(self.n) if k is None else np.asarray(k, dtype=float)
        nb_ = self.M.shape[1] - R
        self.layout = ThetaLayout(tuple(f"alpha{r}" for r in range(R)),
                                  tuple(f"beta{j}" for j in range(nb_)))
        self.tau = np.full(R, float(tau))

    def loglik_points(self, subjects, a, beta, groups=None):
        subjects = np.asarray(subjects)
        x = np.hstack([np.reshape(a, (subjects.size, -1)), np.reshape(beta, (subjects.size, -1))])
        d = x - self.m[subjects]
        return -0.5 * np.einsum("pi,pij,pj->p", d, self.M[subjects], d) + self.k[subjects]


def random_spd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T + d * np.eye(d))


def quadratic_problem(seed, n=3, R=2, n_beta=2, tau=0.5):
    rng = np.random.default_rng(seed)
    d = R + n_beta
    M = np.stack([random_spd(rng, d) for _ in range(n)])
    return QuadraticProblem(M, rng.standard_normal((n, d)), R=R, tau=tau)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
