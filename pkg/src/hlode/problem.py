"""Common interface between concrete models and the h-likelihood machinery."""

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ThetaLayout:
    """Names of the fixed-parameter vector: random-effect means first."""

    alpha_names: tuple
    beta_names: tuple

    @property
    def R(self):
        return len(self.alpha_names)

    @property
    def n_beta(self):
        return len(self.beta_names)

    @property
    def q(self):
        return self.R + self.n_beta

    @property
    def names(self):
        return self.alpha_names + self.beta_names

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[:self.R], theta[self.R:]

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}; have {self.names}") from None


def gaussian_censored_loglik(values, predicted, sigma, censored):
    """Per-record log-density; censored records contribute log Phi((d - mu)/sigma).

    For censored records ``values`` holds the detection limit.
    """
    z = (values - predicted) / sigma
    dens = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z
    if np.any(censored):
        return np.where(censored, log_ndtr(z), dens)
    return dens


class HLProblem:
    """A dataset plus model able to evaluate subject log-likelihoods l_i.

    Subclasses set ``layout``, ``n`` and ``tau`` (R-vector of penalty SDs) and
    implement :meth:`loglik_points`. The conditional log-likelihood of subject
    i depends on the random-effect block only through a_i = alpha + b_i and on
    the remaining fixed parameters beta.
    """

    layout: ThetaLayout
    n: int
    tau: np.ndarray

    @property
    def R(self):
        return self.layout.R

    @property
    def n_beta(self):
        return self.layout.n_beta

    def loglik_points(self, subjects, a, beta, groups=None):
        """Evaluate l_i at P points.

        ``subjects`` (P,) subject indices, ``a`` (P, R), ``beta`` (P, n_beta).
        ``groups`` (P,) optional labels of contiguous runs of points that may
        share numerical work (a lockstep ODE mesh); each run belongs to one
        subject. Infeasible points return ``-inf``.
        """
        raise NotImplementedError

    def loglik(self, theta, a):
        """l_i for every subject at (beta from theta, a_i)."""
        _, beta = self.layout.split(theta)
        a = np.asarray(a, dtype=float).reshape(self.n, self.R)
        subj = np.arange(self.n)
        return self.loglik_points(subj, a, np.tile(beta, (self.n, 1)))

    def feasible_start(self, theta):
        """Return a starting point with finite objective (identity by default)."""
        return np.asarray(theta, dtype=float)

    def simulate_like(self, theta, rng):
        """A new problem of identical design with data drawn at ``theta``."""
        raise NotImplementedError
