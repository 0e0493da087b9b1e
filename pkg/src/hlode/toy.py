"""Linear Gaussian random-intercept model with closed-form estimators.

Y_ij = theta + b_i + eps_ij, b_i ~ N(0, tau^2), eps_ij ~ N(0, sigma^2).

It runs through the same HLProblem interface as the ODE model: each subject's
"trajectory" is the constant a_i = theta + b_i and the records are scored by
``gaussian_censored_loglik``, so fitting and inference code is exercised
unchanged.

Closed forms, with c_i = n_i / (sigma^2 + n_i tau^2):

* conditional mode       b_i(theta) = tau^2 n_i (Ybar_i - theta) / (sigma^2 + n_i tau^2)
* profile score          u_i = c_i (Ybar_i - theta)
* profile Hessian        H_i = -c_i
* MHLE = marginal MLE    theta = sum c_i Ybar_i / sum c_i
* sandwich variance      sum c_i^2 (Ybar_i - theta)^2 / (sum c_i)^2

The score follows from dl_i/dtheta = n_i (Ybar_i - theta - b_i) / sigma^2 at
b_i(theta). The marginal law of Ybar_i is N(theta, tau^2 + sigma^2 / n_i), whose
weighted-mean MLE coincides with the zero of sum u_i.
"""

from dataclasses import dataclass

import numpy as np

from .hlik import PenaltyConfig
from .problem import HLProblem, ThetaLayout, gaussian_censored_loglik


class ToyProblem(HLProblem):
    """Random-intercept model with known sigma; alpha = (theta,), no beta."""

    def __init__(self, data, sigma, penalty):
        self.data = [np.asarray(y, dtype=float) for y in data]
        if any(y.size < 1 for y in self.data):
            raise ValueError("every subject needs at least one observation")
        self.sigma = float(sigma)
        self.penalty = penalty if isinstance(penalty, PenaltyConfig) else PenaltyConfig(penalty)
        self.layout = ThetaLayout(("theta",), ())
        self.n = len(self.data)
        self.tau = self.penalty.tau_vector(1)
        self._values = np.concatenate(self.data)
        self._counts = np.array([y.size for y in self.data])
        self._ptr = np.concatenate(([0], np.cumsum(self._counts)))

    def loglik_points(self, subjects, a, beta, groups=None):
        subjects = np.asarray(subjects, dtype=np.int64)
        a = np.asarray(a, dtype=float).reshape(subjects.size, 1)
        counts = self._counts[subjects]
        point_of = np.repeat(np.arange(subjects.size), counts)
        rec = np.concatenate([np.arange(self._ptr[s], self._ptr[s + 1]) for s in subjects])
        ll = gaussian_censored_loglik(self._values[rec], a[point_of, 0], self.sigma,
                                      np.zeros(rec.size, dtype=bool))
        return np.bincount(point_of, weights=ll, minlength=subjects.size)

    def simulate_like(self, theta, rng, tau=None):
        tau = float(self.tau[0] if tau is None else np.ravel(tau)[0])
        theta = float(np.ravel(theta)[0])
        data = [theta + tau * rng.standard_normal()
                + self.sigma * rng.standard_normal(y.size) for y in self.data]
        return ToyProblem(data, self.sigma, self.penalty)


@dataclass(frozen=True)
class ToyClosedForms:
    b_hat: np.ndarray
    score: np.ndarray
    hessian: np.ndarray
    mhle: float
    mle: float
    sandwich_variance: float


def toy_closed_forms(data, theta, tau, sigma):
    """Analytic conditional modes, profile scores and Hessians at ``theta``,
    plus the MHLE (equal to the marginal MLE) and its sandwich variance."""
    n_i = np.array([np.size(y) for y in data], dtype=float)
    if np.any(n_i < 1):
        raise ValueError("every subject needs at least one observation")
    ybar = np.array([np.mean(y) for y in data])
    denom = sigma ** 2 + n_i * tau ** 2
    c = n_i / denom
    b_hat = tau ** 2 * n_i * (ybar - theta) / denom
    mhle = float(np.sum(c * ybar) / np.sum(c))
    w = 1.0 / (tau ** 2 + sigma ** 2 / n_i)
    mle = float(np.sum(w * ybar) / np.sum(w))
    sand = float(np.sum(c ** 2 * (ybar - mhle) ** 2) / np.sum(c) ** 2)
    return ToyClosedForms(b_hat=b_hat, score=c * (ybar - theta), hessian=-c,
                          mhle=mhle, mle=mle, sandwich_variance=sand)


def simulate_toy(n_subjects, n_obs, theta, tau, sigma, seed):
    """Balanced (int n_obs) or unbalanced (sequence n_obs) toy data."""
    rng = np.random.default_rng(seed)
    sizes = np.broadcast_to(np.asarray(n_obs, dtype=int), (n_subjects,))
    return [theta + tau * rng.standard_normal() + sigma * rng.standard_normal(k)
            for k in sizes]
