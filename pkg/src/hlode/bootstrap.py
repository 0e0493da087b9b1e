"""Parametric-bootstrap bias correction of the MHLE.

Datasets are simulated at theta_hat with random effects drawn at the working
penalty SD, refitted, and the mean shift of the refits is subtracted:

    theta_corr = theta_hat - mean_s(theta_s - theta_hat)
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import HlodeError, TooFewConverged
from .optimizer import fit

log = logging.getLogger(__name__)

DEFAULT_REPLICATES = 20


@dataclass
class BootstrapResult:
    S: int
    estimates: np.ndarray      # (S, q); rows of failed replicates are NaN
    converged: np.ndarray      # (S,) bool
    bias: np.ndarray
    corrected: np.ndarray
    covariance: np.ndarray | None = None

    @property
    def n_converged(self):
        return int(self.converged.sum())


def inflate_variance(covariance, S):
    """Variance of the corrected estimator: (1 + 1/S) times that of the MHLE."""
    if S < 1:
        raise ValueError("S must be >= 1")
    return np.asarray(covariance, dtype=float) * (1.0 + 1.0 / S)


def replicate_seed(seed, s):
    """Independent, order-free seed of bootstrap replicate ``s``.

    ``seed`` is an int or a SeedSequence; the replicate index is appended to
    its spawn key so that results do not depend on execution order.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (s,))
    return np.random.SeedSequence(seed, spawn_key=(s,))


def correction_from_estimates(theta_hat, estimates, converged):
    """Bias and corrected estimate from replicate fits (converged rows only)."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    S = len(converged)
    need = max(2, int(np.ceil(S / 2)))
    k = int(np.sum(converged))
    if k < need:
        raise TooFewConverged(f"{k} of {S} bootstrap fits converged, need {need}")
    bias = np.mean(estimates[converged], axis=0) - theta_hat
    return bias, theta_hat - bias


def _one_replicate(problem, theta_hat, theta0, s, seed, algorithm, max_iter):
    rng = np.random.default_rng(replicate_seed(seed, s))
    try:
        sim = problem.simulate_like(theta_hat, rng)
        res = fit(sim, theta0, algorithm, max_iter=max_iter)
    except HlodeError as exc:
        log.info("bootstrap replicate %d failed: %s", s, exc)
        return None
    log.info("bootstrap replicate %d: converged=%s iterations=%d", s,
             res.converged, res.report.iterations)
    return res.theta if res.converged else None


def bias_correct(problem, theta_hat, S=DEFAULT_REPLICATES, seed=0, theta0=None,
                 algorithm="hybrid", max_iter=150, covariance=None):
    """Bootstrap bias correction around ``theta_hat``.

    Each replicate is refitted from ``theta0`` (the original starting values;
    defaults to theta_hat) with zero random effects. Non-converged replicates
    are excluded and counted; the bias averages the S_eff converged refits.
    ``covariance``, if given, is inflated by 1 + 1/S_eff.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta0 = theta_hat if theta0 is None else np.asarray(theta0, dtype=float)
    est = np.full((S, theta_hat.size), np.nan)
    ok = np.zeros(S, dtype=bool)
    for s in range(S):
        th = _one_replicate(problem, theta_hat, theta0, s, seed, algorithm, max_iter)
        if th is not None:
            est[s], ok[s] = th, True
    bias, corrected = correction_from_estimates(theta_hat, est, ok)
    cov = None if covariance is None else inflate_variance(covariance, int(ok.sum()))
    return BootstrapResult(S=S, estimates=est, converged=ok, bias=bias,
                           corrected=corrected, covariance=cov)
