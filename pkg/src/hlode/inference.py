"""Sandwich covariance, Wald contrasts and confidence intervals at the MHLE.

The profile of subject i is p_i(theta) = max_b [l_i(theta, b) - J(b)]. By the
envelope argument its score is the partial derivative of l_i in theta with
b held at its conditional maximizer, and its Hessian is the Schur complement

    H_i = L_xx - L_xz (L_zz - I / tau^2)^{-1} L_zx

of the Hessian of l_i. Since l_i depends on (alpha, b) only through
a = alpha + b, every block of L comes from derivatives in (a_i, beta).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import NonConvergence, SingularInnerBlock
from .hlik import numeric_block_derivatives
from .optimizer import is_negative_definite, subject_marquardt_steps

log = logging.getLogger(__name__)

INNER_GRAD_TOL = 1e-8
INNER_ACCEPT_TOL = 1e-5
INNER_MAX_ITER = 50
INNER_DAMPING = 1e-8
SINGULAR_RCOND = 1e-12
NOISE_GAIN = 1e-7  # objective changes below this are not resolved by the solver


# --------------------------------------------------------------------------
# profiled random effects
# --------------------------------------------------------------------------

def profile_random_effects(problem, theta, a0=None, tol=INNER_GRAD_TOL,
                           max_iter=INNER_MAX_ITER):
    """Maximize hl_i over a_i at fixed theta for every subject.

    Damped Newton steps from ``a0`` (default: a_i = alpha) until the
    finite-difference gradient in a_i is below ``tol``. Gradients that stall
    above ``tol`` but below INNER_ACCEPT_TOL are accepted (and logged), as
    that is the noise floor of the differenced ODE likelihood.
    """
    lay = problem.layout
    n, R = problem.n, lay.R
    theta = np.asarray(theta, dtype=float)
    alpha, _ = lay.split(theta)
    a = np.tile(alpha, (n, 1)) if a0 is None else np.array(a0, dtype=float).reshape(n, R)
    if R == 0:
        return a
    tau = problem.tau
    damping = np.full(n, INNER_DAMPING)
    gnorm = np.full(n, np.inf)
    for _ in range(max_iter):
        d = numeric_block_derivatives(problem, theta, a, grad_vars="a", hess_vars="a")
        g = d.hl_grad(alpha, a, tau)[:, :R]
        gnorm = np.max(np.abs(g), axis=1)
        if np.all(gnorm < tol):
            return a
        H = d.hl_hess(tau)[:, :R, :R]
        f0 = d.value - 0.5 * np.sum(((a - alpha) / tau) ** 2, axis=1)
        a_new, _, damping, _ = subject_marquardt_steps(problem, theta, a, g, H, damping, f0)
        # close to the mode the predicted gain drowns in solver noise, so the
        # acceptance test is meaningless there: take the plain Newton step
        for i in range(n):
            if is_negative_definite(H[i]):
                step = -np.linalg.solve(H[i], g[i])
                if 0.5 * g[i] @ step < NOISE_GAIN:
                    a_new[i] = a[i] + step
        keep = gnorm < tol
        a_new[keep] = a[keep]
        if np.array_equal(a_new, a):
            break
        a = a_new
    worst = float(np.max(gnorm))
    if worst < INNER_ACCEPT_TOL:
        log.info("inner maximization stalled at gradient %.2e", worst)
        return a
    raise NonConvergence(f"random-effect profiling did not converge (gradient {worst:.2e})")


# --------------------------------------------------------------------------
# scores and Hessians
# --------------------------------------------------------------------------

def _schur_hessian(L, R, tau):
    """Profile Hessian from the (a, beta) Hessian of l_i; raises when singular."""
    if R == 0:
        return L.copy()
    inner = L[:R, :R] - np.diag(1.0 / tau ** 2)
    if 1.0 / np.linalg.cond(inner) < SINGULAR_RCOND:
        raise SingularInnerBlock("random-effect curvature block is singular")
    return L - L[:, :R] @ np.linalg.solve(inner, L[:R, :])


def subject_scores_hessians(problem, theta, a):
    """Scores u_i (n, q) and Hessians H_i (n, q, q) at (theta, a_i).

    ``a`` must be the profiled random effects at ``theta``. Returns also a
    boolean mask of subjects whose inner block was singular (their H_i is NaN).
    """
    R = problem.R
    d = numeric_block_derivatives(problem, theta, a)
    scores = d.grad.copy()
    hess = np.full_like(d.hess, np.nan)
    singular = np.zeros(problem.n, dtype=bool)
    for i in range(problem.n):
        try:
            hess[i] = _schur_hessian(d.hess[i], R, problem.tau)
        except SingularInnerBlock:
            singular[i] = True
    return scores, hess, singular


def subject_score(problem, theta, a, i):
    """Score of subject i: derivative of l_i in theta at fixed b_i."""
    d = numeric_block_derivatives(problem, theta, a, hess_vars="none", subjects=[i])
    return d.grad[0]


def subject_hessian(problem, theta, a, i):
    """Profile Hessian of subject i by the Schur-complement formula."""
    d = numeric_block_derivatives(problem, theta, a, subjects=[i])
    return _schur_hessian(d.hess[0], problem.R, problem.tau)


# --------------------------------------------------------------------------
# sandwich
# --------------------------------------------------------------------------

@dataclass
class SandwichCovariance:
    """bread = mean H_i, meat = mean u_i u_i^T, covariance = Sigma / n."""

    bread: np.ndarray
    meat: np.ndarray
    covariance: np.ndarray
    condition: float
    n: int
    excluded: list = field(default_factory=list)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def sandwich_covariance(scores, hessians):
    """Plug-in sandwich bread^{-1} meat bread^{-1} / n from per-subject terms."""
    scores = np.asarray(scores, dtype=float)
    hessians = np.asarray(hessians, dtype=float)
    n = scores.shape[0]
    bread = hessians.mean(axis=0)
    meat = scores.T @ scores / n
    inv = np.linalg.inv(bread)
    cov = inv @ meat @ inv.T / n
    cov = 0.5 * (cov + cov.T)
    return SandwichCovariance(bread=bread, meat=meat, covariance=cov,
                              condition=float(np.linalg.cond(bread)), n=n)


def sandwich(problem, theta, a=None, refine=True):
    """Sandwich covariance of theta_hat.

    ``a`` is used as a warm start for the profiled random effects; set
    ``refine=False`` to take it as already profiled.
    """
    theta = np.asarray(theta, dtype=float)
    if refine or a is None:
        a = profile_random_effects(problem, theta, a)
    scores, hess, singular = subject_scores_hessians(problem, theta, a)
    if singular.any():
        log.warning("excluding subjects with singular inner block: %s",
                    np.flatnonzero(singular).tolist())
    keep = ~singular
    out = sandwich_covariance(scores[keep], hess[keep])
    out.excluded = np.flatnonzero(singular).tolist()
    return out


# --------------------------------------------------------------------------
# tests and intervals
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WaldResult:
    estimate: float
    variance: float
    statistic: float
    p_value: float


def wald_statistic(estimate, variance):
    """W = estimate / sqrt(variance) with a two-sided standard normal p-value."""
    if not variance > 0:
        raise ValueError("contrast variance must be positive")
    w = estimate / np.sqrt(variance)
    return WaldResult(float(estimate), float(variance), float(w),
                      float(2.0 * norm.sf(abs(w))))


def wald_contrast(theta, covariance, c):
    """Wald test of c^T theta = 0."""
    c = np.asarray(c, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if c.shape != theta.shape:
        raise ValueError(f"contrast has {c.size} entries, expected {theta.size}")
    if not np.any(c):
        raise ValueError("contrast vector is zero")
    return wald_statistic(float(c @ theta), float(c @ np.asarray(covariance) @ c))


@dataclass(frozen=True)
class Interval:
    name: str
    estimate: float
    se: float
    lower: float
    upper: float

    @property
    def natural(self):
        """Exponentiated estimate and endpoints (parameters are log-scale)."""
        return float(np.exp(self.estimate)), float(np.exp(self.lower)), float(np.exp(self.upper))

    def contains(self, value):
        return self.lower <= value <= self.upper


def confidence_intervals(theta, covariance, level=0.95, names=None):
    """Wald intervals theta_j +/- z_{(1+level)/2} SE_j on the transformed scale."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    theta = np.asarray(theta, dtype=float)
    se = np.sqrt(np.clip(np.diag(np.asarray(covariance, dtype=float)), 0.0, None))
    zq = norm.ppf(0.5 * (1 + level))
    names = names or [f"theta{j}" for j in range(theta.size)]
    return [Interval(nm, float(t), float(s), float(t - zq * s), float(t + zq * s))
            for nm, t, s in zip(names, theta, se)]
