"""Normalized h-loglikelihood in the a_i = alpha + b_i parameterization.

    HL = (1/n) sum_i [ l_i(a_i, beta) - sum_r (a_ir - alpha_r)^2 / (2 tau_r^2) ]

The log-normalizing constant of the random-effect density is dropped. Only
derivatives of l_i need numerical differencing; everything that involves
alpha is analytic.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FiniteDifferenceFailure

EPS = np.finfo(float).eps
GRAD_STEP = EPS ** (1 / 3)
HESS_STEP = EPS ** (1 / 4)
MAX_STEP_HALVINGS = 4


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty SD bound tau_u; a scalar is shared by all random effects."""

    tau_u: object = 0.2

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.tau_u, dtype=float))
        if t.size == 0 or not np.all(t > 0) or not np.all(np.isfinite(t)):
            raise ConfigError("tau_u", f"must be positive, got {self.tau_u!r}")

    def tau_vector(self, R):
        t = np.atleast_1d(np.asarray(self.tau_u, dtype=float))
        if t.size == 1:
            return np.full(R, t[0])
        if t.size != R:
            raise ConfigError("tau_u", f"expected 1 or {R} values, got {t.size}")
        return t.copy()


def penalty(alpha, a, tau):
    """Per-subject penalty sum_r (a_ir - alpha_r)^2 / (2 tau_r^2)."""
    d = (np.atleast_2d(a) - alpha) / tau
    return 0.5 * np.sum(d * d, axis=1)


def hl_values(problem, theta, a):
    """hl_i for every subject."""
    alpha, _ = problem.layout.split(theta)
    a = np.asarray(a, dtype=float).reshape(problem.n, problem.R)
    return problem.loglik(theta, a) - penalty(alpha, a, problem.tau)


def hl_subject(problem, theta, a_i, i):
    alpha, beta = problem.layout.split(theta)
    a_i = np.asarray(a_i, dtype=float).reshape(1, problem.R)
    l = problem.loglik_points([i], a_i, beta.reshape(1, -1))[0]
    return float(l - penalty(alpha, a_i, problem.tau)[0])


def hl_total(problem, theta, a):
    """Mean of hl_i over subjects; -inf if any subject is infeasible."""
    v = hl_values(problem, theta, a)
    if not np.all(np.isfinite(v)):
        return -np.inf
    return float(np.mean(v))


def grad_alpha(alpha, a, tau):
    """dHL/dalpha_r = (1/n) sum_i (a_ir - alpha_r) / tau_r^2, exactly."""
    return np.mean((np.atleast_2d(a) - alpha) / tau ** 2, axis=0)


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

@dataclass
class SubjectDerivatives:
    """Derivatives of l_i with respect to x_i = (a_i, beta).

    ``grad`` is (n, d) and ``hess`` (n, d, d) with d = R + n_beta; entries
    that were not requested are NaN. Penalty terms are *not* included.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    R: int
    n_evaluations: int = 0

    def hl_grad(self, alpha, a, tau):
        g = self.grad.copy()
        g[:, :self.R] -= (a - alpha) / tau ** 2
        return g

    def hl_hess(self, tau):
        H = self.hess.copy()
        idx = np.arange(self.R)
        H[:, idx, idx] -= 1.0 / tau ** 2
        return H


def stencil_size(n_grad, n_hess):
    """Function evaluations per subject: centre, gradient pairs, Hessian stencils."""
    return 1 + 2 * n_grad + 2 * n_hess + 2 * n_hess * (n_hess - 1)


def _steps(x, base):
    h = base * np.maximum(np.abs(x), 0.1)
    return (x + h) - x  # exactly representable increments


def _build_stencil(x, hg, hh, gvars, hvars):
    """Offsets (S, d) of the stencil around one subject's x."""
    d = x.size
    rows = [np.zeros(d)]
    for j in gvars:
        e = np.zeros(d)
        e[j] = hg[j]
        rows += [e, -e]
    for j in hvars:
        e = np.zeros(d)
        e[j] = hh[j]
        rows += [e, -e]
    for u, j in enumerate(hvars):
        for k in hvars[u + 1:]:
            for sj, sk in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                e = np.zeros(d)
                e[j] = sj * hh[j]
                e[k] = sk * hh[k]
                rows.append(e)
    return np.array(rows)


def _apply_stencil(f, hg, hh, gvars, hvars, d):
    value = f[0]
    grad = np.full(d, np.nan)
    hess = np.full((d, d), np.nan)
    pos = 1
    for j in gvars:
        grad[j] = (f[pos] - f[pos + 1]) / (2 * hg[j])
        pos += 2
    for j in hvars:
        hess[j, j] = (f[pos] - 2 * value + f[pos + 1]) / hh[j] ** 2
        pos += 2
    for u, j in enumerate(hvars):
        for k in hvars[u + 1:]:
            fpp, fpm, fmp, fmm = f[pos:pos + 4]
            hess[j, k] = hess[k, j] = (fpp - fpm - fmp + fmm) / (4 * hh[j] * hh[k])
            pos += 4
    return value, grad, hess


def numeric_block_derivatives(problem, theta, a, grad_vars="all", hess_vars="all",
                              subjects=None):
    """Central-difference derivatives of l_i in x_i = (a_i, beta), per subject.

    ``grad_vars``/``hess_vars`` select coordinates of x_i: "all", "a", "beta",
    or an explicit index sequence. Diagonal second derivatives use the 3-point
    stencil, off-diagonal ones the 4-point stencil. Each subject's stencil is
    evaluated as one lockstep group. If any stencil point of a subject is
    infeasible its steps are halved, up to four times.
    """
    lay = problem.layout
    R, nb_ = lay.R, lay.n_beta
    d = R + nb_

    def select(spec):
        if isinstance(spec, str):
            return {"all": list(range(d)), "a": list(range(R)),
                    "beta": list(range(R, d)), "none": []}[spec]
        return list(spec)

    gvars, hvars = select(grad_vars), select(hess_vars)
    _, beta = lay.split(theta)
    a = np.asarray(a, dtype=float).reshape(problem.n, R)
    subj_ids = np.arange(problem.n) if subjects is None else np.asarray(subjects)
    X = np.hstack([a[subj_ids], np.tile(beta, (subj_ids.size, 1))])

    scale = np.ones(subj_ids.size)
    value = np.empty(subj_ids.size)
    grad = np.full((subj_ids.size, d), np.nan)
    hess = np.full((subj_ids.size, d, d), np.nan)
    todo = np.arange(subj_ids.size)
    n_eval = 0
    for attempt in range(MAX_STEP_HALVINGS + 1):
        offsets, steps = [], []
        for k in todo:
            hg = _steps(X[k], GRAD_STEP * scale[k])
            hh = _steps(X[k], HESS_STEP * scale[k])
            steps.append((hg, hh))
            offsets.append(_build_stencil(X[k], hg, hh, gvars, hvars))
        S = offsets[0].shape[0]
        pts = np.concatenate([X[k] + off for k, off in zip(todo, offsets)])
        subj = np.repeat(subj_ids[todo], S)
        f = problem.loglik_points(subj, pts[:, :R], pts[:, R:], groups=np.repeat(todo, S))
        n_eval += f.size
        f = f.reshape(todo.size, S)
        failed = []
        for row, k in enumerate(todo):
            if not np.all(np.isfinite(f[row])):
                failed.append(k)
                continue
            hg, hh = steps[row]
            value[k], grad[k], hess[k] = _apply_stencil(f[row], hg, hh, gvars, hvars, d)
        if not failed:
            break
        todo = np.array(failed)
        scale[todo] *= 0.5
    else:
        raise FiniteDifferenceFailure(
            f"infeasible stencil points for subjects {subj_ids[todo].tolist()}")
    return SubjectDerivatives(value=value, grad=grad, hess=hess, R=R, n_evaluations=n_eval)


# --------------------------------------------------------------------------
# block Hessian
# --------------------------------------------------------------------------

@dataclass
class BlockHessian:
    """Hessian of HL over (alpha, beta, a_1, ..., a_n) in arrow form.

    A: (R,) diagonal of d2HL/dalpha2, D: (R,) diagonal of d2HL/dalpha da_i,
    B: (nb, nb), Bi: (n, nb, R) = (1/n) d2hl_i/dbeta da_i,
    C: (n, R, R) = (1/n) d2hl_i/da_i2. Blocks between different subjects are
    zero by construction and never stored.
    """

    A: np.ndarray
    D: np.ndarray
    B: np.ndarray
    Bi: np.ndarray
    C: np.ndarray

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def R(self):
        return self.C.shape[1]

    @property
    def n_beta(self):
        return self.B.shape[0]

    @property
    def size(self):
        return self.R + self.n_beta + self.n * self.R

    def to_dense(self):
        R, nb_, n = self.R, self.n_beta, self.n
        q = R + nb_
        H = np.zeros((self.size, self.size))
        H[:R, :R] = np.diag(self.A)
        H[R:q, R:q] = self.B
        for i in range(n):
            s = slice(q + i * R, q + (i + 1) * R)
            H[:R, s] = H[s, :R] = np.diag(self.D)
            H[R:q, s] = self.Bi[i]
            H[s, R:q] = self.Bi[i].T
            H[s, s] = self.C[i]
        return H


def assemble(derivs, alpha, a, tau):
    """Gradient vector and BlockHessian of HL from per-subject l_i derivatives."""
    n, R = a.shape
    gl = derivs.grad
    Hl = derivs.hess
    if gl.shape[0] != n or Hl.shape[0] != n:
        raise ValueError("derivative blocks do not match the number of subjects")
    g_alpha = grad_alpha(alpha, a, tau)
    g_beta = gl[:, R:].mean(axis=0)
    g_a = (gl[:, :R] - (a - alpha) / tau ** 2) / n
    grad = np.concatenate([g_alpha, g_beta, g_a.ravel()])
    C = Hl[:, :R, :R] / n
    idx = np.arange(R)
    C[:, idx, idx] -= 1.0 / (n * tau ** 2)
    H = BlockHessian(
        A=-1.0 / tau ** 2,
        D=1.0 / (n * tau ** 2),
        B=Hl[:, R:, R:].mean(axis=0),
        Bi=Hl[:, R:, :R] / n,
        C=C,
    )
    return grad, H
