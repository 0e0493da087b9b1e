"""Marquardt maximization of HL: patient-by-patient, global, and hybrid schemes.

Variables are ordered (alpha, beta, a_1, ..., a_n). The patient-by-patient
sweep takes one damped Newton step per subject in a_i with alpha held,
resets alpha to the mean of the a_i (which zeroes dHL/dalpha), then takes
one step in beta with the B block. The hybrid scheme sweeps until every
-C_i and -B factorizes as positive definite, then switches for good to
Marquardt steps on the full arrow-shaped Hessian.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DampingOverflow, NonConvergence
from .hlik import assemble, grad_alpha, hl_total, numeric_block_derivatives

log = logging.getLogger(__name__)

INITIAL_DAMPING = 1e-2
DAMPING_UP = 10.0
DAMPING_DOWN = 0.1
MIN_DAMPING = 1e-15
MAX_REJECTIONS = 30
DIAG_FLOOR = 1e-12
PIVOT_TOL = 1e-10

OBJ_RTOL = 1e-7
PARAM_TOL = 1e-5
GRAD_TOL = 1e-4
DEFAULT_MAX_ITER = 150


# --------------------------------------------------------------------------
# linear algebra helpers
# --------------------------------------------------------------------------

def is_negative_definite(H, pivot_tol=PIVOT_TOL):
    """True when -H admits a Cholesky factorization with pivots above tol."""
    M = -0.5 * (np.asarray(H) + np.asarray(H).T)
    n = M.shape[0]
    if n == 0:
        return True
    L = np.zeros_like(M)
    for j in range(n):
        piv = M[j, j] - L[j, :j] @ L[j, :j]
        if not piv > pivot_tol:
            return False
        L[j, j] = np.sqrt(piv)
        L[j + 1:, j] = (M[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return True


def damping_scale(diag):
    """Marquardt scaling: diag(-H) floored to avoid zero or negative columns."""
    return np.maximum(diag, DIAG_FLOOR)


def marquardt_direction(g, H, damping):
    """Solve (-H + damping * diag(-H)) delta = g for an ascent step."""
    M = -np.asarray(H, dtype=float)
    M = M + damping * np.diag(damping_scale(np.diag(M)))
    return np.linalg.solve(M, g)


def block_marquardt_direction(g, H, damping):
    """Damped step on the arrow-shaped system by Schur complement.

    Each subject block is eliminated first, so the cost is linear in n.
    """
    R, nb_, n = H.R, H.n_beta, H.n
    q = R + nb_
    g_th, g_a = g[:q], g[q:].reshape(n, R)

    # M = -H + damping * diag(-H)
    Mth = np.zeros((q, q))
    Mth[:R, :R] = np.diag(-H.A * (1 + damping))
    Bneg = -H.B
    Mth[R:, R:] = Bneg + damping * np.diag(damping_scale(np.diag(Bneg)))
    Maa = -H.C.copy()
    idx = np.arange(R)
    Maa[:, idx, idx] += damping * damping_scale(np.diagonal(Maa, axis1=1, axis2=2))
    # coupling of theta with a_i, shape (n, q, R)
    Mta = np.empty((n, q, R))
    Mta[:, :R, :] = -np.diag(H.D)
    Mta[:, R:, :] = -H.Bi

    # X_i = Maa_i^{-1} [Mta_i^T | g_a_i]
    rhs = np.concatenate([np.transpose(Mta, (0, 2, 1)), g_a[:, :, None]], axis=2)
    X = np.linalg.solve(Maa, rhs)
    S = Mth - np.einsum("iqr,irp->qp", Mta, X[:, :, :q])
    r = g_th - np.einsum("iqr,ir->q", Mta, X[:, :, q])
    d_th = np.linalg.solve(S, r)
    d_a = X[:, :, q] - np.einsum("irq,q->ir", X[:, :, :q], d_th)
    return np.concatenate([d_th, d_a.ravel()])


# --------------------------------------------------------------------------
# single Marquardt step
# --------------------------------------------------------------------------

@dataclass
class MarquardtStep:
    x: np.ndarray
    value: float
    damping: float
    accepted: bool
    trials: int


def marquardt_step(fun, x, value, g, H, damping, solver=marquardt_direction,
                   max_rejections=MAX_REJECTIONS):
    """One accepted Marquardt step (ascent) with damping adaptation.

    Damping is divided by 10 on acceptance and multiplied by 10 per rejected
    trial. Raises DampingOverflow after ``max_rejections`` rejected trials.
    """
    x = np.asarray(x, dtype=float)
    for trial in range(1, max_rejections + 1):
        try:
            delta = solver(g, H, damping)
        except np.linalg.LinAlgError:
            delta = None
        if delta is not None and np.all(np.isfinite(delta)):
            if not np.any(delta):
                return MarquardtStep(x, value, max(damping * DAMPING_DOWN, MIN_DAMPING),
                                     True, trial)
            x_new = x + delta
            f_new = fun(x_new)
            if np.isfinite(f_new) and f_new >= value:
                return MarquardtStep(x_new, f_new, max(damping * DAMPING_DOWN, MIN_DAMPING),
                                     True, trial)
        damping *= DAMPING_UP
    raise DampingOverflow(f"{max_rejections} consecutive rejected Marquardt trials")


def subject_marquardt_steps(problem, theta, a, g, H, damping, f0):
    """One accepted Marquardt step in a_i for every subject, batched.

    ``g``/``H`` are gradients and Hessians of hl_i in a_i. Subjects that
    exhaust the trial budget keep their a_i, get their damping reset, and
    are reported.
    """
    n, R = a.shape
    alpha, beta = problem.layout.split(theta)
    a_new = a.copy()
    f_new = f0.copy()
    damping = damping.copy()
    active = np.arange(n)
    for _ in range(MAX_REJECTIONS):
        if active.size == 0:
            break
        M = -H[active]
        diag = damping_scale(np.diagonal(M, axis1=1, axis2=2))
        M = M.copy()
        idx = np.arange(R)
        M[:, idx, idx] += damping[active, None] * diag
        delta = np.full((active.size, R), np.nan)
        for k, i in enumerate(active):
            try:
                delta[k] = np.linalg.solve(M[k], g[i])
            except np.linalg.LinAlgError:
                pass
        ok = np.all(np.isfinite(delta), axis=1)
        cand = a[active] + np.where(ok[:, None], delta, 0.0)
        fc = np.full(active.size, -np.inf)
        if ok.any():
            sel = active[ok]
            l = problem.loglik_points(sel, cand[ok], np.tile(beta, (sel.size, 1)))
            fc[ok] = l - 0.5 * np.sum(((cand[ok] - alpha) / problem.tau) ** 2, axis=1)
        zero = ok & ~np.any(delta != 0, axis=1)
        acc = zero | (np.isfinite(fc) & (fc >= f0[active]))
        acc_idx = active[acc]
        a_new[acc_idx] = np.where(zero[acc][:, None], a[acc_idx], cand[acc])
        f_new[acc_idx] = np.where(zero[acc], f0[acc_idx], fc[acc])
        damping[acc_idx] = np.maximum(damping[acc_idx] * DAMPING_DOWN, MIN_DAMPING)
        damping[active[~acc]] *= DAMPING_UP
        active = active[~acc]
    damping[active] = INITIAL_DAMPING
    return a_new, f_new, damping, active


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    objective: float
    grad_max: float
    reason: str
    indefinite_blocks: list = field(default_factory=list)


@dataclass
class FitResult:
    theta: np.ndarray
    a: np.ndarray
    objective: float
    report: ConvergenceReport
    names: tuple
    trace: list = field(default_factory=list)
    algorithm: str = "hybrid"
    switch_iteration: int | None = None

    @property
    def converged(self):
        return self.report.converged

    @property
    def b(self):
        alpha = self.theta[:self.a.shape[1]]
        return self.a - alpha


@dataclass
class MarquardtState:
    """Damping factors carried between iterations."""

    subject_damping: np.ndarray
    beta_damping: float = INITIAL_DAMPING
    global_damping: float = INITIAL_DAMPING


def _pack(theta, a):
    return np.concatenate([theta, a.ravel()])


def _unpack(x, q, n, R):
    return x[:q], x[q:].reshape(n, R)


def _full_gradient(problem, theta, a, derivs):
    alpha, _ = problem.layout.split(theta)
    R = problem.R
    g_alpha = grad_alpha(alpha, a, problem.tau) if R else np.zeros(0)
    g_beta = derivs.grad[:, R:].mean(axis=0)
    g_a = (derivs.grad[:, :R] - (a - alpha) / problem.tau ** 2) / problem.n
    return np.concatenate([g_alpha, g_beta, g_a.ravel()])


def patient_by_patient_iteration(problem, theta, a, state=None, derivs=None):
    """One sweep: subject steps in a_i, alpha <- mean(a_i), one beta step.

    Returns (theta, a, info) where info records which curvature blocks were
    not negative definite and which subjects failed to take a step.
    """
    lay = problem.layout
    n, R, nb_ = problem.n, lay.R, lay.n_beta
    theta = np.asarray(theta, dtype=float).copy()
    a = np.asarray(a, dtype=float).reshape(n, R).copy()
    if state is None:
        state = MarquardtState(np.full(n, INITIAL_DAMPING))
    if derivs is None:
        derivs = numeric_block_derivatives(problem, theta, a, grad_vars="all", hess_vars="a")
    alpha, beta = lay.split(theta)
    tau = problem.tau
    info = {"indefinite_C": [], "failed_subjects": [], "B_definite": True}

    # step 1: subject-wise steps with alpha frozen
    if R:
        g = derivs.hl_grad(alpha, a, tau)[:, :R]
        H = derivs.hl_hess(tau)[:, :R, :R]
        info["indefinite_C"] = [i for i in range(n) if not is_negative_definite(H[i])]
        f0 = derivs.value - 0.5 * np.sum(((a - alpha) / tau) ** 2, axis=1)
        a, _, state.subject_damping, failed = subject_marquardt_steps(
            problem, theta, a, g, H, state.subject_damping, f0)
        info["failed_subjects"] = failed.tolist()
        # step 2: alpha at the mean of the a_i
        theta[:R] = a.mean(axis=0)

    # step 3: beta step with block B, (alpha, a) frozen
    if nb_:
        db = numeric_block_derivatives(problem, theta, a, grad_vars="beta", hess_vars="beta")
        gb = db.grad[:, R:].mean(axis=0)
        B = db.hess[:, R:, R:].mean(axis=0)
        info["B_definite"] = is_negative_definite(B)
        pen = np.mean(0.5 * np.sum(((a - theta[:R]) / tau) ** 2, axis=1)) if R else 0.0
        f_b = float(np.mean(db.value)) - pen

        def fun(b):
            l = problem.loglik_points(np.arange(n), a, np.tile(b, (n, 1)))
            return float(np.mean(l)) - pen if np.all(np.isfinite(l)) else -np.inf

        try:
            step = marquardt_step(fun, theta[R:], f_b, gb, B, state.beta_damping)
            theta[R:] = step.x
            state.beta_damping = step.damping
        except DampingOverflow:
            state.beta_damping = INITIAL_DAMPING
            info["beta_overflow"] = True
    return theta, a, info


def _fit(problem, theta0, a0, algorithm, max_iter, strict, trace_fn):
    lay = problem.layout
    n, R, q = problem.n, lay.R, lay.q
    theta = np.asarray(theta0, dtype=float).copy()
    if a0 is None:
        a = np.tile(theta[:R], (n, 1))
    else:
        a = np.asarray(a0, dtype=float).reshape(n, R).copy()
    if not np.isfinite(hl_total(problem, theta, a)):
        theta = problem.feasible_start(theta)
        if a0 is None:
            a = np.tile(theta[:R], (n, 1))
    f = hl_total(problem, theta, a)
    if not np.isfinite(f):
        raise NonConvergence("infeasible starting point")

    state = MarquardtState(np.full(n, INITIAL_DAMPING))
    phase = "global" if algorithm == "global" else "patient"
    switch_iteration = 0 if algorithm == "global" else None
    last_change = None
    trace = []
    grad_max = np.inf
    reason = "iteration limit"
    converged = False
    indefinite = []
    it = 0

    def emit(rec):
        trace.append(rec)
        log.debug("iter %(iteration)d phase %(phase)s obj %(objective).10g "
                  "damping %(damping).3g indefinite %(indefinite)d", rec)
        if trace_fn is not None:
            trace_fn(rec)

    def done(grad):
        return (last_change is not None and last_change[0] < OBJ_RTOL
                and last_change[1] < PARAM_TOL and grad < GRAD_TOL)

    while True:
        if phase == "patient":
            derivs = numeric_block_derivatives(problem, theta, a, grad_vars="all",
                                               hess_vars="a")
            grad_max = float(np.max(np.abs(_full_gradient(problem, theta, a, derivs))))
            if done(grad_max):
                converged, reason = True, "converged"
                break
            if it >= max_iter:
                break
            it += 1
            theta_new, a_new, info = patient_by_patient_iteration(
                problem, theta, a, state, derivs)
            f_new = hl_total(problem, theta_new, a_new)
            indefinite = info["indefinite_C"]
            damp = float(np.median(state.subject_damping)) if R else state.beta_damping
            emit({"iteration": it, "objective": f_new, "damping": damp,
                  "phase": "patient", "indefinite": len(indefinite)
                  + (0 if info["B_definite"] else 1)})
            last_change = (abs(f_new - f) / max(abs(f), 1.0),
                           float(np.max(np.abs(_pack(theta_new, a_new) - _pack(theta, a)))))
            theta, a, f = theta_new, a_new, f_new
            if algorithm == "hybrid" and not indefinite and info["B_definite"]:
                phase = "global"
                switch_iteration = it
        else:
            derivs = numeric_block_derivatives(problem, theta, a)
            alpha, _ = lay.split(theta)
            g, H = assemble(derivs, alpha, a, problem.tau)
            grad_max = float(np.max(np.abs(g)))
            if done(grad_max):
                converged, reason = True, "converged"
                break
            if it >= max_iter:
                break
            it += 1

            def fun(x):
                th, aa = _unpack(x, q, n, R)
                return hl_total(problem, th, aa)

            x = _pack(theta, a)
            try:
                step = marquardt_step(fun, x, f, g, H, state.global_damping,
                                      solver=block_marquardt_direction)
            except DampingOverflow:
                if grad_max < GRAD_TOL:
                    last_change = (0.0, 0.0)
                    state.global_damping = INITIAL_DAMPING
                    continue
                reason = "damping overflow"
                break
            state.global_damping = step.damping
            last_change = (abs(step.value - f) / max(abs(f), 1.0),
                           float(np.max(np.abs(step.x - x))))
            theta, a = _unpack(step.x, q, n, R)
            theta, a = theta.copy(), a.copy()
            f = step.value
            emit({"iteration": it, "objective": f, "damping": step.damping,
                  "phase": "global", "indefinite": 0})

    report = ConvergenceReport(converged=converged, iterations=it, objective=f,
                               grad_max=grad_max, reason=reason,
                               indefinite_blocks=list(indefinite))
    result = FitResult(theta=theta, a=a, objective=f, report=report, names=lay.names,
                       trace=trace, algorithm=algorithm, switch_iteration=switch_iteration)
    if strict and not converged:
        raise NonConvergence(f"{algorithm} fit did not converge: {reason}",
                             report=report, result=result)
    return result


def hybrid_fit(problem, theta0, a0=None, max_iter=DEFAULT_MAX_ITER, strict=False,
               trace_fn=None):
    """Patient-by-patient sweeps until all curvature blocks are definite, then global."""
    return _fit(problem, theta0, a0, "hybrid", max_iter, strict, trace_fn)


def global_fit(problem, theta0, a0=None, max_iter=DEFAULT_MAX_ITER, strict=False,
               trace_fn=None):
    """Marquardt on the full block Hessian from the first iteration."""
    return _fit(problem, theta0, a0, "global", max_iter, strict, trace_fn)


def patient_fit(problem, theta0, a0=None, max_iter=DEFAULT_MAX_ITER, strict=False,
                trace_fn=None):
    """Patient-by-patient sweeps only."""
    return _fit(problem, theta0, a0, "patient", max_iter, strict, trace_fn)


FITTERS = {"hybrid": hybrid_fit, "global": global_fit, "patient": patient_fit}


def fit(problem, theta0, algorithm="hybrid", **kwargs):
    try:
        fitter = FITTERS[algorithm]
    except KeyError:
        raise ValueError(f"unknown algorithm {algorithm!r}") from None
    return fitter(problem, theta0, **kwargs)
