"""ODE engine: adaptive Dormand-Prince 5(4) integration and the HIV model.

The integrator works on *batches* of trajectories advanced in lockstep on a
shared step sequence. The step size is controlled by the worst member of the
batch. Finite-difference stencils are integrated as one batch so that every
stencil point sees the same mesh, which keeps the differenced log-likelihood
smooth in the parameters.
"""

from dataclasses import dataclass
from typing import Callable

import numba as nb
import numpy as np

from .errors import NoInfectedEquilibrium, StepSizeUnderflow

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
MIN_STEP = 1e-12
MAX_STEPS = 200_000

# solver status codes (shared with the model kernel)
OK = 0
UNDERFLOW = 1
NO_EQUILIBRIUM = 2
TOO_MANY_STEPS = 3

# Dormand-Prince 5(4) tableau
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = (9017 / 3168, -355 / 33, 46732 / 5247,
                                49 / 176, -5103 / 18656)
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# error weights, 5th minus embedded 4th order solution
_E1, _E3, _E4, _E5, _E6, _E7 = (71 / 57600, -71 / 16695, 71 / 1920,
                                -17253 / 339200, 22 / 525, -1 / 40)
# quartic dense output (Shampine), rows = stages 1..7, cols = theta^1..theta^4
_P = (
    (1.0, -8048581381 / 2820520608, 8663915743 / 2820520608,
     -12715105075 / 11282082432),
    (0.0, 0.0, 0.0, 0.0),
    (0.0, 131558114200 / 32700410799, -68118460800 / 10900136933,
     87487479700 / 32700410799),
    (0.0, -1754552775 / 470086768, 14199869525 / 1410260304,
     -10690763975 / 1880347072),
    (0.0, 127303824393 / 49829197408, -318862633887 / 49829197408,
     701980252875 / 199316789632),
    (0.0, -282668133 / 205662961, 2019193451 / 616988883,
     -1453857185 / 822651844),
    (0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423),
)

# PI controller (Hairer & Wanner constants)
_BETA = 0.04
_EXPO = 0.2 - 0.75 * _BETA
_SAFE = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 10.0


@nb.njit(cache=True, error_model="numpy")
def _rms_norm(v, scale):
    K, B = v.shape
    worst = 0.0
    for b in range(B):
        s = 0.0
        for j in range(K):
            r = v[j, b] / scale[j, b]
            s += r * r
        s = np.sqrt(s / K)
        if not s <= worst:  # propagates nan
            worst = s
    return worst


@nb.njit(error_model="numpy")
def _dopri5_lockstep(rhs, params, y0, t_out, rtol, atol, h_min, max_steps, out):
    """Integrate all columns of ``y0`` (K x B) from t=0.

    ``params`` is (P x B). The state of member b at ``t_out[j]`` is written to
    ``out[b, j, :]``.
    Returns a status code (OK, UNDERFLOW or TOO_MANY_STEPS).
    """
    K, B = y0.shape
    T = t_out.shape[0]
    y = y0.copy()
    ynew = np.empty_like(y)
    tmp = np.empty_like(y)
    sc = np.empty_like(y)
    k1 = np.empty_like(y)
    k2 = np.empty_like(y)
    k3 = np.empty_like(y)
    k4 = np.empty_like(y)
    k5 = np.empty_like(y)
    k6 = np.empty_like(y)
    k7 = np.empty_like(y)
    err = np.empty_like(y)

    t = 0.0
    j_out = 0
    while j_out < T and t_out[j_out] <= t:
        for i in range(K):
            for b in range(B):
                out[b, j_out, i] = y[i, b]
        j_out += 1
    if j_out == T:
        return 0
    t_end = t_out[T - 1]

    rhs(y, params, k1)

    # starting step (Hairer's heuristic, worst member of the batch)
    for i in range(K):
        for b in range(B):
            sc[i, b] = atol + rtol * abs(y[i, b])
    d0 = _rms_norm(y, sc)
    d1 = _rms_norm(k1, sc)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, t_end - t)
    for i in range(K):
        for b in range(B):
            tmp[i, b] = y[i, b] + h0 * k1[i, b]
    rhs(tmp, params, k2)
    for i in range(K):
        for b in range(B):
            err[i, b] = (k2[i, b] - k1[i, b]) / h0
    d2 = _rms_norm(err, sc)
    dmax = max(d1, d2)
    if dmax <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / dmax) ** 0.2
    h = min(100.0 * h0, h1, t_end - t)

    facold = 1e-4
    rejected = False
    nsteps = 0
    while t < t_end:
        if nsteps >= max_steps:
            return 3
        nsteps += 1
        if t + h > t_end:
            h = t_end - t
        if h < h_min:
            return 1

        for i in range(K):
            for b in range(B):
                tmp[i, b] = y[i, b] + h * _A21 * k1[i, b]
        rhs(tmp, params, k2)
        for i in range(K):
            for b in range(B):
                tmp[i, b] = y[i, b] + h * (_A31 * k1[i, b] + _A32 * k2[i, b])
        rhs(tmp, params, k3)
        for i in range(K):
            for b in range(B):
                tmp[i, b] = y[i, b] + h * (_A41 * k1[i, b] + _A42 * k2[i, b]
                                           + _A43 * k3[i, b])
        rhs(tmp, params, k4)
        for i in range(K):
            for b in range(B):
                tmp[i, b] = y[i, b] + h * (_A51 * k1[i, b] + _A52 * k2[i, b]
                                           + _A53 * k3[i, b] + _A54 * k4[i, b])
        rhs(tmp, params, k5)
        for i in range(K):
            for b in range(B):
                tmp[i, b] = y[i, b] + h * (_A61 * k1[i, b] + _A62 * k2[i, b]
                                           + _A63 * k3[i, b] + _A64 * k4[i, b]
                                           + _A65 * k5[i, b])
        rhs(tmp, params, k6)
        for i in range(K):
            for b in range(B):
                ynew[i, b] = y[i, b] + h * (_B1 * k1[i, b] + _B3 * k3[i, b]
                                            + _B4 * k4[i, b] + _B5 * k5[i, b]
                                            + _B6 * k6[i, b])
        rhs(ynew, params, k7)
        for i in range(K):
            for b in range(B):
                err[i, b] = h * (_E1 * k1[i, b] + _E3 * k3[i, b] + _E4 * k4[i, b]
                                 + _E5 * k5[i, b] + _E6 * k6[i, b] + _E7 * k7[i, b])
                sc[i, b] = atol + rtol * max(abs(y[i, b]), abs(ynew[i, b]))
        e = _rms_norm(err, sc)

        if not np.isfinite(e):
            h *= 0.1
            rejected = True
            continue

        fac11 = max(e, 1e-300) ** _EXPO
        if e <= 1.0:
            t_new = t + h
            if t_new >= t_end:
                t_new = t_end
            while j_out < T and t_out[j_out] <= t_new:
                th = (t_out[j_out] - t) / h
                q2 = th * th
                q3 = q2 * th
                q4 = q3 * th
                w1 = h * (_P[0][0] * th + _P[0][1] * q2 + _P[0][2] * q3 + _P[0][3] * q4)
                w3 = h * (_P[2][1] * q2 + _P[2][2] * q3 + _P[2][3] * q4)
                w4 = h * (_P[3][1] * q2 + _P[3][2] * q3 + _P[3][3] * q4)
                w5 = h * (_P[4][1] * q2 + _P[4][2] * q3 + _P[4][3] * q4)
                w6 = h * (_P[5][1] * q2 + _P[5][2] * q3 + _P[5][3] * q4)
                w7 = h * (_P[6][1] * q2 + _P[6][2] * q3 + _P[6][3] * q4)
                for i in range(K):
                    for b in range(B):
                        out[b, j_out, i] = (y[i, b] + w1 * k1[i, b] + w3 * k3[i, b]
                                            + w4 * k4[i, b] + w5 * k5[i, b]
                                            + w6 * k6[i, b] + w7 * k7[i, b])
                j_out += 1
            t = t_new
            for i in range(K):
                for b in range(B):
                    y[i, b] = ynew[i, b]
                    k1[i, b] = k7[i, b]
            fac = fac11 / facold ** _BETA
            fac = max(1.0 / _FAC_MAX, min(1.0 / _FAC_MIN, fac / _SAFE))
            h_next = h / fac
            if rejected:
                h_next = min(h_next, h)
            facold = max(e, 1e-4)
            rejected = False
            h = h_next
        else:
            h = h / min(1.0 / _FAC_MIN, fac11 / _SAFE)
            rejected = True
    return 0


@dataclass(frozen=True)
class OdeSystem:
    """An autonomous ODE system dX/dt = f(X, xi) with X(0) = h(xi).

    ``rhs`` is a numba-jitted batched evaluator ``rhs(y, params, dy)`` on
    component-major arrays (``y`` is K x B, ``params`` is P x B), writing
    into ``dy``. ``initial`` maps a
    natural-parameter vector to the starting state.
    """

    dimension: int
    rhs: Callable
    initial: Callable | None = None


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), K)


def _check_times(output_times):
    t = np.ascontiguousarray(output_times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("output_times must be a non-empty 1-D sequence")
    if t[0] < 0:
        raise ValueError("output_times must be nonnegative")
    if np.any(np.diff(t) <= 0):
        raise ValueError("output_times must be strictly increasing")
    return t


def integrate_batch(system, params, initial, output_times,
                    rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Lockstep integration of a batch; returns states of shape (B, T, K)."""
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    t = _check_times(output_times)
    p = np.ascontiguousarray(np.atleast_2d(params).T, dtype=float)
    y0 = np.ascontiguousarray(np.atleast_2d(initial).T, dtype=float)
    if y0.shape[0] != system.dimension:
        raise ValueError(f"initial state must have {system.dimension} components")
    out = np.empty((y0.shape[1], t.size, system.dimension))
    status = _dopri5_lockstep(system.rhs, p, y0, t, rtol, atol, MIN_STEP,
                              MAX_STEPS, out)
    if status != OK:
        raise StepSizeUnderflow(f"integration failed (status {status})")
    return out


def integrate(system, params, initial, output_times,
              rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Integrate one trajectory from t=0 and return it at ``output_times``."""
    states = integrate_batch(system, np.atleast_1d(params)[None, :],
                             np.atleast_1d(initial)[None, :], output_times,
                             rtol=rtol, atol=atol)
    return Trajectory(times=_check_times(output_times), states=states[0])


# --------------------------------------------------------------------------
# HIV target-cell model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HivParameters:
    """Natural-scale rates of the target-cell model (day, microlitre units)."""

    lam: float
    gamma: float
    mu_T: float
    mu_Tstar: float
    pi: float
    mu_V: float

    def as_array(self):
        return np.array([self.lam, self.gamma, self.mu_T, self.mu_Tstar,
                         self.pi, self.mu_V])

    @classmethod
    def from_array(cls, v):
        return cls(*(float(x) for x in v))


@nb.njit(cache=True, error_model="numpy")
def _hiv_rhs_batch(y, p, dy):
    for b in range(y.shape[1]):
        T = y[0, b]
        Ts = y[1, b]
        V = y[2, b]
        infection = p[1, b] * T * V
        dy[0, b] = p[0, b] - infection - p[2, b] * T
        dy[1, b] = infection - p[3, b] * Ts
        dy[2, b] = p[4, b] * Ts - p[5, b] * V


@nb.njit(cache=True, error_model="numpy")
def _hiv_equilibrium(lam, gamma, mu_T, mu_Tstar, pi, mu_V, out):
    T0 = mu_V * mu_Tstar / (gamma * pi)
    V0 = (lam - mu_T * T0) / (gamma * T0)
    if not (V0 > 0.0 and np.isfinite(V0) and np.isfinite(T0)):
        return False
    out[0] = T0
    out[1] = mu_V * V0 / pi
    out[2] = V0
    return True


def hiv_rhs(state, params):
    """Right-hand side (dT, dT*, dV) of the target-cell model."""
    y = np.asarray(state, dtype=float).reshape(3, 1)
    p = (params.as_array() if isinstance(params, HivParameters)
         else np.asarray(params, dtype=float)).reshape(6, 1)
    dy = np.empty_like(y)
    _hiv_rhs_batch(y, p, dy)
    return dy[:, 0]


def hiv_equilibrium(params):
    """Untreated infected steady state (T0, T*0, V0).

    Raises NoInfectedEquilibrium when production cannot sustain infection,
    i.e. lam <= mu_T * T0.
    """
    p = params.as_array() if isinstance(params, HivParameters) else np.asarray(params, float)
    out = np.empty(3)
    if not _hiv_equilibrium(p[0], p[1], p[2], p[3], p[4], p[5], out):
        raise NoInfectedEquilibrium(
            "no infected equilibrium: lam <= mu_T * mu_V * mu_Tstar / (gamma * pi)")
    return out


HIV_SYSTEM = OdeSystem(dimension=3, rhs=_hiv_rhs_batch, initial=hiv_equilibrium)


@nb.njit(error_model="numpy")
def _hiv_solve_groups(pre, post, group_start, times_flat, times_start,
                      rtol, atol, h_min, max_steps, out_flat, out_offset, status):
    """Solve many lockstep groups of HIV trajectories started at equilibrium.

    ``pre`` holds natural parameters defining the t<0 equilibrium, ``post``
    the parameters in force for t>=0. Points ``group_start[g]:group_start[g+1]``
    share the output times ``times_flat[times_start[g]:times_start[g+1]]``.
    States are written to ``out_flat[out_offset[p]:]`` as (T, 3) row-major.
    """
    G = group_start.shape[0] - 1
    eq = np.empty(3)
    for g in range(G):
        p0 = group_start[g]
        p1 = group_start[g + 1]
        t_out = times_flat[times_start[g]:times_start[g + 1]]
        T = t_out.shape[0]
        valid = np.zeros(p1 - p0, dtype=np.int64)
        nv = 0
        for p in range(p0, p1):
            if _hiv_equilibrium(pre[p, 0], pre[p, 1], pre[p, 2], pre[p, 3],
                                pre[p, 4], pre[p, 5], eq):
                valid[nv] = p
                nv += 1
            else:
                status[p] = 2
        if nv == 0:
            continue
        par = np.empty((6, nv))
        y0 = np.empty((3, nv))
        for k in range(nv):
            p = valid[k]
            _hiv_equilibrium(pre[p, 0], pre[p, 1], pre[p, 2], pre[p, 3],
                             pre[p, 4], pre[p, 5], eq)
            for c in range(6):
                par[c, k] = post[p, c]
            for c in range(3):
                y0[c, k] = eq[c]
        res = np.empty((nv, T, 3))
        st = _dopri5_lockstep(_hiv_rhs_batch, par, y0, t_out, rtol, atol,
                              h_min, max_steps, res)
        for k in range(nv):
            p = valid[k]
            status[p] = st
            if st == 0:
                o = out_offset[p]
                for j in range(T):
                    for c in range(3):
                        out_flat[o + 3 * j + c] = res[k, j, c]
