"""HIV target-cell mixed-effects model: links, observations, likelihood, simulation.

Every biological rate enters on the natural-log scale. Random effects act
additively on the log scale of the parameters listed in
``ModelSpec.random_effects``; treatment arms act on log infectivity only:

    log gamma_i(t) = gamma0 + beta1 * z1_i + beta2 * z2_i   (t >= 0)
    log gamma_i(t) = gamma0                                 (t < 0)

Subjects start at the untreated infected equilibrium at t = 0.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, NoInfectedEquilibrium
from .ode import (DEFAULT_ATOL, DEFAULT_RTOL, HIV_SYSTEM, MAX_STEPS, MIN_STEP,
                  HivParameters, _hiv_solve_groups, hiv_equilibrium, integrate)
from .problem import HLProblem, ThetaLayout, gaussian_censored_loglik

# transformed parameters in canonical theta order
CANONICAL = ("lambda", "mu_Tstar", "pi", "mu_T", "mu_V", "gamma0", "beta1", "beta2")
ODE_PARAMETERS = ("lambda", "mu_Tstar", "pi", "mu_T", "mu_V", "gamma0")
# column of each transformed parameter in the natural (lam, gamma, mu_T, mu_Tstar, pi, mu_V) vector
_ODE_COLUMN = {"lambda": 0, "gamma0": 1, "mu_T": 2, "mu_Tstar": 3, "pi": 4, "mu_V": 5}

REFERENCE_TRUE = {"lambda": 4.10, "mu_Tstar": -1.60, "pi": -0.170, "gamma0": -3.00,
              "beta1": -1.10, "beta2": -1.40, "mu_T": -2.20, "mu_V": 3.40}
REFERENCE_INITIAL = {"lambda": 5.0, "mu_Tstar": 0.0, "pi": 0.0, "gamma0": -5.0,
                 "beta1": -1.0, "beta2": -1.0}
REFERENCE_TIMES = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0, 24.0, 30.0)
VIRAL_LOAD_LIMIT = 1.7  # log10 copies/mL assay limit

MAX_EQUILIBRIUM_RETRIES = 100
FEASIBILITY_MARGIN = 0.5


def sigma_name(marker):
    return f"log_sigma{marker}"


@dataclass
class ModelSpec:
    """Which parameters carry random effects, which are held fixed, and the
    observation model (markers, error SDs, detection limits)."""

    random_effects: tuple = ("lambda", "mu_Tstar", "pi")
    fixed: dict = field(default_factory=lambda: {"mu_V": 3.40, "mu_T": -2.20})
    markers: tuple = (1, 2, 3)
    sigma: dict = field(default_factory=lambda: {1: 0.5, 2: 0.5, 3: 0.5})
    sigma_estimated: tuple = ()
    detection_limits: dict = field(default_factory=dict)

    def validate(self):
        for name in self.random_effects:
            if name not in ODE_PARAMETERS:
                raise ConfigError("random_effects", f"{name!r} is not an ODE parameter")
        if len(set(self.random_effects)) != len(self.random_effects):
            raise ConfigError("random_effects", "duplicate entries")
        for name in self.fixed:
            if name not in CANONICAL:
                raise ConfigError("fixed", f"unknown parameter {name!r}")
            if name in self.random_effects:
                raise ConfigError("fixed", f"{name!r} also carries a random effect")
        for m in self.markers:
            if m not in (1, 2, 3):
                raise ConfigError("markers", f"marker {m} not in (1, 2, 3)")
            if m not in self.sigma:
                raise ConfigError("sigma", f"missing sigma for marker {m}")
        for m, s in self.sigma.items():
            if m in self.sigma_estimated:
                if not s > 0:
                    raise ConfigError("sigma", f"estimated sigma for marker {m} needs a positive start")
            elif not s >= 0:
                raise ConfigError("sigma", f"sigma for marker {m} must be >= 0")
        for m in self.sigma_estimated:
            if m not in self.markers:
                raise ConfigError("sigma_estimated", f"marker {m} is not observed")
        for m in self.detection_limits:
            if m not in self.markers:
                raise ConfigError("detection_limits", f"marker {m} is not observed")
        return self

    @property
    def layout(self):
        alpha = tuple(n for n in CANONICAL if n in self.random_effects)
        beta = tuple(n for n in CANONICAL
                     if n not in self.random_effects and n not in self.fixed)
        beta += tuple(sigma_name(m) for m in self.markers if m in self.sigma_estimated)
        return ThetaLayout(alpha, beta)

    def theta_from_values(self, values):
        """Pack a name -> transformed value mapping into a theta vector."""
        out = []
        for name in self.layout.names:
            if name.startswith("log_sigma"):
                m = int(name[len("log_sigma"):])
                out.append(values.get(name, np.log(self.sigma[m])))
            else:
                if name not in values:
                    raise ConfigError("parameters", f"missing value for {name!r}")
                out.append(values[name])
        return np.array(out, dtype=float)

    def values_from_theta(self, theta):
        values = dict(self.fixed)
        values.update(zip(self.layout.names, np.asarray(theta, dtype=float).tolist()))
        return values

    def transformed_matrix(self, a, beta):
        """Full (P, 8) matrix of transformed values in CANONICAL order."""
        lay = self.layout
        P = a.shape[0]
        X = np.empty((P, len(CANONICAL)))
        for j, name in enumerate(CANONICAL):
            if name in self.fixed:
                X[:, j] = self.fixed[name]
            elif name in lay.alpha_names:
                X[:, j] = a[:, lay.alpha_names.index(name)]
            else:
                X[:, j] = beta[:, lay.beta_names.index(name)]
        return X

    def sigma_matrix(self, beta):
        """(P, M) natural-scale error SDs for the observed markers."""
        lay = self.layout
        P = beta.shape[0]
        S = np.empty((P, len(self.markers)))
        for k, m in enumerate(self.markers):
            if m in self.sigma_estimated:
                S[:, k] = np.exp(beta[:, lay.beta_names.index(sigma_name(m))])
            else:
                S[:, k] = self.sigma[m]
        return S

    def natural_arrays(self, a, beta, z):
        """Natural ODE parameters before (z = 0) and after treatment start."""
        X = self.transformed_matrix(a, beta)
        pre = np.empty((X.shape[0], 6))
        with np.errstate(over="ignore", under="ignore"):
            for name, col in _ODE_COLUMN.items():
                pre[:, col] = np.exp(X[:, CANONICAL.index(name)])
            post = pre.copy()
            log_gamma = (X[:, CANONICAL.index("gamma0")]
                         + X[:, CANONICAL.index("beta1")] * z[:, 0]
                         + X[:, CANONICAL.index("beta2")] * z[:, 1])
            post[:, 1] = np.exp(log_gamma)
        return pre, post


def link_to_natural(spec, theta, a_i, z=(0.0, 0.0), time=0.0):
    """Natural HIV parameters of one subject at ``time``.

    Treatment indicators are switched off for t < 0.
    """
    _, beta = spec.layout.split(theta)
    zz = np.zeros((1, 2)) if time < 0 else np.asarray(z, dtype=float).reshape(1, 2)
    a = np.asarray(a_i, dtype=float).reshape(1, -1)
    _, post = spec.natural_arrays(a, beta.reshape(1, -1), zz)
    return HivParameters.from_array(post[0])


def observe_transform(state, marker):
    """Expected observation of one marker from the state (T, T*, V)."""
    T, Ts, V = (float(x) for x in state)
    if marker == 1:
        if not V > 0:
            raise DomainError(f"viral load must be positive, got {V}")
        return float(np.log10(V))
    if marker == 2:
        return (T + Ts) ** 0.25
    if marker == 3:
        return Ts ** 0.25
    raise ValueError(f"unknown marker {marker}")


def _observe_vec(T, Ts, V, markers):
    with np.errstate(invalid="ignore", divide="ignore"):
        pred = np.where(markers == 1, np.log10(np.where(V > 0, V, np.nan)),
                        np.where(markers == 2, np.power(T + Ts, 0.25),
                                 np.power(Ts, 0.25)))
    return pred


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class SubjectData:
    subject: str
    times: np.ndarray
    markers: np.ndarray
    values: np.ndarray
    censored: np.ndarray
    z: tuple = (0, 0)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.markers = np.asarray(self.markers, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        self.censored = np.asarray(self.censored, dtype=bool)
        if np.any(self.times < 0):
            raise ValueError(f"subject {self.subject}: negative observation time")

    def __len__(self):
        return self.times.size


CSV_HEADER = ("subject", "time", "marker", "value", "censored", "z1", "z2")


def _fmt(x):
    return format(float(x), ".17g")


def write_dataset(path, subjects):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in subjects:
            for t, m, y, c in zip(s.times, s.markers, s.values, s.censored):
                w.writerow([s.subject, _fmt(t), int(m), _fmt(y), int(c),
                            int(s.z[0]), int(s.z[1])])


def read_dataset(path):
    """Read the ``subject,time,marker,value,censored,z1,z2`` CSV format."""
    rows = {}
    order = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError("dataset", f"missing columns {sorted(missing)}")
        for r in reader:
            sid = r["subject"]
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            rows[sid].append(r)
    subjects = []
    for sid in order:
        rr = rows[sid]
        z = (int(float(rr[0]["z1"])), int(float(rr[0]["z2"])))
        subjects.append(SubjectData(
            subject=sid,
            times=[float(r["time"]) for r in rr],
            markers=[int(r["marker"]) for r in rr],
            values=[float(r["value"]) for r in rr],
            censored=[r["censored"].strip().lower() in ("1", "true") for r in rr],
            z=z,
        ))
    return subjects


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SubjectDesign:
    times: tuple
    markers: tuple
    z: tuple


def standard_design(n_subjects=100, times=REFERENCE_TIMES, markers=(1, 2, 3)):
    """All markers at all times; first half of subjects in arm 1, rest arm 2."""
    t = tuple(float(x) for m in markers for x in times)
    mk = tuple(int(m) for m in markers for _ in times)
    half = n_subjects // 2
    return [SubjectDesign(t, mk, (1, 0) if i < half else (0, 1))
            for i in range(n_subjects)]


def design_of(subjects):
    return [SubjectDesign(tuple(s.times.tolist()), tuple(s.markers.tolist()),
                          tuple(s.z)) for s in subjects]


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate_subject(spec, theta, tau, design, seed, subject="1",
                     rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, return_effects=False):
    """Draw random effects and noisy observations for one subject.

    Random effects are centred normals with SDs ``tau``; a draw without an
    infected equilibrium is redrawn (bounded retries). With
    ``return_effects`` the drawn a_i = alpha + b_i is returned as well.
    """
    rng = _as_rng(seed)
    lay = spec.layout
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (lay.R,))
    if np.any(tau < 0):
        raise ValueError("tau must be nonnegative")
    alpha, beta = lay.split(theta)
    z = np.asarray(design.z, dtype=float).reshape(1, 2)
    for _ in range(MAX_EQUILIBRIUM_RETRIES):
        a = alpha + tau * rng.standard_normal(lay.R)
        pre, post = spec.natural_arrays(a.reshape(1, -1), beta.reshape(1, -1), z)
        try:
            y0 = hiv_equilibrium(pre[0])
        except NoInfectedEquilibrium:
            continue
        break
    else:
        raise NoInfectedEquilibrium(
            f"no feasible random-effect draw in {MAX_EQUILIBRIUM_RETRIES} tries")
    times = np.asarray(design.times, dtype=float)
    markers = np.asarray(design.markers, dtype=int)
    ut, tidx = np.unique(times, return_inverse=True)
    states = integrate(HIV_SYSTEM, post[0], y0, ut, rtol=rtol, atol=atol).states[tidx]
    mean = _observe_vec(states[:, 0], states[:, 1], states[:, 2], markers)
    sig = spec.sigma_matrix(beta.reshape(1, -1))[0]
    sd = sig[[spec.markers.index(m) for m in markers]]
    values = mean + sd * rng.standard_normal(markers.size)
    censored = np.zeros(markers.size, dtype=bool)
    for m, d in spec.detection_limits.items():
        hit = (markers == m) & (values < d)
        censored |= hit
        values[hit] = d
    data = SubjectData(subject=str(subject), times=times, markers=markers,
                       values=values, censored=censored, z=tuple(design.z))
    return (data, a) if return_effects else data


def simulate_dataset(spec, theta, tau, designs, seed):
    rng = _as_rng(seed)
    return [simulate_subject(spec, theta, tau, d, rng, subject=str(i + 1))
            for i, d in enumerate(designs)]


# --------------------------------------------------------------------------
# batched likelihood
# --------------------------------------------------------------------------

class HivProblem(HLProblem):
    """Subjects of a dataset under a ModelSpec and a penalty, evaluated in batch."""

    def __init__(self, spec, subjects, penalty, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
        spec.validate()
        self.spec = spec
        self.subjects = list(subjects)
        self.penalty = penalty
        self.layout = spec.layout
        self.n = len(self.subjects)
        self.tau = penalty.tau_vector(self.layout.R)
        self.rtol = rtol
        self.atol = atol
        self._prepare()

    def _prepare(self):
        spec = self.spec
        times, rec_ptr, tidx, mcol, mk, vals, cens = [], [0], [], [], [], [], []
        for s in self.subjects:
            for m, c, y in zip(s.markers, s.censored, s.values):
                if m not in spec.markers:
                    raise ConfigError("dataset", f"subject {s.subject}: marker {m} not in model")
                if c and (m not in spec.detection_limits
                          or not np.isclose(y, spec.detection_limits[m])):
                    raise ConfigError("dataset", f"subject {s.subject}: censored value "
                                      f"for marker {m} must equal its detection limit")
            ut, inv = np.unique(s.times, return_inverse=True)
            times.append(ut)
            tidx.append(inv)
            mcol.append([spec.markers.index(m) for m in s.markers])
            mk.append(s.markers)
            vals.append(s.values)
            cens.append(s.censored)
            rec_ptr.append(rec_ptr[-1] + len(s))
        self._times = times
        self._ntimes = np.array([t.size for t in times])
        self._rec_ptr = np.array(rec_ptr)
        self._nrec = np.diff(self._rec_ptr)
        self._rec_tidx = np.concatenate(tidx).astype(np.int64)
        self._rec_mcol = np.concatenate(mcol).astype(np.int64)
        self._rec_marker = np.concatenate(mk).astype(np.int64)
        self._rec_value = np.concatenate(vals)
        self._rec_cens = np.concatenate(cens)
        self._z = np.array([s.z for s in self.subjects], dtype=float).reshape(-1, 2)

    def solve_points(self, subjects, a, beta, groups=None):
        """States at each subject's observation times; returns (flat, offsets, status)."""
        subjects = np.asarray(subjects, dtype=np.int64)
        P = subjects.size
        if groups is None:
            group_start = np.arange(P + 1, dtype=np.int64)
        else:
            g = np.asarray(groups)
            cut = np.flatnonzero(g[1:] != g[:-1]) + 1
            group_start = np.concatenate(([0], cut, [P])).astype(np.int64)
        pre, post = self.spec.natural_arrays(a, beta, self._z[subjects])
        gsub = subjects[group_start[:-1]]
        times_flat = np.concatenate([self._times[s] for s in gsub])
        times_start = np.concatenate(([0], np.cumsum(self._ntimes[gsub]))).astype(np.int64)
        sizes = 3 * self._ntimes[subjects]
        offsets = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
        out = np.full(int(sizes.sum()), np.nan)
        status = np.zeros(P, dtype=np.int64)
        _hiv_solve_groups(np.ascontiguousarray(pre), np.ascontiguousarray(post),
                          group_start, times_flat, times_start, self.rtol, self.atol,
                          MIN_STEP, MAX_STEPS, out, offsets, status)
        return out, offsets, status

    def loglik_points(self, subjects, a, beta, groups=None):
        subjects = np.asarray(subjects, dtype=np.int64)
        a = np.asarray(a, dtype=float).reshape(subjects.size, self.layout.R)
        beta = np.asarray(beta, dtype=float).reshape(subjects.size, self.layout.n_beta)
        P = subjects.size
        out, offsets, status = self.solve_points(subjects, a, beta, groups)
        counts = self._nrec[subjects]
        point_of = np.repeat(np.arange(P), counts)
        first = np.cumsum(counts) - counts
        rec = np.arange(counts.sum()) - np.repeat(first, counts) \
            + np.repeat(self._rec_ptr[subjects], counts)
        base = offsets[point_of] + 3 * self._rec_tidx[rec]
        pred = _observe_vec(out[base], out[base + 1], out[base + 2], self._rec_marker[rec])
        sig = self.spec.sigma_matrix(beta)[point_of, self._rec_mcol[rec]]
        with np.errstate(invalid="ignore", divide="ignore"):
            ll = gaussian_censored_loglik(self._rec_value[rec], pred, sig, self._rec_cens[rec])
        total = np.bincount(point_of, weights=ll, minlength=P)
        total[(status != 0) | ~np.isfinite(total)] = -np.inf
        return total

    def feasible_start(self, theta):
        """Raise one log-rate until the untreated infected equilibrium exists.

        The infected steady state requires
        log(lam) + log(gamma) + log(pi) > log(mu_T) + log(mu_Tstar) + log(mu_V).
        The first free parameter among (gamma0, lambda, pi) is moved up to
        that threshold plus a fixed margin when the condition fails.
        """
        theta = np.array(theta, dtype=float)
        lay = self.layout
        vals = self.spec.values_from_theta(theta)
        excess = (vals["lambda"] + vals["gamma0"] + vals["pi"]
                  - vals["mu_T"] - vals["mu_Tstar"] - vals["mu_V"])
        if excess > 0:
            return theta
        for name in ("gamma0", "lambda", "pi"):
            if name in lay.names:
                theta[lay.index(name)] += FEASIBILITY_MARGIN - excess
                return theta
        return theta

    def simulate_like(self, theta, rng, tau=None):
        tau = self.tau if tau is None else tau
        subjects = simulate_dataset(self.spec, theta, tau, design_of(self.subjects), rng)
        return HivProblem(self.spec, subjects, self.penalty, rtol=self.rtol, atol=self.atol)


def subject_loglik(spec, theta, a_i, data, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Conditional log-likelihood l(Y_i; theta, b_i) of one subject."""
    from .hlik import PenaltyConfig

    prob = HivProblem(spec, [data], PenaltyConfig(1.0), rtol=rtol, atol=atol)
    _, beta = spec.layout.split(theta)
    return float(prob.loglik_points([0], np.asarray(a_i, float).reshape(1, -1),
                                    beta.reshape(1, -1))[0])
