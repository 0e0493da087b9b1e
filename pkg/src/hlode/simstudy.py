"""Monte Carlo studies: convergence of the fitting algorithms, bias with and
without bootstrap correction, RMSE and interval coverage.

Every replicate draws its dataset from a seed derived from (master seed,
case, replicate index), so records do not depend on worker count or on how
many other replicates were run. Fits at different working penalties or with
different algorithms share the replicate's dataset.
"""

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bootstrap import bias_correct, inflate_variance
from .errors import ConfigError, HlodeError
from .hlik import PenaltyConfig
from .inference import confidence_intervals, sandwich
from .model import (REFERENCE_INITIAL, REFERENCE_TIMES, REFERENCE_TRUE, HivProblem, ModelSpec,
                    standard_design, simulate_dataset)
from .optimizer import FITTERS, fit

log = logging.getLogger(__name__)

CASE_TAU = {
    1: {"lambda": 0.2, "mu_Tstar": 0.2, "pi": 0.2, "mu_T": 0.2},
    2: {"lambda": 0.1, "mu_Tstar": 0.3, "pi": 0.2, "mu_T": 0.2},
}
DESK_REPLICATES = 50
FULL_REPLICATES = 500

REPORT_COLUMNS = ("parameter", "true", "mean_est_uncorr", "mean_est_corr", "bias_uncorr",
                  "bias_corr", "rmse", "coverage", "n_converged")


@dataclass(frozen=True)
class StudyConfig:
    """One Monte Carlo experiment. Defaults reproduce the reference design at
    desk scale (50 replicates instead of 500)."""

    replicates: int = DESK_REPLICATES
    n_subjects: int = 100
    case: int = 1
    tau_u: tuple = (0.2,)
    algorithms: tuple = ("hybrid",)
    random_effects: tuple = ("lambda", "mu_Tstar", "pi")
    true_values: dict = field(default_factory=lambda: dict(REFERENCE_TRUE))
    initial_values: dict = field(default_factory=lambda: dict(REFERENCE_INITIAL))
    fixed: dict = field(default_factory=lambda: {"mu_V": 3.40, "mu_T": -2.20})
    times: tuple = REFERENCE_TIMES
    markers: tuple = (1, 2, 3)
    sigma: float = 0.5
    fit_sigma: float | None = None
    tau_star: tuple | None = None
    max_iter: int = 150
    inference: bool = True
    bootstrap: int = 0
    level: float = 0.95
    seed: int = 0

    def validate(self):
        if self.replicates < 1:
            raise ConfigError("replicates", "must be >= 1")
        if self.n_subjects < 2:
            raise ConfigError("n_subjects", "must be >= 2")
        if self.case not in CASE_TAU:
            raise ConfigError("case", f"must be one of {sorted(CASE_TAU)}")
        if not self.tau_u:
            raise ConfigError("tau_u", "needs at least one value")
        for t in self.tau_u:
            if not t > 0:
                raise ConfigError("tau_u", f"must be positive, got {t}")
        for alg in self.algorithms:
            if alg not in FITTERS:
                raise ConfigError("algorithms", f"unknown algorithm {alg!r}")
        if self.sigma < 0:
            raise ConfigError("sigma", "must be >= 0")
        if not self.effective_fit_sigma > 0:
            raise ConfigError("fit_sigma", "the fitted error SD must be positive")
        if self.tau_star is not None and len(self.tau_star) != len(self.random_effects):
            raise ConfigError("tau_star", "needs one value per random effect")
        if self.max_iter < 1:
            raise ConfigError("max_iter", "must be >= 1")
        if self.bootstrap < 0:
            raise ConfigError("bootstrap", "must be >= 0")
        if not 0 < self.level < 1:
            raise ConfigError("level", "must lie in (0, 1)")
        self.fit_spec.validate()
        return self

    @property
    def effective_fit_sigma(self):
        return self.sigma if self.fit_sigma is None else self.fit_sigma

    def _spec(self, sigma):
        return ModelSpec(random_effects=tuple(self.random_effects), fixed=dict(self.fixed),
                         markers=tuple(self.markers),
                         sigma={m: float(sigma) for m in self.markers})

    @property
    def sim_spec(self):
        return self._spec(self.sigma)

    @property
    def fit_spec(self):
        return self._spec(self.effective_fit_sigma)

    @property
    def true_tau(self):
        if self.tau_star is not None:
            return np.asarray(self.tau_star, dtype=float)
        names = self.fit_spec.layout.alpha_names
        return np.array([CASE_TAU[self.case][nm] for nm in names])

    @property
    def theta_true(self):
        return self.fit_spec.theta_from_values(self.true_values)

    @property
    def theta_initial(self):
        return self.fit_spec.theta_from_values(self.initial_values)

    def to_dict(self):
        d = asdict(self)
        for k in ("tau_u", "algorithms", "random_effects", "times", "markers", "tau_star"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("tau_u", "algorithms", "random_effects", "times", "markers", "tau_star"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown study setting")
        return cls(**d)


def preset_config(case=1, paper_scale=False, **overrides):
    """The published simulation design; ``paper_scale`` restores 500 replicates."""
    cfg = StudyConfig(case=case, replicates=FULL_REPLICATES if paper_scale else DESK_REPLICATES)
    return replace(cfg, **overrides)


# --------------------------------------------------------------------------
# replicates
# --------------------------------------------------------------------------

@dataclass
class ReplicateRecord:
    """Outcome of one fit of one replicate dataset."""

    index: int
    tau_u: float
    algorithm: str
    converged: bool
    iterations: int
    reason: str
    objective: float | None = None
    theta_hat: list | None = None
    theta_corr: list | None = None
    se: list | None = None
    covered: list | None = None
    boot_converged: int | None = None
    error: str | None = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def data_seed(config, index):
    return np.random.SeedSequence(config.seed, spawn_key=(config.case, index))


def bootstrap_seed(config, index, tau_index, algorithm_index):
    return np.random.SeedSequence(config.seed, spawn_key=(config.case, index, tau_index,
                                                          algorithm_index, 1))


def replicate_dataset(config, index):
    """Simulated subjects of replicate ``index``."""
    designs = standard_design(config.n_subjects, config.times, config.markers)
    rng = np.random.default_rng(data_seed(config, index))
    return simulate_dataset(config.sim_spec, config.theta_true, config.true_tau, designs, rng)


def _fit_record(config, subjects, index, k_tau, tau_u, k_alg, algorithm):
    problem = HivProblem(config.fit_spec, subjects, PenaltyConfig(tau_u))
    theta0 = config.theta_initial
    rec = ReplicateRecord(index=index, tau_u=float(tau_u), algorithm=algorithm,
                          converged=False, iterations=0, reason="")
    try:
        res = fit(problem, theta0, algorithm, max_iter=config.max_iter)
    except HlodeError as exc:
        rec.reason, rec.error = "error", f"{type(exc).__name__}: {exc}"
        return rec
    rec.converged = bool(res.converged)
    rec.iterations = int(res.report.iterations)
    rec.reason = res.report.reason
    rec.objective = float(res.objective)
    rec.theta_hat = res.theta.tolist()
    if not res.converged or not config.inference:
        return rec
    try:
        center = res.theta
        cov = sandwich(problem, res.theta, res.a).covariance
        if config.bootstrap:
            boot = bias_correct(problem, res.theta, S=config.bootstrap,
                                seed=bootstrap_seed(config, index, k_tau, k_alg),
                                theta0=theta0, algorithm=algorithm,
                                max_iter=config.max_iter)
            rec.boot_converged = boot.n_converged
            rec.theta_corr = boot.corrected.tolist()
            center = boot.corrected
            cov = inflate_variance(cov, boot.n_converged)
        cis = confidence_intervals(center, cov, config.level)
        rec.se = [ci.se for ci in cis]
        rec.covered = [bool(ci.contains(t)) for ci, t in zip(cis, config.theta_true)]
    except (HlodeError, np.linalg.LinAlgError) as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
    return rec


def run_replicate(config, index):
    """Simulate replicate ``index`` and fit it for every (tau_u, algorithm) cell."""
    try:
        subjects = replicate_dataset(config, index)
    except HlodeError as exc:
        return [ReplicateRecord(index=index, tau_u=float(t), algorithm=alg, converged=False,
                                iterations=0, reason="error",
                                error=f"{type(exc).__name__}: {exc}")
                for t in config.tau_u for alg in config.algorithms]
    out = []
    for k_tau, tau_u in enumerate(config.tau_u):
        for k_alg, alg in enumerate(config.algorithms):
            rec = _fit_record(config, subjects, index, k_tau, tau_u, k_alg, alg)
            log.info("replicate %d tau_u=%g %s: converged=%s iterations=%d",
                     index, tau_u, alg, rec.converged, rec.iterations)
            out.append(rec)
    return out


def _run_indexed(args):
    config, index = args
    return run_replicate(config, index)


def run_study(config, workers=1, indices=None, on_record=None):
    """All replicate records, ordered by (index, tau_u, algorithm).

    Replicates run on ``workers`` processes; ordering and content do not
    depend on the worker count.
    """
    config.validate()
    indices = range(config.replicates) if indices is None else indices
    jobs = [(config, i) for i in indices]
    records = []
    if workers <= 1:
        results = map(_run_indexed, jobs)
        for recs in results:
            records.extend(recs)
            for r in recs:
                if on_record:
                    on_record(r)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for recs in pool.map(_run_indexed, jobs):
                records.extend(recs)
                for r in recs:
                    if on_record:
                        on_record(r)
    return records


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

@dataclass
class StudySection:
    """Summary of all records sharing (tau_u, algorithm)."""

    tau_u: float
    algorithm: str
    names: tuple
    true: np.ndarray
    mean_uncorr: np.ndarray
    mean_corr: np.ndarray
    bias_uncorr: np.ndarray
    bias_corr: np.ndarray
    rmse: np.ndarray
    variance: np.ndarray
    coverage: np.ndarray
    n_converged: int
    n_records: int
    mean_iterations: float
    success_rate: float

    def rows(self):
        for j, nm in enumerate(self.names):
            yield {"parameter": nm, "true": self.true[j],
                   "mean_est_uncorr": self.mean_uncorr[j], "mean_est_corr": self.mean_corr[j],
                   "bias_uncorr": self.bias_uncorr[j], "bias_corr": self.bias_corr[j],
                   "rmse": self.rmse[j], "coverage": self.coverage[j],
                   "n_converged": self.n_converged}


@dataclass
class StudyReport:
    sections: list
    records: list

    def section(self, tau_u=None, algorithm=None):
        for s in self.sections:
            if (tau_u is None or np.isclose(s.tau_u, tau_u)) and \
                    (algorithm is None or s.algorithm == algorithm):
                return s
        raise KeyError(f"no section for tau_u={tau_u}, algorithm={algorithm}")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("tau_u", "algorithm") + REPORT_COLUMNS)
        for s in self.sections:
            for row in s.rows():
                w.writerow([repr(float(s.tau_u)), s.algorithm] + [_cell(row[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def algorithm_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("tau_u", "algorithm", "mean_iterations", "success_rate", "n_records"))
        for s in self.sections:
            w.writerow([repr(float(s.tau_u)), s.algorithm, _cell(s.mean_iterations),
                        _cell(s.success_rate), s.n_records])
        return buf.getvalue()


def _cell(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def summarize(names, true, estimates, covered=None, corrected=None):
    """Bias, RMSE, variance and coverage of one set of converged estimates.

    RMSE and coverage refer to the corrected estimator when one is given.
    """
    true = np.asarray(true, dtype=float)
    est = np.asarray(estimates, dtype=float).reshape(-1, true.size)
    target = est if corrected is None else np.asarray(corrected, dtype=float).reshape(-1, true.size)
    nan = np.full(true.size, np.nan)
    if est.shape[0] == 0:
        return dict(mean_uncorr=nan, mean_corr=nan, bias_uncorr=nan, bias_corr=nan,
                    rmse=nan, variance=nan, coverage=nan)
    err = target - true
    cov = nan if covered is None or len(covered) == 0 else np.mean(np.asarray(covered, float), axis=0)
    mean_corr = nan if corrected is None else target.mean(axis=0)
    return dict(
        mean_uncorr=est.mean(axis=0), mean_corr=mean_corr,
        bias_uncorr=est.mean(axis=0) - true,
        bias_corr=nan if corrected is None else mean_corr - true,
        rmse=np.sqrt(np.mean(err ** 2, axis=0)), variance=target.var(axis=0),
        coverage=cov)


def aggregate(records, config):
    """Per-(tau_u, algorithm) summaries. Non-converged records count in the
    success rate only; iteration means cover converged fits."""
    names = config.fit_spec.layout.names
    true = config.theta_true
    sections = []
    for tau_u in config.tau_u:
        for alg in config.algorithms:
            cell = [r for r in records if np.isclose(r.tau_u, tau_u) and r.algorithm == alg]
            conv = [r for r in cell if r.converged and r.error is None]
            est = [r.theta_hat for r in conv]
            corr = [r.theta_corr for r in conv] if config.bootstrap else None
            if corr is not None and any(c is None for c in corr):
                corr = None
            covered = [r.covered for r in conv if r.covered is not None]
            stats = summarize(names, true, est, covered or None, corr)
            its = [r.iterations for r in cell if r.converged]
            sections.append(StudySection(
                tau_u=float(tau_u), algorithm=alg, names=names, true=true,
                n_converged=len(conv), n_records=len(cell),
                mean_iterations=float(np.mean(its)) if its else float("nan"),
                success_rate=len(its) / len(cell) if cell else float("nan"), **stats))
    return StudyReport(sections=sections, records=list(records))
