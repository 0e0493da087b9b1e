"""YAML run configuration shared by the command-line tools.

All keys are optional; omitted keys take the reference simulation design.
Parameter values are on the log scale (beta1/beta2 are log-scale shifts of
gamma). Times are in days, sigma is the natural-scale SD of each marker's
measurement error, tau values are SDs of log-scale random effects.
"""

from dataclasses import dataclass, field, fields, replace

import yaml

from .errors import ConfigError
from .hlik import PenaltyConfig
from .model import REFERENCE_INITIAL, REFERENCE_TIMES, REFERENCE_TRUE, ModelSpec
from .optimizer import FITTERS
from .simstudy import CASE_TAU, DESK_REPLICATES, StudyConfig


@dataclass(frozen=True)
class RunConfig:
    random_effects: tuple = ("lambda", "mu_Tstar", "pi")
    fixed: dict = field(default_factory=lambda: {"mu_V": 3.40, "mu_T": -2.20})
    markers: tuple = (1, 2, 3)
    sigma: dict = field(default_factory=lambda: {1: 0.5, 2: 0.5, 3: 0.5})
    sigma_estimated: tuple = ()
    detection_limits: dict = field(default_factory=dict)
    true_values: dict = field(default_factory=lambda: dict(REFERENCE_TRUE))
    initial_values: dict = field(default_factory=lambda: dict(REFERENCE_INITIAL))
    n_subjects: int = 100
    times: tuple = REFERENCE_TIMES
    case: int = 1
    tau_star: tuple | None = None
    tau_u: tuple = (0.2,)
    algorithm: str = "hybrid"
    max_iter: int = 150
    bootstrap: int = 0
    level: float = 0.95
    replicates: int = DESK_REPLICATES

    @property
    def model(self):
        return ModelSpec(random_effects=tuple(self.random_effects), fixed=dict(self.fixed),
                         markers=tuple(self.markers), sigma=dict(self.sigma),
                         sigma_estimated=tuple(self.sigma_estimated),
                         detection_limits=dict(self.detection_limits))

    @property
    def penalty(self):
        return PenaltyConfig(self.tau_u[0])

    def tau_true(self):
        names = self.model.layout.alpha_names
        if self.tau_star is not None:
            return tuple(float(t) for t in self.tau_star)
        return tuple(CASE_TAU[self.case][nm] for nm in names)

    def validate(self):
        spec = self.model.validate()
        if not self.tau_u:
            raise ConfigError("tau_u", "needs at least one value")
        for t in self.tau_u:
            if not t > 0:
                raise ConfigError("tau_u", f"must be positive, got {t}")
        if self.algorithm not in FITTERS:
            raise ConfigError("algorithm", f"must be one of {sorted(FITTERS)}")
        if self.max_iter < 1:
            raise ConfigError("max_iter", "must be >= 1")
        if self.bootstrap < 0:
            raise ConfigError("bootstrap", "must be >= 0")
        if self.n_subjects < 1:
            raise ConfigError("n_subjects", "must be >= 1")
        if self.replicates < 1:
            raise ConfigError("replicates", "must be >= 1")
        if not 0 < self.level < 1:
            raise ConfigError("level", "must lie in (0, 1)")
        if self.case not in CASE_TAU:
            raise ConfigError("case", f"must be one of {sorted(CASE_TAU)}")
        if self.tau_star is not None:
            if len(self.tau_star) != spec.layout.R:
                raise ConfigError("tau_star", "needs one value per random effect")
            if any(t < 0 for t in self.tau_star):
                raise ConfigError("tau_star", "must be >= 0")
        if any(t < 0 for t in self.times):
            raise ConfigError("times", "observation times must be >= 0")
        for name in spec.layout.names:
            if name.startswith("log_sigma"):
                continue
            if name not in self.initial_values:
                raise ConfigError("initial_values", f"missing {name!r}")
            if name not in self.true_values:
                raise ConfigError("true_values", f"missing {name!r}")
        return self

    def study(self, **overrides):
        """StudyConfig for a Monte Carlo run; needs a common fixed sigma."""
        sig = set(self.sigma.values())
        if len(sig) != 1 or self.sigma_estimated or self.detection_limits:
            raise ConfigError("sigma", "simulation studies need one fixed sigma for all "
                              "markers and no censoring")
        cfg = StudyConfig(replicates=self.replicates, n_subjects=self.n_subjects,
                          case=self.case, tau_u=tuple(self.tau_u),
                          algorithms=(self.algorithm,),
                          random_effects=tuple(self.random_effects),
                          true_values=dict(self.true_values),
                          initial_values=dict(self.initial_values),
                          fixed=dict(self.fixed), times=tuple(self.times),
                          markers=tuple(self.markers), sigma=float(sig.pop()),
                          tau_star=None if self.tau_star is None else tuple(self.tau_star),
                          max_iter=self.max_iter, bootstrap=self.bootstrap,
                          level=self.level)
        return replace(cfg, **overrides)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, dict):
                v = {k: v[k] for k in sorted(v, key=str)}
            out[f.name] = v
        return out


_TUPLES = ("random_effects", "markers", "sigma_estimated", "times", "tau_star", "tau_u")
_INT_KEYED = ("sigma", "detection_limits")


def config_from_dict(d):
    """Build and validate a RunConfig, naming the offending key on error."""
    d = dict(d or {})
    known = {f.name for f in fields(RunConfig)}
    for k in d:
        if k not in known:
            raise ConfigError(k, "unknown configuration key")
    for k in _TUPLES:
        if k in d and d[k] is not None:
            v = d[k]
            d[k] = tuple(v) if isinstance(v, (list, tuple)) else (v,)
    for k in _INT_KEYED:
        if k in d:
            if not isinstance(d[k], dict):
                raise ConfigError(k, "must map marker number to a value")
            try:
                d[k] = {int(m): float(v) for m, v in d[k].items()}
            except (TypeError, ValueError):
                raise ConfigError(k, "must map marker number to a number") from None
    try:
        cfg = RunConfig(**d)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None
    try:
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from None


def load_config(path=None):
    if path is None:
        return config_from_dict({})
    with open(path) as fh:
        try:
            d = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    if d is not None and not isinstance(d, dict):
        raise ConfigError("config", "top level must be a mapping")
    return config_from_dict(d)
