"""Command-line front end.

    hlode simulate --config run.yaml --seed 1 --out data.csv
    hlode fit data.csv --config run.yaml --bootstrap 20 --out fit.json
    hlode wald fit.json --contrast beta2-beta1
    hlode simstudy --config run.yaml --tau-u 0.1,0.2,0.3 --out-dir study/
    hlode rerun study/manifest.yaml --out-dir again/

Every command writes a YAML manifest holding the resolved configuration,
options and seed; ``rerun`` replays it and reproduces the outputs byte for
byte. Exit status: 0 success, 2 usage or configuration error, 3
non-convergence, 4 numerical failure.
"""

import argparse
import csv
import io
import json
import logging
import re
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bootstrap import bias_correct, inflate_variance
from .config import config_from_dict, load_config
from .errors import ConfigError, HlodeError, NonConvergence
from .hlik import PenaltyConfig
from .inference import confidence_intervals, sandwich, wald_statistic
from .model import HivProblem, standard_design, read_dataset, simulate_dataset, write_dataset
from .optimizer import FITTERS, fit
from .simstudy import FULL_REPLICATES, aggregate, run_study

log = logging.getLogger("hlode")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGENCE = 3
EXIT_NUMERICAL = 4


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _new_seed():
    return int(np.random.SeedSequence().entropy)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(path, command, options, cfg, seed, outputs, duration):
    manifest = {
        "command": command,
        "options": options,
        "config": None if cfg is None else cfg.to_dict(),
        "seed": seed,
        "version": __version__,
        "duration_seconds": round(float(duration), 3),
        "outputs": [str(p) for p in outputs],
    }
    Path(path).write_text(yaml.safe_dump(manifest, sort_keys=True))
    return manifest


_TERM = re.compile(r"([+-])?(?:(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)\*)?([A-Za-z_]\w*)")


def parse_contrast(text, names):
    """'beta2-beta1' or '0.5*beta1+beta2' -> coefficient vector over ``names``."""
    s = text.replace(" ", "")
    c = np.zeros(len(names))
    pos = 0
    while pos < len(s):
        m = _TERM.match(s, pos)
        if m is None or (pos > 0 and m.group(1) is None):
            raise ConfigError("contrast", f"cannot parse {text!r}")
        sign, coef, name = m.groups()
        if name not in names:
            raise ConfigError("contrast", f"{name!r} is not an estimated parameter")
        c[names.index(name)] += (-1.0 if sign == "-" else 1.0) * (float(coef) if coef else 1.0)
        pos = m.end()
    if pos == 0:
        raise ConfigError("contrast", "empty contrast")
    return c


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def run_simulate(opts, cfg):
    spec = cfg.model
    theta = spec.theta_from_values(cfg.true_values)
    designs = standard_design(cfg.n_subjects, cfg.times, cfg.markers)
    rng = np.random.default_rng(np.random.SeedSequence(opts["seed"]))
    subjects = simulate_dataset(spec, theta, cfg.tau_true(), designs, rng)
    write_dataset(opts["out"], subjects)
    print(f"wrote {sum(len(s) for s in subjects)} records for {len(subjects)} subjects "
          f"to {opts['out']}")
    return EXIT_OK, [opts["out"]]


def _fit_outputs(out):
    out = Path(out)
    return out, out.with_suffix(".csv"), out.with_name(out.stem + "_random_effects.csv")


def run_fit(opts, cfg):
    spec = cfg.model
    subjects = read_dataset(opts["dataset"])
    tau_u = opts["tau_u"] if opts["tau_u"] is not None else cfg.tau_u[0]
    problem = HivProblem(spec, subjects, PenaltyConfig(tau_u))
    theta0 = spec.theta_from_values(cfg.initial_values)
    res = fit(problem, theta0, opts["algorithm"], max_iter=opts["max_iter"])
    names = list(problem.layout.names)
    report = {
        "algorithm": opts["algorithm"], "tau_u": float(tau_u), "names": names,
        "fixed": sorted(spec.fixed), "converged": bool(res.converged),
        "iterations": res.report.iterations, "reason": res.report.reason,
        "objective": res.objective, "grad_max": res.report.grad_max,
        "switch_iteration": res.switch_iteration, "theta_hat": res.theta.tolist(),
        "trace": res.trace,
    }
    json_path, csv_path, re_path = _fit_outputs(opts["out"])
    outputs = [json_path]
    status = EXIT_OK
    if res.converged:
        cov = sandwich(problem, res.theta, res.a).covariance
        center = res.theta
        report["covariance_uncorrected"] = cov.tolist()
        if opts["bootstrap"]:
            boot = bias_correct(problem, res.theta, S=opts["bootstrap"], seed=opts["seed"],
                                theta0=theta0, algorithm=opts["algorithm"],
                                max_iter=opts["max_iter"])
            center = boot.corrected
            cov = inflate_variance(cov, boot.n_converged)
            report["bootstrap"] = {"S": boot.S, "n_converged": boot.n_converged,
                                   "bias": boot.bias.tolist()}
            report["theta_corrected"] = boot.corrected.tolist()
        report["estimate"] = center.tolist()
        report["covariance"] = cov.tolist()
        cis = confidence_intervals(center, cov, cfg.level, names)
        report["intervals"] = [
            {"name": ci.name, "estimate": ci.estimate, "se": ci.se, "lower": ci.lower,
             "upper": ci.upper, "natural": list(ci.natural)} for ci in cis]
        b = res.b
        report["random_effects"] = {"names": list(problem.layout.alpha_names),
                                    "subjects": [s.subject for s in subjects],
                                    "b": b.tolist()}
        _write_fit_csv(csv_path, report)
        _write_random_effects(re_path, report)
        outputs += [csv_path, re_path]
        print(_fit_table(report))
    else:
        status = EXIT_NONCONVERGENCE
        print(f"fit did not converge after {res.report.iterations} iterations: "
              f"{res.report.reason}", file=sys.stderr)
    _dump_json(json_path, report)
    return status, outputs


def _write_fit_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("parameter", "uncorrected", "corrected", "se", "lower", "upper",
                    "natural_estimate", "natural_lower", "natural_upper"))
        corr = report.get("theta_corrected")
        for j, ci in enumerate(report["intervals"]):
            w.writerow([ci["name"], repr(report["theta_hat"][j]),
                        repr(corr[j]) if corr else "", repr(ci["se"]), repr(ci["lower"]),
                        repr(ci["upper"])] + [repr(x) for x in ci["natural"]])


def _write_random_effects(path, report):
    re_ = report["random_effects"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject"] + [f"b_{n}" for n in re_["names"]])
        for sid, row in zip(re_["subjects"], re_["b"]):
            w.writerow([sid] + [repr(x) for x in row])


def _fit_table(report):
    buf = io.StringIO()
    corr = report.get("theta_corrected")
    buf.write(f"{'parameter':<12}{'uncorrected':>13}{'corrected':>13}"
              f"{'95% interval':>24}{'natural scale':>30}\n")
    for j, ci in enumerate(report["intervals"]):
        c = f"{corr[j]:.4g}" if corr else "-"
        interval = f"[{ci['lower']:.3g}; {ci['upper']:.3g}]"
        est, lo, hi = ci["natural"]
        natural = f"{est:.3g} [{lo:.3g}; {hi:.3g}]"
        buf.write(f"{ci['name']:<12}{report['theta_hat'][j]:>13.4g}{c:>13}"
                  f"{interval:>24}{natural:>30}\n")
    buf.write(f"converged in {report['iterations']} iterations ({report['algorithm']})")
    return buf.getvalue()


def run_wald(opts, cfg):
    if opts["report"] is not None:
        report = json.loads(Path(opts["report"]).read_text())
        names = report["names"]
        for term in re.findall(r"[A-Za-z_][A-Za-z0-9_]*", opts["contrast"]):
            if term in report.get("fixed", []):
                raise ConfigError("contrast", f"{term!r} is fixed, not estimated")
        if "covariance" not in report:
            raise NonConvergence("fit report has no covariance (fit did not converge)")
        c = parse_contrast(opts["contrast"], names)
        theta = np.asarray(report["estimate"])
        cov = np.asarray(report["covariance"])
        if not np.any(c):
            est, var, w, p = 0.0, 0.0, 0.0, 1.0
        else:
            r = wald_statistic(float(c @ theta), float(c @ cov @ c))
            est, var, w, p = r.estimate, r.variance, r.statistic, r.p_value
    else:
        if opts["estimate"] is None or opts["variance"] is None:
            raise ConfigError("wald", "give a fit report or both --estimate and --variance")
        r = wald_statistic(opts["estimate"], opts["variance"])
        est, var, w, p = r.estimate, r.variance, r.statistic, r.p_value
    result = {"contrast": opts["contrast"], "estimate": est, "variance": var,
              "statistic": w, "p_value": p}
    print(f"contrast {opts['contrast']}: estimate {est:.4g}, variance {var:.4g}, "
          f"W = {w:.3f}, p = {p:.2g}")
    outputs = []
    if opts["out"]:
        _dump_json(opts["out"], result)
        outputs.append(opts["out"])
    return EXIT_OK, outputs


def run_simstudy(opts, cfg):
    overrides = {"seed": opts["seed"]}
    if opts["replicates"] is not None:
        overrides["replicates"] = opts["replicates"]
    if opts["paper_scale"]:
        overrides["replicates"] = FULL_REPLICATES
    if opts["tau_u"] is not None:
        overrides["tau_u"] = tuple(opts["tau_u"])
    if opts["case"] is not None:
        overrides["case"] = opts["case"]
    if opts["algorithm"] is not None:
        overrides["algorithms"] = tuple(opts["algorithm"])
    if opts["bootstrap"] is not None:
        overrides["bootstrap"] = opts["bootstrap"]
    study = cfg.study(**overrides).validate()
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rec_path = out / "replicates.jsonl"
    with open(rec_path, "w") as fh:
        def emit(r):
            fh.write(r.to_json() + "\n")
            fh.flush()
        records = run_study(study, workers=opts["workers"], on_record=emit)
    report = aggregate(records, study)
    (out / "report.csv").write_text(report.to_csv())
    (out / "algorithms.csv").write_text(report.algorithm_csv())
    for s in report.sections:
        print(f"tau_u={s.tau_u:g} {s.algorithm}: {s.n_converged}/{s.n_records} converged, "
              f"mean iterations {s.mean_iterations:.1f}")
    return EXIT_OK, [out / "report.csv", out / "algorithms.csv", rec_path]


COMMANDS = {"simulate": run_simulate, "fit": run_fit, "wald": run_wald,
            "simstudy": run_simstudy}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="hlode", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest")

    f = sub.add_parser("fit", help="fit a dataset")
    f.add_argument("dataset")
    f.add_argument("--config")
    f.add_argument("--algorithm", choices=sorted(FITTERS))
    f.add_argument("--max-iter", type=int)
    f.add_argument("--tau-u", type=float)
    f.add_argument("--bootstrap", type=int, default=0, metavar="S",
                   help="bootstrap replicates for bias correction (0: off)")
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True, help="report JSON; CSV tables are written alongside")
    f.add_argument("--manifest")

    w = sub.add_parser("wald", help="Wald test of a linear contrast")
    w.add_argument("report", nargs="?")
    w.add_argument("--contrast", default="beta2-beta1")
    w.add_argument("--estimate", type=float)
    w.add_argument("--variance", type=float)
    w.add_argument("--out")
    w.add_argument("--manifest")

    m = sub.add_parser("simstudy", help="Monte Carlo simulation study")
    m.add_argument("--config")
    m.add_argument("--replicates", type=int)
    m.add_argument("--tau-u", type=_floats)
    m.add_argument("--case", type=int, choices=(1, 2))
    m.add_argument("--algorithm", type=_names)
    m.add_argument("--bootstrap", type=int)
    m.add_argument("--paper-scale", action="store_true")
    m.add_argument("--seed", type=int)
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--out-dir", required=True)
    m.add_argument("--manifest")

    r = sub.add_parser("rerun", help="replay a manifest")
    r.add_argument("manifest")
    r.add_argument("--out-dir", help="write outputs here instead of the recorded paths")
    r.add_argument("--workers", type=int)
    return p


def _options(args):
    """Resolved options of a command (everything except config and manifest)."""
    d = {k: v for k, v in vars(args).items()
         if k not in ("command", "config", "manifest", "verbose")}
    for k in ("out", "out_dir"):
        if d.get(k) is not None:
            d[k] = str(d[k])
    for k in ("dataset", "report"):
        if d.get(k) is not None:
            d[k] = str(Path(d[k]).resolve())
    return d


def _resolve(command, opts, cfg):
    if command in ("fit",):
        opts["algorithm"] = opts["algorithm"] or cfg.algorithm
        opts["max_iter"] = opts["max_iter"] or cfg.max_iter
        if opts["max_iter"] < 1:
            raise ConfigError("max_iter", "must be >= 1")
    if command in ("simulate", "simstudy") or (command == "fit" and opts["bootstrap"]):
        if opts.get("seed") is None:
            opts["seed"] = _new_seed()
    if command == "fit" and opts["bootstrap"] < 0:
        raise ConfigError("bootstrap", "must be >= 0")
    if command == "fit" and opts["tau_u"] is not None and not opts["tau_u"] > 0:
        raise ConfigError("tau_u", f"must be positive, got {opts['tau_u']}")
    return opts


def _default_manifest(command, opts):
    if command == "simstudy":
        return Path(opts["out_dir"]) / "manifest.yaml"
    if command == "wald" and not opts.get("out"):
        return None
    return Path(str(opts["out"]) + ".manifest.yaml")


def execute(command, opts, cfg, manifest_path=None):
    opts = _resolve(command, dict(opts), cfg)
    t0 = time.perf_counter()
    status, outputs = COMMANDS[command](opts, cfg)
    manifest_path = manifest_path or _default_manifest(command, opts)
    if manifest_path is not None:
        write_manifest(manifest_path, command, opts, cfg, opts.get("seed"), outputs,
                       time.perf_counter() - t0)
    return status


def _relocate(command, opts, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if command == "simstudy":
        opts["out_dir"] = str(out_dir)
    elif opts.get("out"):
        opts["out"] = str(out_dir / Path(opts["out"]).name)
    return opts


def rerun(manifest, out_dir=None, workers=None):
    m = yaml.safe_load(Path(manifest).read_text())
    command = m["command"]
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown command {command!r} in manifest")
    cfg = config_from_dict(m["config"])
    opts = dict(m["options"])
    if out_dir is not None:
        opts = _relocate(command, opts, out_dir)
    if workers is not None and "workers" in opts:
        opts["workers"] = workers
    manifest_path = None
    if out_dir is not None:
        manifest_path = (Path(opts["out_dir"]) / "manifest.yaml" if command == "simstudy"
                         else Path(out_dir) / Path(manifest).name)
    return execute(command, opts, cfg, manifest_path)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            return rerun(args.manifest, args.out_dir, args.workers)
        cfg = load_config(getattr(args, "config", None))
        return execute(args.command, _options(args), cfg, args.manifest)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (HlodeError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
