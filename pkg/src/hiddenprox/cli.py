"""Command-line entry point.

::

    hiddenprox simulate   --dgp mixed --n 500 --seed 7 --out data.csv
    hiddenprox recover    --data data.csv --out laws.json
    hiddenprox estimate   --data data.csv --method proposed --out run.json
    hiddenprox study      --dgp binary --out tab1/ --jobs 4
    hiddenprox robustness --out robust/

Every command also accepts ``--config file.json``; command-line flags take
precedence over file values, and ``PROXI_SEED`` overrides the file's seed
(but not ``--seed``). Exit status is 0 on success, 2 for configuration
errors and 3 for numerical or estimation failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback

from .core import GLOBAL, EstimatorKind
from .dgp import DgpSpec, read_csv, simulate, write_csv
from .estimators import CrossfitConfig, default_pipeline, estimate_ate
from .exceptions import ConfigError, ProxiError
from .montecarlo import StudyConfig, format_table, robustness_study, run_study
from .nuisance import confounder_kind
from .recovery import (EmConfig, align_labels, build_tensor, em_fit_mixture, laws_to_json,
                       recover_stratified, spectral_recover)
from .utils import is_binary

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "PROXI_SEED"
RUN_KEYS = {"dgp", "n", "seed", "method", "folds", "data", "out", "em_restarts", "pool_strata",
            "observed"}
RUN_DEFAULTS = {"dgp": "binary", "n": 1000, "seed": 0, "method": "proposed", "folds": 2,
                "data": None, "out": None, "em_restarts": 5, "pool_strata": True,
                "observed": False}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="hiddenprox", description="Causal effects on a hidden binary "
                     "outcome measured through three proxies.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, study=False):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--dgp", choices=("binary", "mixed"))
        p.add_argument("--seed", type=int, help="data seed (base seed for studies)")
        p.add_argument("--out", help="output file or directory")
        if study:
            p.add_argument("--n", type=int, nargs="+", help="sample size(s)")
            p.add_argument("--method", nargs="+", choices=[k.value for k in EstimatorKind])
            p.add_argument("--folds", type=int)
            p.add_argument("--reps", type=int, help="replications per cell")
            p.add_argument("--jobs", type=int, help="worker processes")
        return p

    p = common(sub.add_parser("simulate", help="draw a dataset"))
    p.add_argument("--n", type=int)
    p.add_argument("--observed", action="store_true", help="drop the hidden outcome")

    p = common(sub.add_parser("recover", help="recover the latent proxy law"))
    p.add_argument("--data", help="CSV produced by simulate")
    p.add_argument("--n", type=int, help="simulate this many records when --data is absent")

    p = common(sub.add_parser("estimate", help="estimate the average treatment effect"))
    p.add_argument("--data", help="CSV produced by simulate")
    p.add_argument("--n", type=int, help="simulate this many records when --data is absent")
    p.add_argument("--method", choices=[k.value for k in EstimatorKind])
    p.add_argument("--folds", type=int)

    common(sub.add_parser("study", help="replication study by method and sample size"), True)
    common(sub.add_parser("robustness", help="bias under corrupted nuisances"), True)
    return parser


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _run_config(args):
    """Resolve file values, ``PROXI_SEED`` and flags for single-run commands."""
    doc = _load_config(args.config)
    unknown = set(doc) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = {**RUN_DEFAULTS, **doc}
    if _env_seed() is not None:
        cfg["seed"] = _env_seed()
    for key in RUN_KEYS:
        value = getattr(args, key, None)
        if value not in (None, False):
            cfg[key] = value
    if isinstance(cfg["dgp"], str) and cfg["dgp"] not in ("binary", "mixed"):
        raise ConfigError(f"unknown dgp {cfg['dgp']!r}")
    if int(cfg["n"]) < 1:
        raise ConfigError("n must be positive")
    if int(cfg["folds"]) < 1:
        raise ConfigError("folds must be at least 1")
    return cfg


def _spec(cfg):
    d = cfg["dgp"]
    return DgpSpec.named(d) if isinstance(d, str) else DgpSpec.from_dict(d)


_USED = {
    "simulate": ("dgp", "n", "seed", "observed"),
    "recover": ("dgp", "n", "seed", "data", "em_restarts", "pool_strata"),
    "estimate": ("dgp", "n", "seed", "data", "method", "folds", "em_restarts", "pool_strata"),
}


def _resolved(cfg, command):
    """The keys that determine the artifact; data files replace ``dgp``/``n``."""
    keys = [k for k in _USED[command] if not (cfg.get("data") and k in ("dgp", "n"))]
    out = {"command": command, **{k: cfg[k] for k in keys}}
    if "dgp" in out and not isinstance(out["dgp"], str):
        out["dgp"] = _spec(cfg).to_dict()
    return out


def _data(cfg):
    if cfg["data"] is None:
        return simulate(_spec(cfg), int(cfg["n"]), int(cfg["seed"]))
    if not os.path.exists(cfg["data"]):
        raise ConfigError(f"data file not found: {cfg['data']}")
    try:
        return read_csv(cfg["data"])
    except ValueError as exc:
        raise ConfigError(f"{cfg['data']}: {exc}") from None


def _write_or_print(text, path):
    if path is None:
        print(text)
        return
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def cmd_simulate(args):
    cfg = _run_config(args)
    data = simulate(_spec(cfg), int(cfg["n"]), int(cfg["seed"]))
    if cfg["observed"]:
        data = data.observed()
    header = json.dumps(_resolved(cfg, "simulate"), sort_keys=True)
    if cfg["out"] is None:
        write_csv(data, sys.stdout, comment=header)
        return
    parent = os.path.dirname(cfg["out"])
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_csv(data, cfg["out"], comment=header)
    print(f"wrote {len(data)} records to {cfg['out']}")


def cmd_recover(args):
    cfg = _run_config(args)
    data = _data(cfg)
    resolved = _resolved(cfg, "recover")
    if is_binary(data.proxies()):
        if confounder_kind(data) == "binary":
            laws = recover_stratified(data, pool=bool(cfg["pool_strata"]))
        else:
            laws = align_labels(spectral_recover(build_tensor(data), GLOBAL))
        text = laws_to_json(laws, cfg["out"], resolved)
    else:
        law = em_fit_mixture(data, EmConfig(n_restarts=int(cfg["em_restarts"]),
                                            seed=int(cfg["seed"])))
        text = laws_to_json(law, cfg["out"], resolved)
    if cfg["out"] is None:
        print(text)
    else:
        print(f"wrote latent law to {cfg['out']}")


def cmd_estimate(args):
    cfg = _run_config(args)
    data = _data(cfg)
    kind = EstimatorKind.parse(cfg["method"])
    if kind is EstimatorKind.ORACLE and not hasattr(data, "y"):
        raise ConfigError("the oracle estimator needs data with the hidden outcome column y")
    pipeline = default_pipeline(kind, bool(cfg["pool_strata"]),
                                EmConfig(n_restarts=int(cfg["em_restarts"]), seed=int(cfg["seed"])))
    res = estimate_ate(data, kind, pipeline, CrossfitConfig(int(cfg["folds"]), int(cfg["seed"])),
                       seed=int(cfg["seed"]))
    doc = res.to_dict()
    doc["config"] = _resolved(cfg, "estimate")
    _write_or_print(json.dumps(doc, indent=2), cfg["out"])
    lo, hi = res.confint()
    print(f"{kind.value}: ate={res.ate:.4f} (95% CI {lo:.4f}, {hi:.4f}), n={res.n}",
          file=sys.stdout if cfg["out"] else sys.stderr)


def _study_config(args, robustness=False):
    doc = _load_config(args.config)
    if robustness:
        doc = {"sizes": [20000], "reps": 500, "methods": ["proposed"],
               "nuisance_source": "true", **doc}
    seed = _env_seed()
    if seed is not None:
        doc["base_seed"] = seed
    overrides = {"dgp": args.dgp, "base_seed": args.seed, "sizes": args.n,
                 "methods": args.method, "folds": args.folds, "reps": args.reps,
                 "jobs": args.jobs, "out_dir": args.out}
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    try:
        return StudyConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_study(args):
    cfg = _study_config(args)
    result = run_study(cfg)
    truth = result.truth[2]
    print(f"true ate = {truth:.6f}, R = {cfg.reps}, folds = {cfg.resolved_folds}")
    print(format_table(result.rows))
    if cfg.out_dir:
        print(f"wrote raw.csv, summary.csv and manifest.json to {cfg.out_dir}")


def cmd_robustness(args):
    cfg = _study_config(args, robustness=True)
    rows, result = robustness_study(cfg)
    print(f"true ate = {result.truth[2]:.6f}, R = {cfg.reps}")
    print(format_table(rows))
    if cfg.out_dir:
        print(f"wrote robustness.csv, raw.csv, summary.csv and manifest.json to {cfg.out_dir}")


COMMANDS = {"simulate": cmd_simulate, "recover": cmd_recover, "estimate": cmd_estimate,
            "study": cmd_study, "robustness": cmd_robustness}


def _origin(exc):
    tb = exc.__traceback__
    module = None
    while tb is not None:
        module = tb.tb_frame.f_globals.get("__name__", module)
        tb = tb.tb_next
    return module or type(exc).__module__


def main(argv=None) -> int:
    """Run the command line; returns the exit status."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {type(exc).__name__} ({_origin(exc)}): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProxiError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__} ({_origin(exc)}): {exc}", file=sys.stderr)
        if os.environ.get("HIDDENPROX_DEBUG"):
            traceback.print_exc()
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
