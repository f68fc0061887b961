"""Replication engine for the simulation studies.

Every replication is a pure function of ``(config, method, n, rep)``: the
data seed is ``base_seed + rep`` and results are collected in task order,
so summaries do not depend on the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import EstimatorKind
from .dgp import BINARY, DgpSpec, simulate, true_targets
from .estimators import CrossfitConfig, default_pipeline, estimate_ate
from .exceptions import ConfigError, ProxiError, StudyError
from .nuisance import MisspecSpec, misspecify, true_nuisances
from .recovery import EmConfig

RAW_HEADER = ("method", "n", "rep", "seed", "psi1", "psi0", "ate", "varHat",
              "ciLow", "ciHigh", "error_flag")
SUMMARY_HEADER = ("method", "n", "mean", "bias", "n_var", "coverage")
ROBUSTNESS_HEADER = ("case", "corrupted", "n", "bias", "n_var")
MAX_FAILURE_FRACTION = 0.01
DEFAULT_BASE_SEED = 20240

# Each case lists the nuisances left at their true values; everything else
# in (propensity, outcomeMean) and the third moment set gets corrupted.
ROBUSTNESS_CASES = (
    ("i", ("propensity", "momentsW", "momentsZ")),
    ("ii", ("propensity", "momentsW", "momentsV")),
    ("iii", ("propensity", "momentsZ", "momentsV")),
    ("iv", ("outcomeMean", "momentsW", "momentsZ")),
    ("v", ("outcomeMean", "momentsW", "momentsV")),
    ("vi", ("outcomeMean", "momentsZ", "momentsV")),
)
_FUNCTIONS = ("propensity", "outcomeMean")
_MOMENTS = ("momentsW", "momentsZ", "momentsV")


def robustness_patterns():
    """``[(case, corrupted targets)]``: the six cases, then both controls."""
    rows = []
    for case, correct in ROBUSTNESS_CASES:
        fn = [t for t in _FUNCTIONS if t not in correct]
        mom = [t for t in _MOMENTS if t not in correct]
        rows.append((case, tuple(fn + mom)))
    rows.append(("all-correct", ()))
    rows.append(("doubly-violated", ("propensity", "outcomeMean", "momentsV")))
    return rows


@dataclass(frozen=True)
class StudyConfig:
    """Configuration of a replication study.

    Parameters
    ----------
    dgp : str or DgpSpec
        ``"binary"``, ``"mixed"`` or an explicit design.
    sizes : tuple of int
        Sample sizes; one summary row per (method, size).
    reps : int
        Replications ``R`` per cell.
    base_seed : int
        Replication ``r`` simulates with seed ``base_seed + r``.
    methods : tuple of str
        Estimator kinds.
    folds : int, optional
        Cross-fitting folds. Defaults to 2 for the binary design and 1 for
        the mixed one, where EM on half of a few hundred records is unstable.
    misspec : tuple
        Corruption patterns for :func:`robustness_study`, each a tuple of
        :class:`MisspecSpec` or target names.
    nuisance_source : {"fitted", "true"}
        ``"true"`` evaluates every replication at the true nuisances
        (corrupted by the pattern, if any) instead of fitting them.
    out_dir : str, optional
        Where to write the raw CSV, the summary CSV and the manifest.
    jobs : int
        Worker processes; results do not depend on it.
    em_restarts : int
        EM restarts for the mixed design.
    """

    dgp: object = BINARY
    sizes: tuple = (200, 500, 1000)
    reps: int = 1000
    base_seed: int = DEFAULT_BASE_SEED
    methods: tuple = ("proposed", "naive", "oracle")
    folds: int | None = None
    misspec: tuple = ()
    nuisance_source: str = "fitted"
    out_dir: str | None = None
    jobs: int = 1
    em_restarts: int = 5

    def __post_init__(self):
        if isinstance(self.dgp, str):
            try:
                object.__setattr__(self, "dgp", DgpSpec.named(self.dgp))
            except (ValueError, ProxiError) as exc:
                raise ConfigError(str(exc)) from exc
        elif isinstance(self.dgp, dict):
            object.__setattr__(self, "dgp", DgpSpec.from_dict(self.dgp))
        if int(self.reps) < 1:
            raise ConfigError("reps must be at least 1")
        sizes = tuple(int(s) for s in np.atleast_1d(self.sizes))
        if not sizes or min(sizes) < 1:
            raise ConfigError("sizes must be a non-empty list of positive integers")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "reps", int(self.reps))
        try:
            methods = tuple(EstimatorKind.parse(m).value for m in
                            ([self.methods] if isinstance(self.methods, str) else self.methods))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not methods:
            raise ConfigError("methods must not be empty")
        object.__setattr__(self, "methods", methods)
        if self.folds is not None and int(self.folds) < 1:
            raise ConfigError("folds must be at least 1")
        if self.nuisance_source not in ("fitted", "true"):
            raise ConfigError("nuisance_source must be 'fitted' or 'true'")
        if int(self.jobs) < 1:
            raise ConfigError("jobs must be at least 1")
        try:
            patterns = tuple(tuple(m if isinstance(m, MisspecSpec) else _parse_misspec(m)
                                   for m in pattern) for pattern in self.misspec)
        except ProxiError as exc:
            raise ConfigError(str(exc)) from exc
        object.__setattr__(self, "misspec", patterns)

    @property
    def resolved_folds(self):
        if self.folds is not None:
            return int(self.folds)
        return 2 if self.dgp.kind == BINARY else 1

    def to_dict(self):
        return {
            "dgp": self.dgp.to_dict(),
            "sizes": list(self.sizes),
            "reps": self.reps,
            "base_seed": self.base_seed,
            "methods": list(self.methods),
            "folds": self.resolved_folds,
            "misspec": [[{"target": m.target, "amount": m.value} for m in p] for p in self.misspec],
            "nuisance_source": self.nuisance_source,
            "out_dir": self.out_dir,
            "jobs": self.jobs,
            "em_restarts": self.em_restarts,
        }

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown study config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("sizes", "methods"):
            if key in d and not isinstance(d[key], str):
                d[key] = tuple(d[key])
        if "misspec" in d:
            d["misspec"] = tuple(tuple(p) for p in d["misspec"])
        return cls(**d)


def _parse_misspec(m):
    if isinstance(m, str):
        target, _, amount = m.partition(":")
        if amount:
            amount = amount.split("=")[-1]
        return MisspecSpec(target, float(amount) if amount else None)
    if isinstance(m, dict):
        return MisspecSpec(m["target"], m.get("amount"))
    raise ConfigError(f"cannot read corruption {m!r}")


@dataclass
class SummaryRow:
    """Aggregate of one (method, n) cell.

    ``variance_defined`` is False when fewer than two replications
    succeeded; ``n_var`` is then reported as 0.
    """

    method: str
    n: int
    mean: float
    bias: float
    n_var: float
    coverage: float
    n_ok: int = 0
    n_failed: int = 0
    variance_defined: bool = True


@dataclass
class StudyResult:
    config: StudyConfig
    truth: tuple
    rows: list
    records: list = field(repr=False)

    def row(self, method, n):
        for r in self.rows:
            if r.method == method and r.n == n:
                return r
        raise KeyError((method, n))

    def failures(self):
        return [r for r in self.records if r["error_flag"]]


# one replication

def _replicate(task):
    """Run one replication; errors are captured in ``error_flag``."""
    spec_dict, method, n, rep, seed, folds, source, pattern, em_restarts = task
    spec = DgpSpec.from_dict(spec_dict)
    row = {"method": method, "n": n, "rep": rep, "seed": seed}
    try:
        data = simulate(spec, n, seed)
        kind = EstimatorKind.parse(method)
        if source == "true":
            nuis = true_nuisances(spec)
            for m in pattern:
                nuis = misspecify(nuis, MisspecSpec(*m))
            res = estimate_ate(data, kind, nuis, seed=seed)
        else:
            pipeline = default_pipeline(kind, em_config=EmConfig(n_restarts=em_restarts, seed=seed))
            res = estimate_ate(data, kind, pipeline, CrossfitConfig(folds, seed), seed=seed)
        lo, hi = res.confint()
        row.update(psi1=res.psi1, psi0=res.psi0, ate=res.ate, varHat=res.var_hat,
                   ciLow=lo, ciHigh=hi, error_flag="")
    except (ProxiError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        row.update(psi1=math.nan, psi0=math.nan, ate=math.nan, varHat=math.nan,
                   ciLow=math.nan, ciHigh=math.nan, error_flag=type(exc).__name__)
    return row


def _run_tasks(tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [_replicate(t) for t in tasks]
    chunk = max(1, len(tasks) // (8 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_replicate, tasks, chunksize=chunk))


def _summarize(method, n, rows, truth, reps):
    ok = [r for r in rows if not r["error_flag"]]
    failed = len(rows) - len(ok)
    if failed and failed >= MAX_FAILURE_FRACTION * reps:
        flags = sorted({r["error_flag"] for r in rows if r["error_flag"]})
        seeds = [r["seed"] for r in rows if r["error_flag"]][:10]
        raise StudyError(f"{method} at n={n}: {failed} of {reps} replications failed "
                         f"({', '.join(flags)}; first seeds {seeds}); at most "
                         f"{MAX_FAILURE_FRACTION:.0%} may fail")
    ate = np.array([r["ate"] for r in ok])
    covered = np.array([r["ciLow"] <= truth <= r["ciHigh"] for r in ok])
    mean = float(ate.mean())
    defined = len(ok) > 1
    n_var = float(n * ate.var(ddof=1)) if defined else 0.0
    return SummaryRow(method, n, mean, mean - truth, n_var, float(covered.mean()),
                      n_ok=len(ok), n_failed=failed, variance_defined=defined)


def _tasks(cfg, method, n, pattern=(), source=None):
    spec = cfg.dgp.to_dict()
    pattern = tuple((m.target, m.value) for m in pattern)
    return [(spec, method, n, r, cfg.base_seed + r, cfg.resolved_folds,
             source or cfg.nuisance_source, pattern, cfg.em_restarts) for r in range(cfg.reps)]


def run_study(cfg: StudyConfig) -> StudyResult:
    """Run every (method, n) cell of ``cfg`` and aggregate.

    Writes ``raw.csv``, ``summary.csv`` and ``manifest.json`` when
    ``cfg.out_dir`` is set.
    """
    truth = true_targets(cfg.dgp)
    cells = [(m, n) for m in cfg.methods for n in cfg.sizes]
    tasks = [t for m, n in cells for t in _tasks(cfg, m, n)]
    records = _run_tasks(tasks, int(cfg.jobs))
    rows = []
    for k, (m, n) in enumerate(cells):
        chunk = records[k * cfg.reps:(k + 1) * cfg.reps]
        rows.append(_summarize(m, n, chunk, truth[2], cfg.reps))
    result = StudyResult(cfg, truth, rows, records)
    if cfg.out_dir is not None:
        write_study(result, cfg.out_dir)
    return result


# robustness

@dataclass
class RobustnessRow:
    case: str
    corrupted: tuple
    n: int
    bias: float
    n_var: float
    mean: float = math.nan
    coverage: float = math.nan


def robustness_config(**overrides):
    """Defaults for the robustness suite: ``n = 20000``, ``R = 500``, true
    nuisances as the base."""
    base = dict(sizes=(20000,), reps=500, methods=("proposed",), nuisance_source="true")
    base.update(overrides)
    return StudyConfig(**base)


def robustness_study(cfg: StudyConfig | None = None):
    """Bias of the proposed estimator under each corruption pattern.

    With ``cfg.misspec`` empty the patterns are the six single-robustness
    cases followed by the all-correct and doubly-violated controls; a
    custom list of patterns is labelled ``p1, p2, ...``. Returns
    ``(rows, StudyResult)``; the study's summary rows are keyed by case.
    """
    cfg = cfg or robustness_config()
    if cfg.misspec:
        patterns = [(f"p{i + 1}", p) for i, p in enumerate(cfg.misspec)]
    else:
        patterns = [(case, tuple(MisspecSpec(t) for t in targets))
                    for case, targets in robustness_patterns()]
    truth = true_targets(cfg.dgp)
    cells = [(case, pattern, n) for case, pattern in patterns for n in cfg.sizes]
    tasks = [t for case, pattern, n in cells
             for t in _tasks(cfg, EstimatorKind.PROPOSED.value, n, pattern)]
    records = _run_tasks(tasks, int(cfg.jobs))
    rows, summary = [], []
    for k, (case, pattern, n) in enumerate(cells):
        chunk = records[k * cfg.reps:(k + 1) * cfg.reps]
        for r in chunk:
            r["method"] = f"proposed[{case}]"
        s = _summarize(f"proposed[{case}]", n, chunk, truth[2], cfg.reps)
        summary.append(s)
        rows.append(RobustnessRow(case, tuple(m.describe() for m in pattern), n, s.bias,
                                  s.n_var, s.mean, s.coverage))
    result = StudyResult(cfg, truth, summary, records)
    if cfg.out_dir is not None:
        write_study(result, cfg.out_dir)
        _write_text(os.path.join(cfg.out_dir, "robustness.csv"), robustness_csv(rows))
    return rows, result


# output

def _num(x):
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def raw_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_HEADER)
    for r in records:
        w.writerow([r["method"], r["n"], r["rep"], r["seed"]]
                   + [_num(r[k]) for k in RAW_HEADER[4:10]] + [r["error_flag"]])
    return buf.getvalue()


def summary_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in rows:
        w.writerow([r.method, r.n, _num(r.mean), _num(r.bias), _num(r.n_var), _num(r.coverage)])
    return buf.getvalue()


def robustness_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROBUSTNESS_HEADER)
    for r in rows:
        w.writerow([r.case, "+".join(r.corrupted) or "none", r.n, _num(r.bias), _num(r.n_var)])
    return buf.getvalue()


def manifest(result: StudyResult):
    return {
        "config": result.config.to_dict(),
        "truth": {"psi1": result.truth[0], "psi0": result.truth[1], "ate": result.truth[2]},
        "cells": [asdict(r) for r in result.rows],
        "failures": [{k: r[k] for k in ("method", "n", "rep", "seed", "error_flag")}
                     for r in result.failures()],
    }


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def write_study(result: StudyResult, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    _write_text(os.path.join(out_dir, "raw.csv"), raw_csv(result.records))
    _write_text(os.path.join(out_dir, "summary.csv"), summary_csv(result.rows))
    _write_text(os.path.join(out_dir, "manifest.json"),
                json.dumps(manifest(result), indent=2, sort_keys=True) + "\n")


def _label(r):
    if isinstance(r, RobustnessRow):
        return f"{r.case} ({'+'.join(r.corrupted) or 'none'})"
    return r.method


def format_table(rows):
    """Fixed-width text table of summary or robustness rows for terminals."""
    width = max([len("method")] + [len(_label(r)) for r in rows]) + 2
    lines = [f"{'method':<{width}}{'n':>7}{'mean':>10}{'bias':>10}{'n*var':>10}{'cover':>8}"]
    for r in rows:
        defined = getattr(r, "variance_defined", True)
        nv = f"{r.n_var:>10.3f}" if defined else f"{'undef':>10}"
        lines.append(f"{_label(r):<{width}}{r.n:>7}{r.mean:>10.4f}{r.bias:>10.4f}{nv}"
                     f"{r.coverage:>8.3f}")
    return "\n".join(lines)
