"""Influence-function estimators of ``E[Y(a)]`` and the average treatment effect.

All three estimators share one estimating equation, which is affine in the
target, so the root is available in closed form:

    psi_a = P_n[ 1(A = a) / f(a | C) * (S - mu_a(C)) + mu_a(C) ]

with ``S`` the hidden outcome (oracle), the proxy ``W`` (naive) or the
weighted class average ``sum_y omega_y(O) y`` (proposed), and ``mu_a`` the
matching regression.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import EstimateResult, EstimatorKind, FullData, ObservedData
from .exceptions import EmptySampleError, EstimationError
from .nuisance import NuisanceSet, fit_nuisances, omega_matrix
from .recovery import EmConfig
from .utils import as_full, as_observed

MAX_REFOLDS = 5


def _columns(rec):
    """Wrap a single record as a one-row sample; samples pass through."""
    if hasattr(rec, "_fields"):
        cols = {k: [getattr(rec, k)] for k in rec._fields}
        return (FullData(**cols) if "y" in cols else ObservedData(**cols)), True
    return rec, False


def pseudo_outcome(data, kind, nuisance: NuisanceSet) -> np.ndarray:
    """Per-unit stand-in for ``Y`` used by estimator ``kind``."""
    kind = EstimatorKind.parse(kind)
    if kind is EstimatorKind.ORACLE:
        return as_full(data).y.astype(float)
    obs = as_observed(data)
    if kind is EstimatorKind.NAIVE:
        return obs.w
    return omega_matrix(obs, nuisance) @ np.asarray(nuisance.support, dtype=float)


def _uncentered(data, arm, kind, nuisance):
    obs = as_observed(data)
    s = pseudo_outcome(data, kind, nuisance)
    mu = nuisance.outcome(arm, obs.c)
    f = nuisance.propensity.arm(arm, obs.c)
    return (obs.a == arm) / f * (s - mu) + mu


def phi_full(rec, a, psi_a, nuisance: NuisanceSet):
    """Full-data influence function; ``rec`` is a :class:`FullRecord` or :class:`FullData`."""
    data, squeeze = _columns(rec)
    out = _uncentered(data, a, EstimatorKind.ORACLE, nuisance) - psi_a
    return float(out[0]) if squeeze else out


def phi_obs(o, a, psi_a, nuisance: NuisanceSet):
    """Observed-data influence function; ``o`` is an observed record or sample."""
    data, squeeze = _columns(o)
    out = _uncentered(data, a, EstimatorKind.PROPOSED, nuisance) - psi_a
    return float(out[0]) if squeeze else out


def influence_values(data, a, psi_a, kind, nuisance):
    return _uncentered(data, a, kind, nuisance) - psi_a


def solve_psi(data, a, kind, nuisance: NuisanceSet) -> float:
    """Root of the empirical estimating equation for arm ``a``."""
    if len(data) == 0:
        raise EmptySampleError("cannot estimate from an empty sample")
    return float(np.mean(_uncentered(data, a, kind, nuisance)))


@dataclass(frozen=True)
class CrossfitConfig:
    folds: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.folds < 1:
            raise ValueError("folds must be at least 1")


def fold_ids(n, folds, seed):
    """Seeded shuffle then round-robin assignment; fold sizes differ by at most one."""
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=np.int64)
    ids[perm] = np.arange(n) % folds
    return ids


def _take(data, idx):
    return data.take(idx)


def default_pipeline(kind, pool=True, em_config=EmConfig(), c_kind=None):
    return functools.partial(fit_nuisances, kind=kind, pool=pool, em_config=em_config,
                             c_kind=c_kind)


def _assign_folds(a, cf):
    n = len(a)
    for attempt in range(MAX_REFOLDS):
        ids = fold_ids(n, cf.folds, cf.seed + attempt)
        ok = all(len(np.unique(a[ids == k])) == 2 and len(np.unique(a[ids != k])) == 2
                 for k in range(cf.folds))
        if ok:
            return ids
    raise EstimationError(f"could not form {cf.folds} folds with both arms in every fold "
                          f"and complement after {MAX_REFOLDS} shuffles")


def estimate_ate(data, kind=EstimatorKind.PROPOSED, nuisance=None,
                 cf: CrossfitConfig = CrossfitConfig(), seed=None, return_details=False):
    """Estimate ``psi_1``, ``psi_0`` and the ATE with cross-fitting.

    ``nuisance`` is either a fitted :class:`NuisanceSet`, used as-is on the
    whole sample, or a callable mapping a training sample to one (default:
    :func:`fit_nuisances` for ``kind``). With ``cf.folds > 1`` nuisances are
    fitted on the complement of each fold and evaluated on the fold.

    ``var_hat`` is ``P_n[(phi_1 - phi_0)^2] / n`` with the estimated
    ``psi_a`` plugged into the influence functions.
    """
    kind = EstimatorKind.parse(kind)
    if len(data) == 0:
        raise EmptySampleError("cannot estimate from an empty sample")
    if kind is EstimatorKind.ORACLE:
        data = as_full(data)
    elif isinstance(data, FullData):
        data = data.observed()
    else:
        data = as_observed(data)
    n = len(data)
    vals = {1: np.empty(n), 0: np.empty(n)}
    if isinstance(nuisance, NuisanceSet) or cf.folds == 1:
        fitted = nuisance if isinstance(nuisance, NuisanceSet) else (
            nuisance or default_pipeline(kind))(data)
        ids = np.zeros(n, dtype=np.int64)
        for arm in (1, 0):
            vals[arm][:] = _uncentered(data, arm, kind, fitted)
        fits = [fitted]
        folds = 1
    else:
        pipeline = nuisance or default_pipeline(kind)
        ids = _assign_folds(data.a, cf)
        fits = []
        for k in range(cf.folds):
            test = np.flatnonzero(ids == k)
            fitted = pipeline(_take(data, np.flatnonzero(ids != k)))
            fits.append(fitted)
            for arm in (1, 0):
                vals[arm][test] = _uncentered(_take(data, test), arm, kind, fitted)
        folds = cf.folds
    psi1, psi0 = float(vals[1].mean()), float(vals[0].mean())
    contrast = (vals[1] - psi1) - (vals[0] - psi0)
    var_hat = float(np.mean(contrast**2) / n)
    result = EstimateResult(psi1, psi0, var_hat, n, kind, folds=folds, seed=seed,
                            corruption_log=tuple(fits[0].corruption_log))
    if return_details:
        return result, {"fold_ids": ids, "nuisances": fits, "influence": contrast}
    return result


class ProximalATE(BaseEstimator):
    """Average treatment effect of a binary treatment on a hidden outcome.

    Parameters
    ----------
    kind : {"proposed", "oracle", "naive"}
        ``"proposed"`` reconstructs the outcome from the three proxies;
        ``"oracle"`` needs the hidden outcome passed as ``y`` to :meth:`fit`;
        ``"naive"`` uses ``W`` in place of the outcome.
    folds : int
        Cross-fitting folds (1 fits and evaluates on the full sample).
    random_state : int
        Seed of the fold shuffle.
    pool_strata : bool
        For binary confounders, recover proxy laws once from the pooled
        sample instead of within each ``(A, C)`` cell.
    em_restarts : int
        EM restarts for continuous proxies.
    nuisance : NuisanceSet, optional
        Fixed nuisances; skips fitting and cross-fitting.

    Attributes
    ----------
    result_ : EstimateResult
    ate_, psi1_, psi0_, var_ : float
    influence_ : ndarray
        Per-unit ``phi_1 - phi_0``.

    Examples
    --------
    >>> from hiddenprox import DgpSpec, simulate
    >>> data = simulate(DgpSpec.binary(), 2000, seed=3)
    >>> est = ProximalATE(kind="proposed").fit(data.observed())
    >>> lo, hi = est.confint()
    """

    def __init__(self, kind="proposed", folds=2, random_state=0, pool_strata=True,
                 em_restarts=5, nuisance=None):
        self.kind = kind
        self.folds = folds
        self.random_state = random_state
        self.pool_strata = pool_strata
        self.em_restarts = em_restarts
        self.nuisance = nuisance

    def fit(self, X, y=None):
        kind = EstimatorKind.parse(self.kind)
        data = as_full(X, y) if kind is EstimatorKind.ORACLE else as_observed(X)
        pipeline = self.nuisance
        if pipeline is None:
            pipeline = default_pipeline(kind, self.pool_strata,
                                        EmConfig(n_restarts=self.em_restarts, seed=self.random_state))
        result, details = estimate_ate(data, kind, pipeline,
                                       CrossfitConfig(self.folds, self.random_state),
                                       seed=self.random_state, return_details=True)
        self.result_ = result
        self.ate_ = result.ate
        self.psi1_ = result.psi1
        self.psi0_ = result.psi0
        self.var_ = result.var_hat
        self.influence_ = details["influence"]
        self.fold_ids_ = details["fold_ids"]
        self.nuisances_ = details["nuisances"]
        self.n_features_in_ = 5
        return self

    def confint(self):
        """95% Wald interval ``ate +/- 1.96 * sqrt(var)``."""
        check_is_fitted(self, "result_")
        return self.result_.confint()
