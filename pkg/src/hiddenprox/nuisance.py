"""Nuisance functions of the proximal estimator and the outcome weights.

A :class:`NuisanceSet` bundles the propensity score, the latent-outcome
regression, the class-conditional proxy moments and the weight basis. All of
it is immutable; :func:`misspecify` returns corrupted copies for robustness
experiments.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
import scipy.linalg

from .core import (FIT_TOL, GLOBAL, PROXIES, DiscreteProxyLaw, EstimatorKind, FullData,
                   GaussianProxyLaw, LatentLaw, ObservedData, ObservedRecord, Stratum)
from .dgp import BINARY, DgpSpec
from .exceptions import (BasisConstructionError, MisspecificationError, NonDegeneracyError,
                         PositivityError, WeightDegeneracyError)
from .recovery import (EmConfig, StratifiedRecovery, em_fit_mixture, fit_outcome_given_mixture,
                       recover_stratified)
from .utils import as_full, as_observed, expit, is_binary, logit

EPS_POSITIVITY = 1e-6
GAP_TOL = FIT_TOL
LAPLACE = 0.5
DEFAULT_OFFSET = 0.75
DEFAULT_SHRINK = 0.5


def fit_logistic(design, target, tol=1e-10, max_iter=100):
    """Logistic regression by Newton-Raphson; returns the coefficient vector."""
    beta = np.zeros(design.shape[1])
    for _ in range(max_iter):
        p = expit(design @ beta)
        grad = design.T @ (target - p)
        if np.abs(grad).max() < tol:
            return beta
        H = design.T @ ((p * (1 - p))[:, None] * design)
        beta = beta + np.linalg.solve(H, grad)
    raise PositivityError("logistic fit did not converge (quasi-separation?)")


# propensity score

@dataclass(frozen=True)
class Propensity:
    """``p(A = 1 | C)``; ``table`` maps a binary ``c`` to a probability,
    ``coef`` holds logistic coefficients on ``(1, c)``. ``offset`` shifts the
    logit and is only set by :func:`misspecify`."""

    table: tuple | None = None
    coef: tuple | None = None
    offset: float = 0.0

    def __call__(self, c):
        c = np.asarray(c, dtype=float)
        if self.table is not None:
            eta = np.where(c == 1, logit(self.table[1]), logit(self.table[0]))
        else:
            eta = self.coef[0] + self.coef[1] * c
        return expit(eta + self.offset)

    def arm(self, a, c):
        """``f(A = a | C = c)`` with positivity enforced."""
        p1 = self(c)
        p = p1 if a == 1 else 1 - p1
        p = np.asarray(p)
        if ((p <= EPS_POSITIVITY) | (p >= 1 - EPS_POSITIVITY)).any():
            raise PositivityError(f"propensity for arm {a} leaves ({EPS_POSITIVITY}, 1 - {EPS_POSITIVITY})")
        return p

    def to_dict(self):
        return {"table": None if self.table is None else list(self.table),
                "coef": None if self.coef is None else list(self.coef), "offset": self.offset}

    @classmethod
    def from_dict(cls, d):
        return cls(table=None if d["table"] is None else tuple(d["table"]),
                   coef=None if d["coef"] is None else tuple(d["coef"]), offset=d["offset"])


def fit_propensity(records, c_kind="binary") -> Propensity:
    """Stratified frequencies with add-0.5 smoothing for binary ``C``;
    logistic MLE on ``(1, C)`` otherwise."""
    data = as_observed(records)
    if len(np.unique(data.a)) < 2:
        raise PositivityError("both treatment arms must be present to fit the propensity")
    if c_kind == "binary":
        table = []
        for c in (0, 1):
            m = data.c == c
            table.append((data.a[m].sum() + LAPLACE) / (m.sum() + 2 * LAPLACE))
        return Propensity(table=tuple(float(p) for p in table))
    design = np.column_stack([np.ones(len(data)), data.c])
    return Propensity(coef=tuple(float(b) for b in fit_logistic(design, data.a.astype(float))))


# outcome regression

@dataclass(frozen=True)
class OutcomeMean:
    """``E[Y | A = a, C = c]``.

    Exactly one representation is set: ``table`` (mapping ``(a, c)`` to a
    mean, binary ``C``), ``logistic`` coefficients ``(b0, bA, bC)`` or
    ``linear`` coefficients. ``scale`` is the largest outcome value, so the
    logit offset used for corruption acts on ``mean / scale``.
    """

    table: Mapping | None = None
    logistic: tuple | None = None
    linear: tuple | None = None
    scale: float = 1.0
    offset: float = 0.0

    def _raw(self, a, c):
        a = np.asarray(a, dtype=float)
        c = np.asarray(c, dtype=float)
        if self.table is not None:
            out = np.zeros(np.broadcast(a, c).shape)
            a_b, c_b = np.broadcast_arrays(a, c)
            for (ta, tc), val in self.table.items():
                out = np.where((a_b == ta) & (c_b == tc), val, out)
            return out
        if self.logistic is not None:
            b0, ba, bc = self.logistic
            return self.scale * expit(b0 + ba * a + bc * c)
        b0, ba, bc = self.linear
        return b0 + ba * a + bc * c

    def __call__(self, a, c):
        out = self._raw(a, c)
        if self.offset == 0.0:
            return out
        if self.linear is not None:
            return out + self.offset
        frac = np.clip(out / self.scale, 1e-12, 1 - 1e-12)
        return self.scale * expit(logit(frac) + self.offset)

    def to_dict(self):
        table = None if self.table is None else [
            {"a": a, "c": c, "mean": m} for (a, c), m in self.table.items()]
        return {"table": table, "logistic": self.logistic and list(self.logistic),
                "linear": self.linear and list(self.linear), "scale": self.scale,
                "offset": self.offset}

    @classmethod
    def from_dict(cls, d):
        table = None if d["table"] is None else {
            (int(r["a"]), int(r["c"])): float(r["mean"]) for r in d["table"]}
        return cls(table=table, logistic=d["logistic"] and tuple(d["logistic"]),
                   linear=d["linear"] and tuple(d["linear"]), scale=d["scale"], offset=d["offset"])


def outcome_mean_from_law(source, support=None) -> OutcomeMean:
    """Outcome regression implied by a recovered law.

    ``source`` is a :class:`StratifiedRecovery`, a mapping from strata to
    :class:`LatentLaw` (``E[Y|a,c] = sum_y y p(y|a,c)``), a mapping from
    ``(a, c)`` to ``p(Y = 1 | a, c)``, or logistic coefficients
    ``(b0, bA, bC)``.
    """
    if isinstance(source, StratifiedRecovery):
        source = source.laws
    if isinstance(source, (tuple, list, np.ndarray)):
        return OutcomeMean(logistic=tuple(float(b) for b in source))
    table, scale = {}, 1.0
    for key, val in source.items():
        s = Stratum.parse(key)
        if isinstance(val, LatentLaw):
            sup = val.support if support is None else np.asarray(support, dtype=float)
            table[(s.a, s.c)] = float(sup @ val.class_probs)
            scale = max(scale, float(sup.max()))
        else:
            table[(s.a, s.c)] = float(val)
    return OutcomeMean(table=table, scale=scale)


def _fit_stratified_mean(data, target):
    table = {}
    for a in (0, 1):
        for c in (0, 1):
            m = (data.a == a) & (data.c == c)
            table[(a, c)] = float((target[m].sum() + LAPLACE) / (m.sum() + 2 * LAPLACE))
    return table


# weight basis

@dataclass(frozen=True)
class BasisFunction:
    """Scalar function of one proxy: a value table over a finite support, or
    a polynomial (coefficients in increasing degree)."""

    support: tuple | None = None
    values: tuple | None = None
    poly: tuple | None = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.poly is not None:
            return np.polynomial.polynomial.polyval(x, self.poly)
        support = np.asarray(self.support)
        idx = np.searchsorted(support, x)
        idx = np.clip(idx, 0, len(support) - 1)
        if not (support[idx] == x).all():
            raise ValueError("proxy value outside the basis support")
        return np.asarray(self.values)[idx]

    def is_identity(self):
        if self.poly is not None:
            return tuple(self.poly) == (0.0, 1.0)
        return tuple(self.values) == tuple(self.support)

    def to_dict(self):
        return {"support": self.support and list(self.support),
                "values": self.values and list(self.values), "poly": self.poly and list(self.poly)}

    @classmethod
    def from_dict(cls, d):
        return cls(*(d[k] and tuple(d[k]) for k in ("support", "values", "poly")))


IDENTITY = BasisFunction(poly=(0.0, 1.0))


@dataclass(frozen=True)
class WeightBasis:
    """For each proxy, the ``K - 1`` functions entering the weights."""

    functions: Mapping[str, tuple]

    @property
    def size(self):
        return len(self.functions["w"])

    def evaluate(self, proxy, x):
        """``(n, K - 1)`` matrix of basis values."""
        return np.column_stack([f(x) for f in self.functions[proxy]])

    def to_dict(self):
        return {k.upper(): [f.to_dict() for f in fs] for k, fs in self.functions.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({k.lower(): tuple(BasisFunction.from_dict(f) for f in fs) for k, fs in d.items()})


def identity_basis(law: LatentLaw | None = None):
    funcs = {}
    for k in PROXIES:
        p = None if law is None else law.proxies[k]
        if isinstance(p, DiscreteProxyLaw):
            sup = tuple(float(x) for x in p.support)
            funcs[k] = (BasisFunction(support=sup, values=sup),)
        else:
            funcs[k] = (IDENTITY,)
    return WeightBasis(funcs)


def _class_moment(law_x, values):
    return np.asarray(values, dtype=float) @ law_x.table


def _check_gaps(means, what):
    for i, j in itertools.combinations(range(len(means)), 2):
        if abs(means[i] - means[j]) <= GAP_TOL:
            raise NonDegeneracyError(
                f"{what}: classes {i} and {j} share the moment {means[i]:.6g}")


def _next_basis_element(P, previous):
    """Values of a new function on a finite support whose products with
    every product of ``previous`` functions factorise in expectation under
    every class. ``P[x, y] = p(x | y)``."""
    s, K = P.shape
    rows = []
    for r in range(1, len(previous) + 1):
        for subset in itertools.combinations(previous, r):
            g = np.prod(np.column_stack(subset), axis=1)
            for y in range(K):
                rows.append(P[:, y] * (g - g @ P[:, y]))
    C = np.array(rows)
    ones = np.ones(s) / np.sqrt(s)
    N = scipy.linalg.null_space(C, rcond=1e-10)
    N = N - np.outer(ones, ones @ N)
    U, sv, _ = np.linalg.svd(N, full_matrices=False)
    N = U[:, sv > 1e-8]
    if N.shape[1] == 0:
        raise BasisConstructionError(
            f"no non-constant function solves the {len(rows)} moment equations on a "
            f"support of size {s}")
    means = P.T @ N
    means = means - means.mean(axis=0)
    _, _, Vt = np.linalg.svd(means, full_matrices=False)
    b = N @ Vt[0]
    b = b / np.abs(b).max()
    resid = np.abs(C @ b).max()
    if resid > 1e-6:
        raise BasisConstructionError(f"moment equations violated (residual {resid:.3g})")
    return b


def build_weight_basis(law: LatentLaw, K: int | None = None) -> WeightBasis:
    """Weight basis for ``K`` latent classes.

    For two classes every proxy uses the identity. For more classes (finite
    proxy supports only) the first function is the identity and each further
    function is chosen in the null space of the zero-covariance moment
    equations against all products of earlier functions, so that under
    every class the expectation of any product of basis functions factorises.
    """
    K = law.n_classes if K is None else K
    if K != law.n_classes:
        raise ValueError(f"law has {law.n_classes} classes, not {K}")
    for k in PROXIES:
        _check_gaps(law.proxies[k].mean(), f"proxy {k.upper()} identity moment")
    if K == 2:
        return identity_basis(law)
    funcs = {}
    for k in PROXIES:
        p = law.proxies[k]
        if not isinstance(p, DiscreteProxyLaw):
            raise BasisConstructionError("bases for more than two classes need finite proxy supports")
        sup = np.asarray(p.support, dtype=float)
        vals = [sup]
        for t in range(1, K - 1):
            b = _next_basis_element(p.table, vals)
            _check_gaps(_class_moment(p, b), f"proxy {k.upper()} basis element {t + 1}")
            vals.append(b)
        funcs[k] = tuple(BasisFunction(support=tuple(sup), values=tuple(float(x) for x in v))
                         for v in vals)
    return WeightBasis(funcs)


def basis_moments(law: LatentLaw, basis: WeightBasis):
    """``(3, K - 1, K)`` array of ``E[b_t(X) | Y = y]``."""
    out = []
    for k in PROXIES:
        p = law.proxies[k]
        rows = []
        for f in basis.functions[k]:
            if isinstance(p, GaussianProxyLaw):
                if not f.is_identity():
                    raise ValueError("gaussian laws support only the identity basis")
                rows.append(p.mean())
            else:
                rows.append(_class_moment(p, f(p.support)))
        out.append(rows)
    return np.asarray(out, dtype=float)


# the bundle

@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Everything the influence functions need besides the data.

    ``moments`` maps a :class:`Stratum` (or ``GLOBAL``) to the
    ``(3, K - 1, K)`` array from :func:`basis_moments`; it is ``None`` for
    the oracle and naive bundles.
    """

    propensity: Propensity
    outcome: OutcomeMean
    moments: Mapping | None = None
    basis: WeightBasis | None = None
    support: tuple = (0.0, 1.0)
    corruption_log: tuple = ()
    laws: Mapping | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.moments is not None:
            moments = {}
            for s, m in self.moments.items():
                m = np.array(m, dtype=float)
                m.setflags(write=False)
                for xi, k in enumerate(PROXIES):
                    for t in range(m.shape[1]):
                        _check_gaps(m[xi, t], f"stratum {Stratum.parse(s).label()}, proxy "
                                    f"{k.upper()}, basis element {t + 1}")
                moments[Stratum.parse(s) if not isinstance(s, Stratum) else s] = m
            object.__setattr__(self, "moments", moments)
        if self.table_propensity_values() is not None:
            vals = np.asarray(self.table_propensity_values())
            if ((vals <= EPS_POSITIVITY) | (vals >= 1 - EPS_POSITIVITY)).any():
                raise PositivityError("propensity table leaves the positivity band")

    def table_propensity_values(self):
        if self.propensity.table is None:
            return None
        return self.propensity(np.array([0.0, 1.0]))

    @property
    def n_classes(self):
        return len(self.support)

    def moments_for(self, a, c):
        """Per-unit moment arrays ``(n, 3, K - 1, K)``."""
        a = np.atleast_1d(np.asarray(a))
        c = np.atleast_1d(np.asarray(c, dtype=float))
        if GLOBAL in self.moments:
            return np.broadcast_to(self.moments[GLOBAL], (len(a),) + self.moments[GLOBAL].shape)
        out = np.empty((len(a),) + next(iter(self.moments.values())).shape)
        filled = np.zeros(len(a), dtype=bool)
        for s, m in self.moments.items():
            mask = (a == s.a) & (c == s.c)
            out[mask] = m
            filled |= mask
        if not filled.all():
            raise WeightDegeneracyError("no proxy moments for some (a, c) cells")
        return out

    def to_dict(self):
        return {
            "propensity": self.propensity.to_dict(),
            "outcome": self.outcome.to_dict(),
            "moments": None if self.moments is None else [
                {"stratum": s.to_json(), "values": m.tolist()} for s, m in self.moments.items()],
            "basis": None if self.basis is None else self.basis.to_dict(),
            "support": list(self.support),
            "corruptionLog": list(self.corruption_log),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            propensity=Propensity.from_dict(d["propensity"]),
            outcome=OutcomeMean.from_dict(d["outcome"]),
            moments=None if d["moments"] is None else {
                Stratum.parse(r["stratum"]): np.asarray(r["values"]) for r in d["moments"]},
            basis=None if d["basis"] is None else WeightBasis.from_dict(d["basis"]),
            support=tuple(d["support"]),
            corruption_log=tuple(d["corruptionLog"]),
        )

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def nuisance_from_laws(laws, propensity: Propensity, outcome: OutcomeMean | None = None,
                       basis: WeightBasis | None = None) -> NuisanceSet:
    """Assemble a proposed-estimator bundle from recovered laws.

    ``laws`` is a single (global) :class:`LatentLaw`, a mapping from strata
    to laws, or a :class:`StratifiedRecovery`; the outcome regression
    defaults to the one implied by stratified laws.
    """
    if isinstance(laws, StratifiedRecovery):
        laws = laws.laws
    if isinstance(laws, LatentLaw):
        laws = {laws.stratum: laws}
    first = next(iter(laws.values()))
    basis = build_weight_basis(first) if basis is None else basis
    moments = {s: basis_moments(law, basis) for s, law in laws.items()}
    if outcome is None:
        outcome = outcome_mean_from_law(laws)
    return NuisanceSet(propensity, outcome, moments, basis,
                       tuple(float(y) for y in first.support), laws=laws)


def true_nuisances(spec: DgpSpec) -> NuisanceSet:
    """The bundle at the true parameters of a simulation design."""
    if spec.kind == BINARY:
        prop = Propensity(table=tuple(float(p) for p in spec.p_a_given_c))
        outcome = OutcomeMean(table={(a, c): float(spec.outcome_prob(a, c))
                                     for a in (0, 1) for c in (0, 1)})
    else:
        prop = Propensity(coef=tuple(spec.propensity_coef))
        outcome = OutcomeMean(logistic=tuple(spec.outcome_coef))
    law = spec.proxy_law([0.5, 0.5])
    return nuisance_from_laws(law, prop, outcome)


def omega_matrix(data, nuisance: NuisanceSet) -> np.ndarray:
    """Weights ``omega_y(O)`` for every unit, shape ``(n, K)``.

    For class ``i`` let ``j_1 < ... < j_{K-1}`` be the other classes and
    ``F_X = prod_t (b_t(X) - m_X[t, j_t]) / (m_X[t, i] - m_X[t, j_t])``;
    then ``omega_i = F_W F_Z + F_Z F_V + F_W F_V - 2 F_W F_Z F_V``.
    """
    data = as_observed(data)
    M = nuisance.moments_for(data.a, data.c)
    K = M.shape[-1]
    vals = {k: nuisance.basis.evaluate(k, getattr(data, k)) for k in PROXIES}
    out = np.empty((len(data), K))
    for i in range(K):
        others = [j for j in range(K) if j != i]
        F = {}
        for xi, k in enumerate(PROXIES):
            prod = np.ones(len(data))
            for t, j in enumerate(others):
                denom = M[:, xi, t, i] - M[:, xi, t, j]
                if (np.abs(denom) <= GAP_TOL).any():
                    raise WeightDegeneracyError(
                        f"proxy {k.upper()}: moment gap between classes {i} and {j} is below {GAP_TOL}")
                prod = prod * (vals[k][:, t] - M[:, xi, t, j]) / denom
            F[k] = prod
        out[:, i] = (F["w"] * F["z"] + F["z"] * F["v"] + F["w"] * F["v"]
                     - 2.0 * F["w"] * F["z"] * F["v"])
    return out


def omega(o, nuisance: NuisanceSet, stratum: Stratum | None = None) -> np.ndarray:
    """Weight vector over the latent classes for one observed record.

    ``stratum`` overrides the cell used to look up the proxy moments (by
    default the record's own ``(a, c)``).
    """
    if not isinstance(o, ObservedRecord):
        o = ObservedRecord(*(getattr(o, k) for k in ("a", "c", "w", "z", "v")))
    a, c = o.a, o.c
    if stratum is not None and not stratum.is_global:
        a, c = stratum.a, stratum.c
    row = ObservedData(a=[a], c=[c], w=[o.w], z=[o.z], v=[o.v])
    return omega_matrix(row, nuisance)[0]


# corruption

TARGETS = ("propensity", "outcomeMean", "momentsW", "momentsZ", "momentsV")


@dataclass(frozen=True)
class MisspecSpec:
    """One deliberate corruption: a logit offset for ``propensity`` and
    ``outcomeMean``, a shrink of the class-wise moments toward their class
    average for ``momentsW``/``momentsZ``/``momentsV``."""

    target: str
    amount: float | None = None

    def __post_init__(self):
        if self.target not in TARGETS:
            raise MisspecificationError(f"unknown corruption target {self.target!r}; "
                                        f"expected one of {TARGETS}")

    @property
    def value(self):
        if self.amount is not None:
            return float(self.amount)
        return DEFAULT_SHRINK if self.target.startswith("moments") else DEFAULT_OFFSET

    def describe(self):
        mode = "shrink" if self.target.startswith("moments") else "offset"
        return f"{self.target}:{mode}={self.value:g}"


def misspecify(nuisance: NuisanceSet, spec: MisspecSpec) -> NuisanceSet:
    """Return a copy of ``nuisance`` with one component corrupted."""
    log = nuisance.corruption_log + (spec.describe(),)
    try:
        if spec.target == "propensity":
            prop = replace(nuisance.propensity, offset=nuisance.propensity.offset + spec.value)
            return replace(nuisance, propensity=prop, corruption_log=log)
        if spec.target == "outcomeMean":
            out = replace(nuisance.outcome, offset=nuisance.outcome.offset + spec.value)
            return replace(nuisance, outcome=out, corruption_log=log)
        if nuisance.moments is None:
            raise MisspecificationError("this bundle has no proxy moments to corrupt")
        xi = PROXIES.index(spec.target[-1].lower())
        gamma = spec.value
        moments = {}
        for s, m in nuisance.moments.items():
            m = m.copy()
            centre = m[xi].mean(axis=-1, keepdims=True)
            m[xi] = centre + (1.0 - gamma) * (m[xi] - centre)
            moments[s] = m
        return replace(nuisance, moments=moments, corruption_log=log)
    except (NonDegeneracyError, PositivityError) as exc:
        raise MisspecificationError(f"rejected corruption {spec.describe()}: {exc}") from exc


# fitting pipelines

def confounder_kind(data) -> str:
    return "binary" if is_binary(as_observed(data).c) else "continuous"


def fit_nuisances(data, kind=EstimatorKind.PROPOSED, c_kind=None, pool=True,
                  em_config: EmConfig = EmConfig()) -> NuisanceSet:
    """Fit the bundle used by estimator ``kind`` on ``data``.

    Binary confounders use stratified frequencies and stratified spectral
    recovery; continuous confounders use logistic/linear regressions, EM and
    the marginal-likelihood outcome fit.
    """
    kind = EstimatorKind.parse(kind)
    obs = as_observed(data)
    c_kind = c_kind or confounder_kind(obs)
    prop = fit_propensity(obs, c_kind)
    if kind is EstimatorKind.ORACLE:
        full = as_full(data)
        if c_kind == "binary":
            return NuisanceSet(prop, OutcomeMean(table=_fit_stratified_mean(full, full.y)))
        design = np.column_stack([np.ones(len(full)), full.a, full.c])
        return NuisanceSet(prop, OutcomeMean(logistic=tuple(fit_logistic(design, full.y.astype(float)))))
    if kind is EstimatorKind.NAIVE:
        if c_kind == "binary":
            return NuisanceSet(prop, OutcomeMean(table=_fit_stratified_mean(obs, obs.w)))
        design = np.column_stack([np.ones(len(obs)), obs.a, obs.c])
        coef, *_ = np.linalg.lstsq(design, obs.w, rcond=None)
        return NuisanceSet(prop, OutcomeMean(linear=tuple(float(b) for b in coef)))
    if c_kind == "binary":
        rec = recover_stratified(obs, pool=pool)
        return nuisance_from_laws(rec, prop)
    law = em_fit_mixture(obs, em_config)
    beta = fit_outcome_given_mixture(obs, law)
    return nuisance_from_laws(law, prop, OutcomeMean(logistic=beta))
