"""Domain types shared across the package.

Samples are stored column-wise (:class:`FullData`, :class:`ObservedData`) so
every downstream computation is vectorised; :class:`FullRecord` and
:class:`ObservedRecord` are the single-unit views.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

PROXIES = ("w", "z", "v")
PROB_TOL = 1e-12
FIT_TOL = 1e-8


def _frozen(x, dtype=float):
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


class FullRecord(NamedTuple):
    a: int
    y: int
    c: float
    w: float
    z: float
    v: float


class ObservedRecord(NamedTuple):
    a: int
    c: float
    w: float
    z: float
    v: float


@dataclass(frozen=True, eq=False)
class ObservedData:
    """Column-wise sample of observed units ``(A, C, W, Z, V)``."""

    a: np.ndarray
    c: np.ndarray
    w: np.ndarray
    z: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        n = len(self.a)
        for name in ("a", "c", "w", "z", "v"):
            col = _frozen(getattr(self, name), dtype=np.int64 if name == "a" else float)
            if col.ndim != 1 or len(col) != n:
                raise ValueError(f"column {name!r} must be 1-d with length {n}")
            object.__setattr__(self, name, col)
        if n and not np.isin(self.a, (0, 1)).all():
            raise ValueError("treatment must be coded 0/1")

    def __len__(self):
        return len(self.a)

    def __iter__(self):
        for i in range(len(self)):
            yield self.record(i)

    def record(self, i) -> ObservedRecord:
        return ObservedRecord(int(self.a[i]), float(self.c[i]), float(self.w[i]),
                              float(self.z[i]), float(self.v[i]))

    def take(self, idx):
        return type(self)(**{k: getattr(self, k)[idx] for k in self.columns()})

    @classmethod
    def columns(cls):
        return ("a", "c", "w", "z", "v")

    @classmethod
    def from_records(cls, records: Sequence):
        records = list(records)
        if not records:
            return cls(**{k: np.empty(0) for k in cls.columns()})
        cols = zip(*[tuple(getattr(r, k) for k in cls.columns()) for r in records])
        return cls(**dict(zip(cls.columns(), (np.asarray(c) for c in cols))))

    def proxies(self) -> np.ndarray:
        """``(n, 3)`` matrix of the proxy columns in W, Z, V order."""
        return np.column_stack([self.w, self.z, self.v])

    def to_matrix(self) -> np.ndarray:
        return np.column_stack([getattr(self, k) for k in self.columns()]).astype(float)


@dataclass(frozen=True, eq=False)
class FullData(ObservedData):
    """Column-wise sample including the latent outcome ``y``."""

    y: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        super().__post_init__()
        y = _frozen(self.y, dtype=np.int64)
        if y.shape != self.a.shape:
            raise ValueError("column 'y' must match the other columns")
        if len(y) and y.min() < 0:
            raise ValueError("latent outcome must be coded 0..K-1")
        object.__setattr__(self, "y", y)

    @classmethod
    def columns(cls):
        return ("a", "y", "c", "w", "z", "v")

    def record(self, i) -> FullRecord:
        return FullRecord(int(self.a[i]), int(self.y[i]), float(self.c[i]),
                          float(self.w[i]), float(self.z[i]), float(self.v[i]))

    def observed(self) -> ObservedData:
        return ObservedData(a=self.a, c=self.c, w=self.w, z=self.z, v=self.v)


def project_observed(full):
    """Drop the latent outcome, keeping order and all other values.

    Accepts a :class:`FullData` sample or a sequence of :class:`FullRecord`
    and returns the matching observed type.
    """
    if isinstance(full, FullData):
        return full.observed()
    return [ObservedRecord(r.a, r.c, r.w, r.z, r.v) for r in full]


def attach_outcome(obs: ObservedData, y) -> FullData:
    return FullData(a=obs.a, c=obs.c, w=obs.w, z=obs.z, v=obs.v, y=np.asarray(y))


class Stratum(NamedTuple):
    """Cell of ``(A, C)`` within which the latent law is recovered.

    ``Stratum.GLOBAL`` pools every unit; it is the only choice for
    continuous confounders.
    """

    a: int | None
    c: int | str

    @property
    def is_global(self):
        return self.a is None

    def label(self):
        return "global" if self.is_global else f"a={self.a},c={self.c}"

    @classmethod
    def parse(cls, value):
        if isinstance(value, Stratum):
            return value
        if value is None or value == "global":
            return GLOBAL
        if isinstance(value, Mapping):
            return cls(int(value["a"]), int(value["c"]))
        return cls(int(value[0]), int(value[1]))

    def to_json(self):
        return "global" if self.is_global else {"a": self.a, "c": self.c}


GLOBAL = Stratum(None, "global")
Stratum.GLOBAL = GLOBAL


def binary_strata():
    return [Stratum(a, c) for a in (0, 1) for c in (0, 1)]


def _check_prob_vector(p, name):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or (p < 0).any() or (p > 1).any():
        raise ValueError(f"{name} must be a vector of probabilities")
    if abs(p.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"{name} sums to {p.sum()!r}, not 1")
    return p


@dataclass(frozen=True, eq=False)
class DiscreteProxyLaw:
    """Conditional table ``table[x_index, y] = p(X = support[x_index] | Y = y)``."""

    support: np.ndarray
    table: np.ndarray
    kind = "discrete"

    def __post_init__(self):
        support = _frozen(self.support)
        table = np.array(self.table, dtype=float)
        if table.ndim != 2 or table.shape[0] != len(support):
            raise ValueError("table must have one row per support point")
        for y in range(table.shape[1]):
            _check_prob_vector(table[:, y], f"p(X | Y={y})")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "table", _frozen(table))

    @property
    def n_classes(self):
        return self.table.shape[1]

    def mean(self, fn_values=None) -> np.ndarray:
        """``E[f(X) | Y = y]`` for each class; identity when ``fn_values`` is None."""
        vals = self.support if fn_values is None else np.asarray(fn_values, dtype=float)
        return vals @ self.table

    def success_prob(self):
        """``p(X = 1 | Y)``, only meaningful for 0/1 support."""
        return self.table[list(self.support).index(1.0)]

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.support, x)
        idx = np.clip(idx, 0, len(self.support) - 1)
        out = self.table[idx]
        out = np.where((self.support[idx] == x)[:, None], out, 0.0)
        return out

    def permute(self, order):
        return DiscreteProxyLaw(self.support, self.table[:, order])

    def params(self):
        return {"support": self.support.tolist(), "table": self.table.tolist()}


@dataclass(frozen=True, eq=False)
class GaussianProxyLaw:
    """``X | Y = y ~ N(mean[y], sd[y]^2)``."""

    mean_: np.ndarray
    sd: np.ndarray
    kind = "gaussian"

    def __post_init__(self):
        mean, sd = _frozen(self.mean_), _frozen(self.sd)
        if mean.shape != sd.shape or mean.ndim != 1:
            raise ValueError("mean and sd must be vectors of equal length")
        if not (sd > 0).all():
            raise ValueError("gaussian sd must be positive")
        object.__setattr__(self, "mean_", mean)
        object.__setattr__(self, "sd", sd)

    @property
    def n_classes(self):
        return len(self.mean_)

    def mean(self, fn_values=None):
        if fn_values is not None:
            raise ValueError("gaussian laws only expose the identity moment")
        return self.mean_

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[:, None]
        zs = (x - self.mean_) / self.sd
        return -0.5 * zs**2 - np.log(self.sd) - 0.5 * np.log(2 * np.pi)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def permute(self, order):
        return GaussianProxyLaw(self.mean_[order], self.sd[order])

    def params(self):
        return {"mean": self.mean_.tolist(), "sd": self.sd.tolist()}


def proxy_law_from_dict(doc):
    params = doc["params"]
    if doc["kind"] == "discrete":
        return DiscreteProxyLaw(np.asarray(params["support"]), np.asarray(params["table"]))
    if doc["kind"] == "gaussian":
        return GaussianProxyLaw(np.asarray(params["mean"]), np.asarray(params["sd"]))
    raise ValueError(f"unknown proxy law kind {doc['kind']!r}")


@dataclass(frozen=True, eq=False)
class LatentLaw:
    """Latent class probabilities and per-proxy conditional laws for one stratum.

    ``proxies`` maps ``"w"``, ``"z"``, ``"v"`` to a
    :class:`DiscreteProxyLaw` or :class:`GaussianProxyLaw`. Class ``y``
    corresponds to outcome value ``support[y]``.
    """

    class_probs: np.ndarray
    proxies: Mapping[str, DiscreteProxyLaw | GaussianProxyLaw]
    stratum: Stratum = GLOBAL
    support: np.ndarray | None = None

    def __post_init__(self):
        probs = _frozen(_check_prob_vector(self.class_probs, "class_probs"))
        object.__setattr__(self, "class_probs", probs)
        if set(self.proxies) != set(PROXIES):
            raise ValueError(f"need proxy laws for {PROXIES}")
        object.__setattr__(self, "proxies", dict(self.proxies))
        for law in self.proxies.values():
            if law.n_classes != len(probs):
                raise ValueError("proxy laws disagree with the number of classes")
        support = np.arange(len(probs)) if self.support is None else self.support
        object.__setattr__(self, "support", _frozen(support))

    @property
    def n_classes(self):
        return len(self.class_probs)

    def permute(self, order):
        order = list(order)
        return LatentLaw(self.class_probs[order],
                         {k: p.permute(order) for k, p in self.proxies.items()},
                         self.stratum, self.support)

    def with_stratum(self, stratum):
        return LatentLaw(self.class_probs, self.proxies, stratum, self.support)

    def tensor(self) -> np.ndarray:
        """Reconstructed joint table ``p(w, z, v)`` (discrete proxies only)."""
        tw, tz, tv = (self.proxies[k].table for k in PROXIES)
        return np.einsum("y,wy,zy,vy->wzv", self.class_probs, tw, tz, tv)

    def to_dict(self):
        return {
            "stratum": self.stratum.to_json(),
            "classProbs": self.class_probs.tolist(),
            "support": self.support.tolist(),
            "proxies": {k.upper(): {"kind": p.kind, "params": p.params()}
                        for k, p in self.proxies.items()},
        }

    @classmethod
    def from_dict(cls, doc):
        proxies = {k.lower(): proxy_law_from_dict(v) for k, v in doc["proxies"].items()}
        return cls(np.asarray(doc["classProbs"]), proxies, Stratum.parse(doc["stratum"]),
                   np.asarray(doc["support"]) if "support" in doc else None)


class EstimatorKind(str, enum.Enum):
    PROPOSED = "proposed"
    ORACLE = "oracle"
    NAIVE = "naive"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown estimator kind {value!r}") from None


@dataclass(frozen=True)
class EstimateResult:
    psi1: float
    psi0: float
    var_hat: float
    n: int
    kind: EstimatorKind
    folds: int = 1
    seed: int | None = None
    corruption_log: tuple = ()

    @property
    def ate(self):
        return self.psi1 - self.psi0

    @property
    def se(self):
        return float(np.sqrt(self.var_hat))

    def __post_init__(self):
        if not self.var_hat >= 0:
            raise ValueError("var_hat must be non-negative")
        object.__setattr__(self, "kind", EstimatorKind.parse(self.kind))

    def confint(self, z=1.96):
        return self.ate - z * self.se, self.ate + z * self.se

    def to_dict(self):
        lo, hi = self.confint()
        return {"kind": self.kind.value, "n": self.n, "seed": self.seed, "folds": self.folds,
                "psi1": self.psi1, "psi0": self.psi0, "ate": self.ate, "varHat": self.var_hat,
                "ciLow": lo, "ciHigh": hi, "corruptionLog": list(self.corruption_log)}
