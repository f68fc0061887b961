"""Simulators for the binary and mixed designs and their exact targets."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .core import (GLOBAL, DiscreteProxyLaw, FullData, GaussianProxyLaw, LatentLaw,
                   ObservedData, Stratum)
from .exceptions import EmptySampleError, UnsupportedKindError
from .utils import expit

BINARY = "binary"
MIXED = "mixed"

# uniform slots per record; normals consume two consecutive slots
_SLOT_C, _SLOT_A, _SLOT_Y, _SLOT_W, _SLOT_Z, _SLOT_V = 0, 2, 3, 4, 6, 8


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of one of the two simulation designs.

    Binary design: ``C ~ Bern(p_c)``, ``A | C ~ Bern(p_a_given_c[C])``,
    ``Y | A, C ~ Bern(expit(b0 + bA A + bC C))`` and each proxy
    ``X | Y ~ Bern(proxy_success[Y])``.

    Mixed design: ``C ~ N(0, 1)``, ``A | C ~ Bern(expit(g0 + g1 C))``, same
    outcome model, and ``X = intercept_X + slope_X Y + N(0, noise_sd^2)``.
    """

    kind: str = BINARY
    p_c: float = 0.3
    p_a_given_c: tuple = (0.4, 0.6)
    propensity_coef: tuple = (-0.3, 0.8)
    outcome_coef: tuple = (-1.0, 3.0, -1.5)
    proxy_success: tuple = (0.1, 0.9)
    proxy_intercepts: tuple = (-0.3, 0.5, 1.0)
    proxy_slopes: tuple = (1.5, 1.2, 0.8)
    noise_sd: float = 1.0
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in (BINARY, MIXED):
            raise UnsupportedKindError(f"unknown design {self.kind!r}")
        probs = (self.p_c, *self.p_a_given_c, *self.proxy_success)
        if not all(0 < p < 1 for p in probs):
            raise ValueError("success probabilities must lie strictly inside (0, 1)")
        if self.noise_sd <= 0:
            raise ValueError("noise_sd must be positive")

    @classmethod
    def binary(cls, **kw):
        return cls(kind=BINARY, **kw)

    @classmethod
    def mixed(cls, **kw):
        kw.setdefault("outcome_coef", (-3.0, 3.0, 0.5))
        return cls(kind=MIXED, **kw)

    @classmethod
    def named(cls, name):
        if name == BINARY:
            return cls.binary()
        if name == MIXED:
            return cls.mixed()
        raise UnsupportedKindError(f"unknown design {name!r}")

    def to_dict(self):
        d = asdict(self)
        d.pop("extra")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    # true nuisance functions

    def propensity(self, c):
        """``p(A = 1 | C = c)``."""
        c = np.asarray(c, dtype=float)
        if self.kind == BINARY:
            return np.where(c == 1, self.p_a_given_c[1], self.p_a_given_c[0])
        g0, g1 = self.propensity_coef
        return expit(g0 + g1 * c)

    def outcome_prob(self, a, c):
        """``p(Y = 1 | A = a, C = c)``."""
        b0, ba, bc = self.outcome_coef
        return expit(b0 + ba * np.asarray(a, dtype=float) + bc * np.asarray(c, dtype=float))

    def proxy_means(self):
        """``E[X | Y = y]`` as a ``(3, 2)`` array, rows W, Z, V."""
        if self.kind == BINARY:
            return np.tile(np.asarray(self.proxy_success, dtype=float), (3, 1))
        icpt = np.asarray(self.proxy_intercepts, dtype=float)
        slope = np.asarray(self.proxy_slopes, dtype=float)
        return np.column_stack([icpt, icpt + slope])

    def proxy_law(self, class_probs, stratum=GLOBAL) -> LatentLaw:
        if self.kind == BINARY:
            p1 = np.asarray(self.proxy_success, dtype=float)
            table = np.vstack([1 - p1, p1])
            laws = {k: DiscreteProxyLaw(np.array([0.0, 1.0]), table) for k in "wzv"}
        else:
            means = self.proxy_means()
            sd = np.full(2, float(self.noise_sd))
            laws = {k: GaussianProxyLaw(means[i], sd) for i, k in enumerate("wzv")}
        return LatentLaw(np.asarray(class_probs, dtype=float), laws, stratum)


def simulate(spec: DgpSpec, n: int, seed: int, intervene: int | None = None,
             start: int = 0) -> FullData:
    """Draw ``n`` full records.

    Record ``i`` uses the stream keyed by ``(seed, start + i)``; drawing
    records ``[0, n)`` in chunks via ``start`` gives identical output. With
    ``intervene`` set, ``A`` is forced to that arm before ``Y`` is drawn.
    """
    if n < 1:
        raise EmptySampleError("n must be at least 1")
    keys = rng.record_keys(seed, np.arange(start, start + n, dtype=np.uint64))
    if spec.kind == BINARY:
        c = (rng.uniforms(keys, _SLOT_C) < spec.p_c).astype(float)
    else:
        c = rng.normals(keys, _SLOT_C)
    a = (rng.uniforms(keys, _SLOT_A) < spec.propensity(c)).astype(np.int64)
    if intervene is not None:
        a = np.full(n, int(intervene), dtype=np.int64)
    y = (rng.uniforms(keys, _SLOT_Y) < spec.outcome_prob(a, c)).astype(np.int64)
    proxies = []
    for i, slot in enumerate((_SLOT_W, _SLOT_Z, _SLOT_V)):
        if spec.kind == BINARY:
            p1 = np.asarray(spec.proxy_success)[y]
            proxies.append((rng.uniforms(keys, slot) < p1).astype(float))
        else:
            mean = spec.proxy_means()[i][y]
            proxies.append(mean + spec.noise_sd * rng.normals(keys, slot))
    w, z, v = proxies
    return FullData(a=a, c=c, w=w, z=z, v=v, y=y)


def _gauss_hermite_expectation(fn, nodes=96):
    """``E[fn(C)]`` for ``C ~ N(0, 1)``."""
    x, wts = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(wts * fn(x)) / np.sqrt(2 * np.pi))


def true_targets(spec: DgpSpec, nodes: int = 96):
    """Return ``(psi1, psi0, ate)`` with ``psi_a = E[Y(a)]`` by the
    adjustment formula."""
    psi = {}
    for arm in (1, 0):
        if spec.kind == BINARY:
            psi[arm] = float((1 - spec.p_c) * spec.outcome_prob(arm, 0)
                             + spec.p_c * spec.outcome_prob(arm, 1))
        else:
            if nodes < 64:
                raise ValueError("use at least 64 quadrature nodes")
            psi[arm] = _gauss_hermite_expectation(lambda c: spec.outcome_prob(arm, c), nodes)
    return psi[1], psi[0], psi[1] - psi[0]


def latent_class_prob(spec: DgpSpec, stratum: Stratum):
    """``p(Y = 1 | stratum)`` for the binary design."""
    if spec.kind != BINARY:
        raise UnsupportedKindError("latent class probabilities per stratum need the binary design")
    if stratum.is_global:
        return float(sum((spec.p_c if c else 1 - spec.p_c)
                         * (spec.p_a_given_c[c] if a else 1 - spec.p_a_given_c[c])
                         * spec.outcome_prob(a, c) for a in (0, 1) for c in (0, 1)))
    return float(spec.outcome_prob(stratum.a, stratum.c))


def population_tensor(spec: DgpSpec, stratum: Stratum) -> np.ndarray:
    """Exact ``p(W = w, Z = z, V = v | stratum)`` as a 2x2x2 array."""
    if spec.kind != BINARY:
        raise UnsupportedKindError("population tensors exist only for the binary design")
    p1 = latent_class_prob(spec, stratum)
    return spec.proxy_law([1 - p1, p1], stratum).tensor()


FULL_HEADER = ("a", "y", "c", "w", "z", "v")
OBSERVED_HEADER = ("a", "c", "w", "z", "v")


def _fmt(value, integer):
    return str(int(value)) if integer else format(float(value), ".17g")


def write_csv(data: ObservedData, path, comment: str | None = None):
    """Write a sample as CSV to a path or open text file; ``comment`` lines
    go first, prefixed by ``#``."""
    if hasattr(path, "write"):
        _write_rows(data, path, comment)
        return
    with open(path, "w", newline="") as fh:
        _write_rows(data, fh, comment)


def _write_rows(data, fh, comment):
    header = FULL_HEADER if isinstance(data, FullData) else OBSERVED_HEADER
    cols = [getattr(data, k) for k in header]
    ints = [k in ("a", "y") for k in header]
    if comment:
        for line in comment.splitlines():
            fh.write(f"# {line}\n")
    out = csv.writer(fh, lineterminator="\n")
    out.writerow(header)
    for row in zip(*cols):
        out.writerow([_fmt(x, i) for x, i in zip(row, ints)])


def read_csv(path) -> ObservedData:
    """Inverse of :func:`write_csv`; leading ``#`` lines are skipped."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise ValueError(f"{path}: no CSV header")
    header = tuple(h.strip() for h in rows[0])
    if header not in (FULL_HEADER, OBSERVED_HEADER):
        raise ValueError(f"unexpected CSV header {header}")
    body = np.array(rows[1:], dtype=float).reshape(-1, len(header))
    cols = {k: body[:, i] for i, k in enumerate(header)}
    cols["a"] = cols["a"].astype(np.int64)
    if "y" in cols:
        cols["y"] = cols["y"].astype(np.int64)
        return FullData(**cols)
    return ObservedData(**cols)
