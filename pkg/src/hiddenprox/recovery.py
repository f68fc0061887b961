"""Recovery of the latent outcome law from three conditionally independent proxies.

Discrete proxies go through an eigendecomposition of slices of the empirical
three-way table; continuous proxies through EM for a two-class Gaussian
mixture with diagonal covariance. Both return :class:`~hiddenprox.core.LatentLaw`
objects whose class labels are fixed by the ordering of an anchor proxy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import (FIT_TOL, GLOBAL, PROXIES, DiscreteProxyLaw, GaussianProxyLaw, LatentLaw,
                   ObservedData, Stratum, binary_strata)
from .exceptions import (ConvergenceError, DegenerateComponentError, DegenerateTensorError,
                         EigenSeparationError, InsufficientDataError, LabelAmbiguityError,
                         OptimizationError, ProxiError)
from .utils import as_observed, expit, is_binary

CLIP = 1e-8
MAX_CONDITION = 1e10
EIGEN_GAP = 1e-10


def _in_stratum(data: ObservedData, stratum: Stratum):
    if stratum.is_global:
        return np.ones(len(data), dtype=bool)
    return (data.a == stratum.a) & (data.c == stratum.c)


def build_tensor(records, stratum: Stratum = GLOBAL) -> np.ndarray:
    """Relative frequencies of ``(W, Z, V)`` among the records in ``stratum``."""
    data = as_observed(records) if not isinstance(records, ObservedData) else records
    mask = _in_stratum(data, stratum)
    if not mask.any():
        raise InsufficientDataError(f"no records in stratum {stratum.label()}")
    P = data.proxies()[mask]
    if not is_binary(P):
        raise ValueError("tensor construction needs binary proxies")
    idx = P.astype(np.int64) @ np.array([4, 2, 1])
    counts = np.bincount(idx, minlength=8).astype(float)
    return (counts / counts.sum()).reshape(2, 2, 2)


def _clip_columns(M):
    M = np.clip(M, CLIP, 1 - CLIP)
    return M / M.sum(axis=0)


def spectral_recover(tensor, stratum: Stratum = GLOBAL) -> LatentLaw:
    """Factor a 2x2x2 table into a two-class latent model.

    With ``M = sum_v T[:, :, v]`` and ``M1 = T[:, :, 1]``, the matrix
    ``M1 M^{-1}`` equals ``L_W diag(p(V=1|Y)) L_W^{-1}``: its eigenvalues are
    ``p(V=1|Y=y)`` and its eigenvectors, scaled to sum to one, are the columns
    of ``L_W[w, y] = p(W=w|Y=y)``. Then ``L_W^{-1} M = diag(p(Y)) L_Z^T``
    gives the class probabilities (row sums) and ``p(Z|Y)``.

    Labels are arbitrary; pass the result through :func:`align_labels`.
    """
    T = np.asarray(tensor, dtype=float)
    if T.shape != (2, 2, 2):
        raise ValueError("expected a 2x2x2 table")
    M = T.sum(axis=2)
    M1 = T[:, :, 1]
    if not np.isfinite(np.linalg.cond(M)) or np.linalg.cond(M) > MAX_CONDITION:
        raise DegenerateTensorError(
            "W-Z marginal is (nearly) singular; the table has fewer than two latent classes")
    evals, evecs = np.linalg.eig(M1 @ np.linalg.inv(M))
    if np.abs(evals.imag).max() > EIGEN_GAP:
        raise EigenSeparationError("complex eigenvalues in slice ratio")
    evals, evecs = evals.real, evecs.real
    if abs(evals[0] - evals[1]) < EIGEN_GAP:
        raise EigenSeparationError(
            f"coincident eigenvalues {evals.tolist()}; p(V|Y) does not separate the classes")
    sums = evecs.sum(axis=0)
    if np.abs(sums).min() < CLIP:
        raise DegenerateTensorError("eigenvector with zero mass")
    L_w = _clip_columns(evecs / sums)
    pv1 = np.clip(evals, CLIP, 1 - CLIP)
    B = np.linalg.solve(L_w, M)
    p_y = np.clip(B.sum(axis=1), CLIP, 1 - CLIP)
    p_y = p_y / p_y.sum()
    L_z = _clip_columns((B / p_y[:, None]).T)
    L_v = np.vstack([1 - pv1, pv1])
    support = np.array([0.0, 1.0])
    return LatentLaw(p_y, {"w": DiscreteProxyLaw(support, L_w),
                           "z": DiscreteProxyLaw(support, L_z),
                           "v": DiscreteProxyLaw(support, L_v)}, stratum)


def anchor_moments(law: LatentLaw, anchor="w"):
    """Class-wise mean of the anchor proxy (success probability for 0/1 proxies)."""
    return law.proxies[anchor.lower()].mean()


def align_labels(law: LatentLaw, anchor="w", min_gap=FIT_TOL) -> LatentLaw:
    """Relabel classes so the anchor proxy's mean increases with ``y``."""
    m = anchor_moments(law, anchor)
    order = np.argsort(m, kind="stable")
    if np.diff(m[order]).min() <= min_gap:
        raise LabelAmbiguityError(
            f"anchor {anchor.upper()} moments {m.tolist()} are not separated by more than {min_gap}")
    if (order == np.arange(len(order))).all():
        return law
    return law.permute(order)


@dataclass(frozen=True)
class StratifiedRecovery:
    """Per-stratum laws plus the implied ``p(Y = 1 | A, C)`` table."""

    laws: dict
    outcome_table: dict
    pooled: bool

    def law_for(self, stratum):
        return self.laws[stratum]

    def to_dict(self):
        return {"pooled": self.pooled,
                "laws": [law.to_dict() for law in self.laws.values()],
                "outcomeTable": [{"a": s.a, "c": s.c, "p": p} for s, p in self.outcome_table.items()]}

    @classmethod
    def from_dict(cls, doc):
        laws = [LatentLaw.from_dict(d) for d in doc["laws"]]
        table = {Stratum(int(r["a"]), int(r["c"])): float(r["p"]) for r in doc["outcomeTable"]}
        return cls({law.stratum: law for law in laws}, table, bool(doc["pooled"]))


def _class_probs_given_law(tensor, law: LatentLaw):
    """Least-squares class probabilities matching the three one-way margins of
    ``tensor`` under the (fixed) proxy laws of ``law``."""
    margins = [tensor.sum(axis=(1, 2)), tensor.sum(axis=(0, 2)), tensor.sum(axis=(0, 1))]
    A = np.vstack([law.proxies[k].table for k in PROXIES] + [np.ones((1, law.n_classes))])
    b = np.concatenate(margins + [[1.0]])
    p, *_ = np.linalg.lstsq(A, b, rcond=None)
    p = np.clip(p, CLIP, 1 - CLIP)
    return p / p.sum()


def recover_stratified(records, strata=None, pool=True, anchor="w") -> StratifiedRecovery:
    """Recover the latent law within each ``(A, C)`` cell of a binary-confounder sample.

    With ``pool=True`` the proxy laws are recovered once from all records
    (they depend on ``Y`` only) and each cell contributes only its class
    probabilities. With ``pool=False`` every cell is factored on its own.
    """
    data = as_observed(records)
    strata = binary_strata() if strata is None else [Stratum.parse(s) for s in strata]
    if not is_binary(data.c):
        raise ValueError("stratified recovery needs a binary confounder")
    for s in strata:
        if not _in_stratum(data, s).any():
            raise InsufficientDataError(f"stratum {s.label()} is empty")
    laws = {}
    if pool:
        base = align_labels(spectral_recover(build_tensor(data, GLOBAL)), anchor)
    for s in strata:
        try:
            T = build_tensor(data, s)
            if pool:
                law = LatentLaw(_class_probs_given_law(T, base), base.proxies, s)
            else:
                law = align_labels(spectral_recover(T, s), anchor)
        except ProxiError as exc:
            raise type(exc)(f"stratum {s.label()}: {exc}") from exc
        laws[s] = law
    table = {s: float(law.class_probs[1]) for s, law in laws.items()}
    return StratifiedRecovery(laws, table, pool)


@dataclass(frozen=True)
class EmConfig:
    n_classes: int = 2
    max_iter: int = 500
    tol: float = 1e-8
    n_restarts: int = 5
    init: str = "median-split"
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1 or self.n_restarts < 1:
            raise ValueError("max_iter and n_restarts must be at least 1")
        if self.n_classes != 2:
            raise ValueError("only two-class mixtures are supported")
        if self.init not in ("median-split", "random"):
            raise ValueError(f"unknown init rule {self.init!r}")


@dataclass
class EmFit:
    law: LatentLaw
    loglik: float
    trace: list
    restart: int
    converged: bool


MIN_WEIGHT = 1e-4
MIN_SD = 1e-4


def mixture_loglik(X, probs, means, sds, X2=None):
    """Observed-data log-likelihood of a diagonal Gaussian mixture, with the
    per-unit joint log densities ``(n, K)``."""
    X = np.asarray(X, dtype=float)
    X2 = X**2 if X2 is None else X2
    prec = 1.0 / sds**2
    quad = X2 @ prec.T - 2.0 * X @ (means * prec).T + (means**2 * prec).sum(axis=1)
    const = np.log(probs) - np.log(sds).sum(axis=1) - 0.5 * X.shape[1] * np.log(2 * np.pi)
    joint = const - 0.5 * quad
    return float(_lse_rows(joint).sum()), joint


def _lse_rows(joint):
    hi = joint.max(axis=1)
    return hi + np.log(np.exp(joint - hi[:, None]).sum(axis=1))


def _m_step(X, resp, X2):
    """Batched M-step; ``resp`` has shape ``(R, n, K)``."""
    nk = resp.sum(axis=1)
    probs = nk / X.shape[0]
    rt = resp.transpose(0, 2, 1)
    safe = np.maximum(nk, np.finfo(float).tiny)[..., None]  # empty classes are caught as collapsed
    means = (rt @ X) / safe
    var = (rt @ X2) / safe - means**2
    return probs, means, np.sqrt(np.maximum(var, 0.0))


def _batched_joint(X, X2, probs, means, sds):
    prec = 1.0 / sds**2
    quad = (X2 @ prec.transpose(0, 2, 1) - 2.0 * X @ (means * prec).transpose(0, 2, 1)
            + (means**2 * prec).sum(axis=2)[:, None, :])
    const = np.log(probs) - np.log(sds).sum(axis=2) - 0.5 * X.shape[1] * np.log(2 * np.pi)
    return const[:, None, :] - 0.5 * quad


def _run_em(X, resp, cfg: EmConfig):
    """Run EM from each initial responsibility matrix in ``resp`` (``(R, n, K)``)
    in lock-step, freezing each restart once it converges or collapses.

    Returns per-restart ``(params, trace, status)`` with status one of
    ``"converged"``, ``"max_iter"`` or a :class:`DegenerateComponentError`.
    """
    X2 = X**2
    R = resp.shape[0]
    traces = [[] for _ in range(R)]
    status = ["max_iter"] * R
    params = [None] * R
    active = np.arange(R)
    for _ in range(cfg.max_iter):
        probs, means, sds = _m_step(X, resp, X2)
        bad = (probs.min(axis=1) < MIN_WEIGHT) | (sds.min(axis=(1, 2)) < MIN_SD)
        joint = _batched_joint(X, X2, np.where(bad[:, None], 0.5, probs), means,
                               np.where(bad[:, None, None], 1.0, sds))
        lse = joint.max(axis=2)
        lse = lse + np.log(np.exp(joint - lse[..., None]).sum(axis=2))
        ll = lse.sum(axis=1)
        keep = []
        for j, r in enumerate(active):
            params[r] = (probs[j], means[j], sds[j])
            if bad[j]:
                status[r] = DegenerateComponentError(
                    f"mixture component collapsed (weights {probs[j].round(6).tolist()}, "
                    f"min sd {sds[j].min():.3g})")
                continue
            tr = traces[r]
            tr.append(float(ll[j]))
            if len(tr) > 1 and abs(tr[-1] - tr[-2]) <= cfg.tol * abs(tr[-2]):
                status[r] = "converged"
                continue
            keep.append(j)
        if not keep:
            break
        active = active[keep]
        resp = np.exp(joint[keep] - lse[keep][..., None])
    return [(params[r], traces[r], status[r]) for r in range(R)]


def _initial_responsibilities(X, cfg: EmConfig, restart, rng):
    if restart == 0 and cfg.init == "median-split":
        score = X[:, 0]
    else:
        # median split along a random positive direction of the standardised proxies
        sd = X.std(axis=0)
        Xs = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        score = Xs @ rng.dirichlet(np.ones(X.shape[1]))
    hi = (score > np.median(score)).astype(float)
    return np.column_stack([1 - hi, hi])


def em_fit_mixture(records, cfg: EmConfig = EmConfig(), return_fit=False):
    """Fit a two-class Gaussian latent class model to the proxies by EM.

    The best of ``cfg.n_restarts`` runs (highest final log-likelihood, ties
    to the lower restart index) is returned, aligned so that the mean of
    ``W`` increases with the class. Restart 0 starts from a split of ``W`` at
    its median; later restarts from median splits along random positive
    directions of the standardised proxies, drawn with ``cfg.seed``.
    """
    if isinstance(records, ObservedData):
        X = records.proxies()
    else:
        X = check_array(records, dtype=float)
        if X.shape[1] == 5:
            X = X[:, 2:]
    n_free = cfg.n_classes - 1 + 2 * cfg.n_classes * X.shape[1]
    if len(X) < 10 * n_free:
        raise InsufficientDataError(f"EM needs at least {10 * n_free} records, got {len(X)}")
    rng = np.random.default_rng(cfg.seed)
    resp = np.stack([_initial_responsibilities(X, cfg, r, rng) for r in range(cfg.n_restarts)])
    runs = _run_em(X, resp, cfg)
    fits = [(tr[-1], r, params, tr, st) for r, (params, tr, st) in enumerate(runs)
            if isinstance(st, str)]
    if not fits:
        raise DegenerateComponentError(f"all {cfg.n_restarts} restarts collapsed: {runs[0][2]}")
    good = [f for f in fits if f[4] == "converged"]
    if not good:
        best = max(fits, key=lambda f: (f[0], -f[1]))
        raise ConvergenceError(
            f"EM did not converge in {cfg.max_iter} iterations (best log-likelihood {best[0]:.6f})",
            trace=best[3])
    ll, restart, (probs, means, sds), trace, _ = max(good, key=lambda f: (f[0], -f[1]))
    law = LatentLaw(probs / probs.sum(),
                    {k: GaussianProxyLaw(means[:, i], sds[:, i]) for i, k in enumerate(PROXIES)})
    law = align_labels(law, "w")
    fit = EmFit(law, ll, trace, restart, True)
    return fit if return_fit else law


def affine_coefficients(law: LatentLaw):
    """Intercept and slope of each proxy's class mean, ``mu_X0`` and ``mu_X1 - mu_X0``."""
    return {k.upper(): (float(p.mean()[0]), float(p.mean()[1] - p.mean()[0]))
            for k, p in law.proxies.items()}


def _proxy_loglik(data: ObservedData, law: LatentLaw):
    cols = {"w": data.w, "z": data.z, "v": data.v}
    total = 0.0
    for k, p in law.proxies.items():
        if isinstance(p, GaussianProxyLaw):
            total = total + p.logpdf(cols[k])
        else:
            with np.errstate(divide="ignore"):
                total = total + np.log(p.pdf(cols[k]))
    return total


def outcome_loglik(beta, design, log_f):
    """Marginal log-likelihood of ``beta`` with frozen measurement log densities
    ``log_f[:, y]``, its gradient and posterior ``p(Y = 1 | O)``."""
    eta = design @ beta
    log_p1 = -np.logaddexp(0.0, -eta)
    log_p0 = -np.logaddexp(0.0, eta)
    a1 = log_p1 + log_f[:, 1]
    a0 = log_p0 + log_f[:, 0]
    lse = np.logaddexp(a0, a1)
    post = np.exp(a1 - lse)
    grad = design.T @ (post - expit(eta))
    return float(lse.sum()), grad, post


def fit_outcome_given_mixture(records, law: LatentLaw, max_iter=200, gtol=1e-8):
    """Logistic model for ``p(Y = 1 | A, C)`` by maximising the observed-data
    likelihood with the measurement densities frozen at ``law``.

    Newton steps on the exact Hessian ``X' diag(r(1-r) - p(1-p)) X`` with a
    backtracking line search, falling back to the always-definite scoring
    matrix ``-X' diag(p(1-p)) X`` whenever the Hessian is not negative
    definite. Returns ``(b0, bA, bC)``.
    """
    data = as_observed(records)
    log_f = _proxy_loglik(data, law)
    if not np.isfinite(log_f).all():
        raise OptimizationError("measurement law gives zero density to observed proxies")
    if np.abs(log_f[:, 1] - log_f[:, 0]).max() < 1e-12:
        raise OptimizationError("measurement densities identical across classes; "
                                "the likelihood is flat in beta", grad_norm=0.0)
    design = np.column_stack([np.ones(len(data)), data.a, data.c])
    _, _, post = outcome_loglik(np.zeros(3), design, log_f + np.log(law.class_probs))
    beta = np.array([float(np.log(post.mean() / (1 - post.mean()))), 0.0, 0.0])
    ll, grad, post = outcome_loglik(beta, design, log_f)
    for _ in range(max_iter):
        gnorm = np.abs(grad).max()
        if gnorm < gtol:
            return tuple(float(b) for b in beta)
        pi = expit(design @ beta)
        H = design.T @ ((post * (1 - post) - pi * (1 - pi))[:, None] * design)
        try:
            np.linalg.cholesky(-H)
        except np.linalg.LinAlgError:
            H = -design.T @ ((pi * (1 - pi))[:, None] * design)
        step = np.linalg.solve(H, -grad)
        t = 1.0
        while True:
            cand = beta + t * step
            cll, cgrad, cpost = outcome_loglik(cand, design, log_f)
            if cll >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll, grad, post = cand, cll, cgrad, cpost
    raise OptimizationError(f"no convergence after {max_iter} iterations, "
                            f"gradient inf-norm {np.abs(grad).max():.3g}",
                            grad_norm=float(np.abs(grad).max()))


def laws_to_json(laws, path=None, config=None):
    if isinstance(laws, LatentLaw):
        doc = laws.to_dict()
    elif isinstance(laws, StratifiedRecovery):
        doc = laws.to_dict()
    else:
        doc = {"laws": [law.to_dict() for law in laws]}
    if config is not None:
        doc["config"] = config
    text = json.dumps(doc, indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def laws_from_json(source):
    """Inverse of :func:`laws_to_json`; accepts a path or a parsed document."""
    doc = source
    if not isinstance(source, dict):
        with open(source) as fh:
            doc = json.load(fh)
    if "outcomeTable" in doc:
        return StratifiedRecovery.from_dict(doc)
    if "laws" in doc:
        return [LatentLaw.from_dict(d) for d in doc["laws"]]
    return LatentLaw.from_dict(doc)


class SpectralLatentClassModel(BaseEstimator):
    """Two-class latent model for three binary proxies, fitted by
    eigendecomposition of the empirical table.

    ``X`` is an ``(n, 3)`` array of the proxies W, Z, V.
    """

    def __init__(self, anchor="w"):
        self.anchor = anchor

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        data = ObservedData(a=np.zeros(len(X), dtype=np.int64), c=np.zeros(len(X)),
                            w=X[:, 0], z=X[:, 1], v=X[:, 2])
        self.tensor_ = build_tensor(data)
        self.law_ = align_labels(spectral_recover(self.tensor_), self.anchor)
        self.n_features_in_ = 3
        return self

    def predict_proba(self, X):
        """Posterior ``p(Y = y | W, Z, V)`` under the fitted law."""
        check_is_fitted(self, "law_")
        X = check_array(X, dtype=float)
        joint = np.log(self.law_.class_probs)
        for i, k in enumerate(PROXIES):
            joint = joint + np.log(self.law_.proxies[k].pdf(X[:, i]))
        return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


class GaussianLatentClassModel(BaseEstimator):
    """Two-class diagonal Gaussian latent model for continuous proxies, fitted by EM."""

    def __init__(self, max_iter=500, tol=1e-8, n_restarts=5, random_state=0):
        self.max_iter = max_iter
        self.tol = tol
        self.n_restarts = n_restarts
        self.random_state = random_state

    def _config(self):
        return EmConfig(max_iter=self.max_iter, tol=self.tol, n_restarts=self.n_restarts,
                        seed=self.random_state)

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        fit = em_fit_mixture(X, self._config(), return_fit=True)
        self.law_ = fit.law
        self.loglik_trace_ = fit.trace
        self.best_restart_ = fit.restart
        self.n_iter_ = len(fit.trace)
        self.n_features_in_ = X.shape[1]
        return self

    def _joint(self, X):
        check_is_fitted(self, "law_")
        X = check_array(X, dtype=float)
        means = np.column_stack([self.law_.proxies[k].mean() for k in PROXIES])
        sds = np.column_stack([self.law_.proxies[k].sd for k in PROXIES])
        return mixture_loglik(X, self.law_.class_probs, means, sds)[1]

    def score_samples(self, X):
        return logsumexp(self._joint(X), axis=1)

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())

    def predict_proba(self, X):
        joint = self._joint(X)
        return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
