"""Numerical helpers and input validation."""
import numpy as np
from sklearn.utils.validation import check_array

from .core import FullData, ObservedData
from .exceptions import EmptySampleError


def expit(x):
    """Logistic function evaluated branch-wise so neither tail overflows."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def as_observed(X) -> ObservedData:
    """Coerce an observed sample from a dataset object or an ``(n, 5)`` matrix
    with columns ``a, c, w, z, v``."""
    if isinstance(X, ObservedData):
        return X.observed() if isinstance(X, FullData) else X
    X = check_array(X, dtype=float, ensure_min_samples=1)
    if X.shape[1] != 5:
        raise ValueError(f"expected 5 columns (a, c, w, z, v), got {X.shape[1]}")
    return ObservedData(a=X[:, 0].astype(np.int64), c=X[:, 1], w=X[:, 2], z=X[:, 3], v=X[:, 4])


def as_full(X, y=None) -> FullData:
    if isinstance(X, FullData):
        return X
    obs = as_observed(X)
    if y is None:
        raise ValueError("the latent outcome is required here")
    y = check_array(np.asarray(y).reshape(-1, 1), dtype=None, ensure_min_samples=1).ravel()
    return FullData(a=obs.a, c=obs.c, w=obs.w, z=obs.z, v=obs.v, y=y.astype(np.int64))


def require_nonempty(data, what="sample"):
    if len(data) == 0:
        raise EmptySampleError(f"{what} is empty")


def is_binary(x):
    x = np.asarray(x)
    return bool(np.isin(x, (0.0, 1.0)).all())
