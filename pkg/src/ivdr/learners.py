"""Supervised learners with a common fit/predict contract.

The library is deliberately small: least squares (optionally ridge),
logistic regression by IRLS, forward-backward stepwise selection by AIC,
additive truncated-power splines and k-nearest-neighbour averaging. Each
``fit_*`` function works on a design matrix exactly as given; :func:`fit_learner`
is the entry point used by the ensemble, adding an intercept and optional
second-order term expansion according to a :class:`LearnerSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import SpecError

KINDS = ("least_squares", "logistic", "ridge", "stepwise", "spline_basis", "nearest_neighbor")
FAMILIES = ("continuous", "binary")
EXPANSIONS = ("main_terms", "main_plus_second_order")

PROB_CLIP = (0.001, 0.999)
COEF_BOUND = 15.0


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    family: str = "continuous"
    ridge_lambda: float = 0.0
    knots: int = 3
    k: int = 10
    expansion: str = "main_terms"
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown learner kind {self.kind!r}")
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.expansion not in EXPANSIONS:
            raise SpecError(f"unknown term expansion {self.expansion!r}")
        if self.kind == "logistic" and self.family != "binary":
            raise SpecError("logistic learner requires the binary family")
        if self.ridge_lambda < 0:
            raise SpecError("ridge penalty must be non-negative")
        if self.k < 1 or self.knots < 1:
            raise SpecError("k and knots must be >= 1")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        extra = {"ridge": f"_l{self.ridge_lambda:g}", "nearest_neighbor": f"_k{self.k}",
                 "spline_basis": f"_kn{self.knots}"}.get(self.kind, "")
        suffix = "_2nd" if self.expansion == "main_plus_second_order" else ""
        return f"{self.kind}{extra}{suffix}"


@dataclass(frozen=True, eq=False)
class FittedLearner:
    """Immutable fitted state. ``predict`` depends on nothing else."""

    spec: LearnerSpec
    n: int
    n_columns: int
    converged: bool = True
    coef: np.ndarray | None = None
    # design construction: optional intercept, main columns (or spline basis
    # when ``knots`` is set), then products for each (j, k) in ``pairs``
    intercept: bool = False
    knots: tuple | None = None
    pairs: tuple | None = None
    selected: tuple | None = None
    train_x: np.ndarray | None = field(default=None, repr=False)
    train_y: np.ndarray | None = field(default=None, repr=False)

    def predict(self, X, clip: bool = True) -> np.ndarray:
        return predict(self, X, clip=clip)


# ---------------------------------------------------------------------------
# design helpers


def second_order_pairs(X: np.ndarray) -> tuple:
    """All pairwise products and squares; squares of 0/1 columns are skipped."""
    p = X.shape[1]
    pairs = []
    for j in range(p):
        for k in range(j, p):
            if j == k and np.isin(X[:, j], (0.0, 1.0)).all():
                continue
            pairs.append((j, k))
    return tuple(pairs)


def spline_knots(x: np.ndarray, n_knots: int) -> np.ndarray:
    """Interior knots at empirical quantiles; none for columns with <= 2 distinct values."""
    if np.unique(x).size <= 2:
        return np.empty(0)
    q = np.quantile(x, np.arange(1, n_knots + 1) / (n_knots + 1))
    q = np.unique(q)
    return q[(q > x.min()) & (q < x.max())]


def _features(f: FittedLearner, X: np.ndarray) -> np.ndarray:
    cols = []
    if f.intercept:
        cols.append(np.ones((X.shape[0], 1)))
    if f.knots is None:
        cols.append(X)
    else:
        for j, kn in enumerate(f.knots):
            x = X[:, j]
            cols.append(x[:, None])
            if len(kn):
                cols.append(np.maximum(x[:, None] - np.asarray(kn)[None, :], 0.0))
    if f.pairs:
        cols.append(np.column_stack([X[:, j] * X[:, k] for j, k in f.pairs]))
    if not cols:
        return np.empty((X.shape[0], 0))
    return np.hstack(cols)


# ---------------------------------------------------------------------------
# least squares


def _lstsq(X, y):
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    return coef, rank == X.shape[1]


def _ridge(X, y, lam):
    penalized = ~np.all(X == 1.0, axis=0)
    A = X.T @ X + lam * np.diag(penalized.astype(float))
    try:
        return linalg.solve(A, X.T @ y, assume_a="pos"), True
    except (linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(A, X.T @ y, rcond=None)[0], False


def fit_least_squares(X, y, ridge_lambda: float = 0.0, family: str = "continuous") -> FittedLearner:
    """Least squares on ``X`` as given (include a column of ones for an intercept).

    With ``ridge_lambda == 0`` this is the minimum-norm solution and the
    ``converged`` flag records whether ``X`` had full column rank. With a
    positive penalty every column that is not identically one is shrunk.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise SpecError("X and y must have the same, positive, number of rows")
    if ridge_lambda > 0:
        coef, ok = _ridge(X, y, ridge_lambda)
        kind = "ridge"
    else:
        coef, ok = _lstsq(X, y)
        kind = "least_squares"
    spec = LearnerSpec(kind, family=family, ridge_lambda=ridge_lambda)
    return FittedLearner(spec, n=X.shape[0], n_columns=X.shape[1], converged=ok, coef=coef)


# ---------------------------------------------------------------------------
# logistic regression


def _loglik(X, y, beta):
    eta = X @ beta
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def irls(X, y, beta=None, max_iter: int = 50, tol: float = 1e-8):
    """Newton-Raphson / IRLS for the binomial log-likelihood.

    Coefficients are clamped to ``[-15, 15]`` so complete separation ends in a
    finite fit. Returns ``(beta, converged, loglik)``; ``converged`` is False
    when the iteration limit was hit or a coefficient sits on the clamp.
    """
    n, p = X.shape
    beta = np.zeros(p) if beta is None else np.clip(np.asarray(beta, dtype=float), -COEF_BOUND, COEF_BOUND)
    if p == 0:
        return beta, True, _loglik(X, y, beta)
    ll = _loglik(X, y, beta)
    converged = False
    for _ in range(max_iter):
        mu = expit(X @ beta)
        w = np.maximum(mu * (1.0 - mu), 1e-10)
        H = (X * w[:, None]).T @ X
        g = X.T @ (y - mu)
        try:
            step = linalg.solve(H, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        for _ in range(20):
            new = np.clip(beta + t * step, -COEF_BOUND, COEF_BOUND)
            new_ll = _loglik(X, y, new)
            if new_ll >= ll - 1e-10 * (1.0 + abs(ll)):
                break
            t *= 0.5
        delta = np.max(np.abs(new - beta))
        beta, ll = new, new_ll
        if delta < tol:
            converged = True
            break
    clamped = np.any(np.abs(beta) >= COEF_BOUND - 1e-9)
    return beta, converged and not clamped, ll


def fit_logistic(X, y, max_iter: int = 50, tol: float = 1e-8) -> FittedLearner:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise SpecError("logistic regression needs a 0/1 response")
    beta, ok, _ = irls(X, y, max_iter=max_iter, tol=tol)
    spec = LearnerSpec("logistic", family="binary")
    return FittedLearner(spec, n=X.shape[0], n_columns=X.shape[1], converged=ok, coef=beta)


# ---------------------------------------------------------------------------
# stepwise selection


def gaussian_aic(rss: float, n: int, k: int, scale: float) -> float:
    # floor keeps an exact fit from rewarding further (numerically spurious) additions
    sigma2 = max(rss / n, 1e-12 * scale)
    return n * np.log(sigma2) + 2 * k


def _aic_continuous(X, y, cols, scale):
    D = np.column_stack([np.ones(len(y))] + [X[:, c] for c in cols]) if cols else np.ones((len(y), 1))
    coef, _ = _lstsq(D, y)
    r = y - D @ coef
    return gaussian_aic(float(r @ r), len(y), D.shape[1], scale), coef


def _aic_binary(X, y, cols, beta0):
    D = np.column_stack([np.ones(len(y))] + [X[:, c] for c in cols]) if cols else np.ones((len(y), 1))
    beta, _, ll = irls(D, y, beta=beta0, max_iter=25, tol=1e-6)
    return -2.0 * ll + 2 * D.shape[1], beta


def fit_stepwise(X, y, family: str = "continuous", criterion: str = "AIC") -> FittedLearner:
    """Forward-backward selection over the columns of ``X`` by AIC.

    Starts from the intercept-only model. Each step applies the single add or
    drop that lowers AIC the most (ties go to the lowest column index) and the
    search stops when no move lowers it. The intercept is always kept.
    """
    if criterion != "AIC":
        raise SpecError("only AIC is supported")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    binary = family == "binary"
    scale = max(float(np.var(y)), 1e-300)

    def score(cols, warm):
        if binary:
            return _aic_binary(X, y, cols, warm)
        return _aic_continuous(X, y, cols, scale)

    current: list[int] = []
    aic, coef = score(current, None)
    for _ in range(4 * p + 10):
        best = None
        for j in range(p):
            if j in current:
                cols = [c for c in current if c != j]
                warm = np.delete(coef, 1 + current.index(j)) if binary else None
            else:
                cols = sorted(current + [j])
                warm = None
                if binary:
                    pos = cols.index(j)
                    warm = np.insert(coef, 1 + pos, 0.0)
            cand_aic, cand_coef = score(cols, warm)
            if best is None or cand_aic < best[0] - 1e-12:
                best = (cand_aic, cols, cand_coef)
        if best is None or best[0] >= aic - 1e-10:
            break
        aic, current, coef = best
    D = np.column_stack([np.ones(n)] + [X[:, c] for c in current]) if current else np.ones((n, 1))
    if binary:
        coef, ok, _ = irls(D, y, beta=coef)
    else:
        coef, ok = _lstsq(D, y)
    spec = LearnerSpec("stepwise", family=family)
    return FittedLearner(spec, n=n, n_columns=p, converged=ok, coef=coef,
                         selected=tuple(current))


# ---------------------------------------------------------------------------
# additive truncated-power splines


def fit_spline_basis(X, y, knots_per_covariate: int = 3, family: str = "continuous",
                     knots=None, pairs=None) -> FittedLearner:
    """Additive regression on ``{1, x_j, (x_j - k_jl)_+}`` with knots at quantiles.

    ``knots`` may give explicit interior knots per column. ``pairs`` appends
    linear product terms (used for the second-order variant).
    """
    if knots_per_covariate < 1:
        raise SpecError("knots_per_covariate must be >= 1")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if knots is None:
        knots = tuple(tuple(spline_knots(X[:, j], knots_per_covariate)) for j in range(X.shape[1]))
    else:
        knots = tuple(tuple(np.atleast_1d(k)) for k in knots)
    spec = LearnerSpec("spline_basis", family=family, knots=knots_per_covariate)
    shell = FittedLearner(spec, n=X.shape[0], n_columns=X.shape[1], intercept=True,
                          knots=knots, pairs=pairs or None)
    D = _features(shell, X)
    if family == "binary":
        coef, ok, _ = irls(D, y)
    else:
        coef, ok = _lstsq(D, y)
    return replace(shell, coef=coef, converged=ok)


# ---------------------------------------------------------------------------
# nearest neighbours


def fit_nearest_neighbor(X, y, k: int, family: str = "continuous") -> FittedLearner:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not 1 <= k <= X.shape[0]:
        raise SpecError(f"k must lie in [1, n]; got k={k}, n={X.shape[0]}")
    spec = LearnerSpec("nearest_neighbor", family=family, k=k)
    return FittedLearner(spec, n=X.shape[0], n_columns=X.shape[1],
                         train_x=X.copy(), train_y=y.copy())


def nearest_indices(train: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest training rows per query row; distance ties go to the lower index."""
    n, p = train.shape
    out = np.empty((query.shape[0], k), dtype=np.intp)
    chunk = max(1, int(2e7 // max(n * max(p, 1), 1)))
    for s in range(0, query.shape[0], chunk):
        q = query[s:s + chunk]
        d = ((q[:, None, :] - train[None, :, :]) ** 2).sum(axis=2)
        if k == n:
            idx = np.argsort(d, axis=1, kind="stable")
        else:
            idx = np.argpartition(d, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(d, idx, axis=1).max(axis=1)
            tied = (d <= kth[:, None]).sum(axis=1) > k
            for r in np.flatnonzero(tied):
                idx[r] = np.argsort(d[r], kind="stable")[:k]
        out[s:s + chunk] = idx[:, :k]
    return out


# ---------------------------------------------------------------------------
# entry points


def fit_learner(spec: LearnerSpec, X, y) -> FittedLearner:
    """Fit ``spec`` on raw features ``X`` (no intercept column)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise SpecError("X must be a matrix with one row per response")
    pairs = second_order_pairs(X) if spec.expansion == "main_plus_second_order" else None
    if spec.kind == "nearest_neighbor":
        fit = fit_nearest_neighbor(X, y, min(spec.k, X.shape[0]), spec.family)
        return replace(fit, spec=spec)
    if spec.kind == "spline_basis":
        fit = fit_spline_basis(X, y, spec.knots, spec.family, pairs=pairs)
        return replace(fit, spec=spec)
    shell = FittedLearner(spec, n=X.shape[0], n_columns=X.shape[1], pairs=pairs)
    D = _features(shell, X)
    if spec.kind == "stepwise":
        fit = fit_stepwise(D, y, spec.family)
        return replace(fit, spec=spec, n_columns=X.shape[1], pairs=pairs)
    D = np.hstack([np.ones((X.shape[0], 1)), D])
    if spec.kind == "logistic":
        beta, ok, _ = irls(D, y)
        return replace(shell, coef=beta, converged=ok, intercept=True)
    fit = fit_least_squares(D, y, spec.ridge_lambda, spec.family)
    return replace(shell, coef=fit.coef, converged=fit.converged, intercept=True)


def predict(f: FittedLearner, X_new, clip: bool = True) -> np.ndarray:
    """Predictions of a fitted learner; binary-family output is clipped to [0.001, 0.999]."""
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim != 2 or X_new.shape[1] != f.n_columns:
        raise SpecError(f"expected {f.n_columns} columns, got {X_new.shape[-1] if X_new.ndim else 0}")
    kind = f.spec.kind
    if kind == "nearest_neighbor":
        idx = nearest_indices(f.train_x, X_new, f.spec.k if f.spec.k <= f.n else f.n)
        out = f.train_y[idx].mean(axis=1)
    elif kind == "stepwise":
        D = _features(f, X_new)
        D = np.column_stack([np.ones(X_new.shape[0])] + [D[:, c] for c in f.selected])
        out = D @ f.coef
        if f.spec.family == "binary":
            out = expit(out)
    else:
        out = _features(f, X_new) @ f.coef
        if kind == "logistic" or (f.spec.family == "binary" and kind == "spline_basis"):
            out = expit(out)
    if clip and f.spec.family == "binary":
        out = np.clip(out, *PROB_CLIP)
    return out
