"""V-fold cross-validated convex stacking (Super Learner).

Each library member is fitted on every training split; its held-out
predictions form the columns of a cross-validated prediction matrix. The
ensemble weights minimise the held-out mean squared error over the
probability simplex, and the final prediction is the weighted sum of the
members refitted on the full data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .learners import PROB_CLIP, FittedLearner, LearnerSpec, fit_learner, predict


def binary_library() -> tuple[LearnerSpec, ...]:
    """Default library for 0/1 targets (instrument propensity, exposure mean)."""
    return (
        LearnerSpec("logistic", "binary", expansion="main_plus_second_order", name="glm"),
        LearnerSpec("stepwise", "binary", expansion="main_plus_second_order", name="step"),
        LearnerSpec("nearest_neighbor", "binary", k=25, name="knn"),
        LearnerSpec("spline_basis", "binary", knots=3, name="spline"),
    )


def continuous_library() -> tuple[LearnerSpec, ...]:
    """Default library for the outcome regression; all members are linear smoothers in y."""
    return (
        LearnerSpec("least_squares", expansion="main_plus_second_order", name="glm"),
        LearnerSpec("stepwise", expansion="main_plus_second_order", name="step"),
        LearnerSpec("ridge", ridge_lambda=1.0, expansion="main_plus_second_order", name="ridge"),
        LearnerSpec("nearest_neighbor", k=25, name="knn"),
        LearnerSpec("spline_basis", knots=3, expansion="main_plus_second_order", name="spline"),
    )


@dataclass(frozen=True)
class SuperLearnerConfig:
    library: tuple[LearnerSpec, ...]
    folds: int = 10
    seed: int = 0
    loss: str = "squared_error"

    def __post_init__(self):
        if not self.library:
            raise ConfigError("the learner library is empty")
        if self.folds < 2:
            raise ConfigError("need at least 2 folds")
        if self.loss != "squared_error":
            raise ConfigError(f"unsupported loss {self.loss!r}")

    @property
    def family(self) -> str:
        return self.library[0].family


@dataclass(frozen=True, eq=False)
class SuperLearnerFit:
    config: SuperLearnerConfig
    member_fits: tuple[FittedLearner, ...]
    weights: np.ndarray
    cv_risk: dict
    fold_assignment: np.ndarray = field(repr=False)
    cv_predictions: np.ndarray = field(repr=False)

    @property
    def converged(self) -> bool:
        return all(f.converged for f, w in zip(self.member_fits, self.weights) if w > 0)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0])
        for f, w in zip(self.member_fits, self.weights):
            if w > 0:
                out += w * predict(f, X)
        if self.config.family == "binary":
            out = np.clip(out, *PROB_CLIP)
        return out


def make_folds(n: int, V: int, seed: int) -> np.ndarray:
    """Random partition of ``range(n)`` into V folds whose sizes differ by at most one."""
    if V < 1 or V > n:
        raise ConfigError(f"cannot split {n} rows into {V} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.intp)
    folds[perm] = np.arange(n) % V
    return folds


def cv_prediction_matrix(X, y, library, folds) -> np.ndarray:
    """Held-out predictions: entry (i, l) comes from member l fitted without fold(i)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    folds = np.asarray(folds)
    P = np.empty((X.shape[0], len(library)))
    for k in np.unique(folds):
        valid = folds == k
        train = ~valid
        for l, spec in enumerate(library):
            fit = fit_learner(spec, X[train], y[train])
            P[valid, l] = predict(fit, X[valid])
    return P


def _eq_constrained(G, c, S):
    """Minimise w'Gw - 2c'w over w_S with sum(w_S) = 1 (other weights zero)."""
    m = len(S)
    K = np.zeros((m + 1, m + 1))
    K[:m, :m] = G[np.ix_(S, S)]
    K[:m, m] = 1.0
    K[m, :m] = 1.0
    rhs = np.append(c[S], 1.0)
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:m]


def solve_simplex_weights(P, y, max_iter: int = 200) -> np.ndarray:
    """Weights on the probability simplex minimising ``||y - P w||^2 / n``.

    Active-set method in the style of Lawson-Hanson NNLS, with the sum-to-one
    constraint carried in the equality-constrained subproblem. It starts from
    the single member with the lowest risk.
    """
    P = np.asarray(P, dtype=float)
    y = np.asarray(y, dtype=float)
    n, L = P.shape
    if L == 1:
        return np.ones(1)
    G = P.T @ P / n
    c = P.T @ y / n
    risks = np.mean((y[:, None] - P) ** 2, axis=0)
    w = np.zeros(L)
    w[int(np.argmin(risks))] = 1.0
    S = [int(np.argmin(risks))]
    scale = 1.0 + np.abs(G).max() + np.abs(c).max()
    for _ in range(max_iter):
        grad = G @ w - c
        lam = grad[S].mean()
        outside = [j for j in range(L) if j not in S]
        if not outside:
            break
        j = min(outside, key=lambda i: grad[i])
        if grad[j] >= lam - 1e-13 * scale:
            break
        S = sorted(S + [j])
        for _ in range(L + 1):
            z = _eq_constrained(G, c, S)
            if np.all(z > 1e-14):
                w = np.zeros(L)
                w[S] = z
                break
            ws = w[S]
            neg = z <= 1e-14
            alpha = np.min(ws[neg] / (ws[neg] - z[neg]))
            ws = ws + alpha * (z - ws)
            w = np.zeros(L)
            w[S] = ws
            S = [s for s in S if w[s] > 1e-14]
            w[[i for i in range(L) if i not in S]] = 0.0
    w = np.clip(w, 0.0, None)
    return w / w.sum()


def fit_super_learner(X, y, config: SuperLearnerConfig) -> SuperLearnerFit:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len({s.family for s in config.library}) > 1:
        raise ConfigError("library mixes binary and continuous learners")
    if config.family == "binary" and not np.isin(y, (0.0, 1.0)).all():
        raise ConfigError("a binary-family library needs a 0/1 target")
    folds = make_folds(X.shape[0], config.folds, config.seed)
    P = cv_prediction_matrix(X, y, config.library, folds)
    weights = solve_simplex_weights(P, y)
    risk = {spec.label: float(np.mean((y - P[:, l]) ** 2)) for l, spec in enumerate(config.library)}
    ens = P @ weights
    if config.family == "binary":
        ens = np.clip(ens, *PROB_CLIP)
    risk["ensemble"] = float(np.mean((y - ens) ** 2))
    members = tuple(fit_learner(spec, X, y) for spec in config.library)
    return SuperLearnerFit(config, members, weights, risk, folds, P)
