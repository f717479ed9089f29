"""Variance estimation: influence-function plug-in, cross-validated IF and bootstrap.

The plug-in variances treat the nuisance fits as known; the bootstrap
refits everything on each resample.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import Dataset, design_matrix, outcome_my_spec
from .errors import BootstrapUnstable, ConfigError, DegenerateDesign, IVDRError
from .nuisance import ModifierMoments, NuisancePredictions, clever_covariate, initial_m_hat
from .superlearner import make_folds

VARIANCE_MODES = ("if_plugin", "cv_if", "bootstrap")
RETRY_CAP = 10
UNSTABLE_FRACTION = 0.05


@dataclass(frozen=True)
class CiConfig:
    level: float = 0.95
    bootstrap_B: int = 1999
    bootstrap_seed: int = 0
    # None selects each method's default (sandwich / bootstrap / plug-in IF)
    variance_mode: str | None = None
    cv_folds: int = 10

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.bootstrap_B < 1:
            raise ConfigError("bootstrap_B must be >= 1")
        if self.variance_mode is not None and self.variance_mode not in VARIANCE_MODES:
            raise ConfigError(f"unknown variance mode {self.variance_mode!r}")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")


@dataclass(frozen=True, eq=False)
class InfluenceMatrix:
    values: np.ndarray
    method: str

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def covariance(self) -> np.ndarray:
        """Sample covariance of the rows divided by n (variance of the estimate)."""
        return np.atleast_2d(np.cov(self.values, rowvar=False)) / self.n

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance()))


def normal_ci(psi, se, level: float = 0.95) -> np.ndarray:
    q = norm.ppf(0.5 + level / 2.0)
    psi = np.asarray(psi, dtype=float)
    se = np.asarray(se, dtype=float)
    return np.column_stack([psi - q * se, psi + q * se])


def effect_design(v) -> np.ndarray:
    return np.column_stack([np.ones(len(v)), v])


def iv_g_influence(ds: Dataset, preds: NuisancePredictions, psi, beta, M=None) -> InfluenceMatrix:
    """Per-row influence of the g-estimator, ``M^-1 K (1, V)' (Y - my(W; beta) - A m(W; psi))``.

    ``M`` is the empirical mean of ``A K (1, V)'(1, V)``; pass it explicitly to
    evaluate rows outside the estimation sample. The residual includes the
    ``A m(W; psi)`` term, matching the derivative of the estimating equation.
    """
    E = effect_design(ds.v)
    K = preds.K
    if M is None:
        M = (E * (ds.a * K)[:, None]).T @ E / ds.n
    if np.linalg.cond(M) > 1e12:
        raise DegenerateDesign("the influence-function scaling matrix is singular")
    Xy = design_matrix(ds, outcome_my_spec(ds))
    r = ds.y - Xy @ np.asarray(beta) - ds.a * (E @ np.asarray(psi))
    D = (E * (K * r)[:, None]) @ np.linalg.inv(M).T
    return InfluenceMatrix(D, "ivg")


def tmle_eif(ds: Dataset, preds: NuisancePredictions, m_star, psi_star,
             moments: ModifierMoments | None = None) -> InfluenceMatrix:
    """Efficient influence function of the projection parameter at the targeted fit.

    ``h K (Y - A m* - my) + c (m* - m_psi(V))`` where the first term combines the
    outcome and exposure residual pieces and the second is the covariate part.
    """
    moments = moments or ModifierMoments.of(ds.v)
    h, _, _ = clever_covariate(preds, ds.v, moments)
    _, my_hat, _ = initial_m_hat(preds)
    m_star = np.asarray(m_star, dtype=float)
    r = ds.y - ds.a * m_star - my_hat
    proj = effect_design(ds.v) @ np.asarray(psi_star)
    D = h * (preds.K * r)[:, None] + moments.c(ds.v) * (m_star - proj)[:, None]
    return InfluenceMatrix(D, "tmle")


def cv_if_variance(ds: Dataset, fold_influence, V: int = 10, seed: int = 0) -> np.ndarray:
    """Cross-validated influence-function variance of the estimate.

    ``fold_influence(train, valid)`` fits everything on ``train`` and returns the
    influence rows for ``valid``. Per fold the mean outer product over the
    validation rows is taken; these are averaged over folds and divided by n
    to put the result on the scale of ``Var(psi_hat)``.
    """
    if V < 2:
        raise ConfigError("cross-validated variance needs at least 2 folds")
    folds = make_folds(ds.n, V, seed)
    acc = None
    for k in range(V):
        valid = np.flatnonzero(folds == k)
        train = np.flatnonzero(folds != k)
        try:
            D = np.asarray(fold_influence(ds.take(train), ds.take(valid)), dtype=float)
        except IVDRError as exc:
            raise ConfigError(f"fold {k} is too small to fit the nuisances: {exc}") from exc
        outer = D.T @ D / len(valid)
        acc = outer if acc is None else acc + outer
    return acc / V / ds.n


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    estimates: np.ndarray = field(repr=False)
    se: np.ndarray
    ci: np.ndarray
    failed_draws: int
    lost: int
    unstable: bool


def nearest_rank(sorted_values: np.ndarray, p: float):
    """Nearest-rank percentile: the ceil(p*B)-th order statistic (1-based)."""
    B = sorted_values.shape[0]
    rank = min(max(math.ceil(round(p * B, 10)), 1), B)
    return sorted_values[rank - 1]


def bootstrap_ci(ds: Dataset, statistic, cfg: CiConfig = CiConfig()) -> BootstrapResult:
    """Nonparametric pairs bootstrap with percentile intervals.

    ``statistic(ds)`` returns a vector (e.g. ``(psi_c, psi_v)``). A resample whose
    statistic raises a package error or is non-finite is redrawn, up to 10
    times; after that the replicate is lost. More than 5% failed draws sets
    ``unstable`` and emits :class:`BootstrapUnstable`.
    """
    rng = np.random.default_rng(cfg.bootstrap_seed)
    B = cfg.bootstrap_B
    rows = []
    failed = lost = 0
    for _ in range(B):
        for _attempt in range(RETRY_CAP + 1):
            idx = rng.integers(0, ds.n, ds.n)
            try:
                est = np.asarray(statistic(ds.take(idx)), dtype=float)
            except (IVDRError, np.linalg.LinAlgError, FloatingPointError):
                est = None
            if est is not None and np.all(np.isfinite(est)):
                rows.append(est)
                break
            failed += 1
        else:
            lost += 1
    if not rows:
        raise DegenerateDesign("every bootstrap resample failed")
    est = np.vstack(rows)
    srt = np.sort(est, axis=0)
    alpha = 1.0 - cfg.level
    ci = np.column_stack([nearest_rank(srt, alpha / 2), nearest_rank(srt, 1 - alpha / 2)])
    se = est.std(axis=0, ddof=1) if est.shape[0] > 1 else np.zeros(est.shape[1])
    unstable = failed > UNSTABLE_FRACTION * B
    if unstable:
        warnings.warn(f"{failed} of {B} bootstrap draws failed", BootstrapUnstable, stacklevel=2)
    return BootstrapResult(est, se, ci, failed, lost, unstable)
