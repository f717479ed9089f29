"""Estimators of (psi_c, psi_v) in the effect curve ``m(W) = psi_c + psi_v V``.

* :func:`estimate_tsls`: two-stage least squares with two first-stage
  equations (for A and A*V).
* :func:`estimate_iv_g`: the locally efficient g-estimator; the baseline
  outcome model and the effect are solved jointly from one linear system.
* :func:`estimate_iv_tmle`: linear-fluctuation TMLE, projected onto the
  working model by least squares.

:func:`estimate` wires any of the five method variants to nuisance fitting
and to its default inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import (
    Dataset, design_matrix, outcome_my_spec, tsls_first_stage_spec,
)
from .errors import ConfigError, DegenerateDesign, TmleDegenerate
from .inference import (
    CiConfig, InfluenceMatrix, bootstrap_ci, cv_if_variance, effect_design, iv_g_influence,
    normal_ci, tmle_eif,
)
from .nuisance import (
    ModifierMoments, NuisanceFits, NuisancePredictions, build_nuisance, clever_covariate,
    initial_m_hat, predictions,
)

METHODS = ("tsls", "ivg", "ivg_sl", "tmle", "tmle_sl")
DEFAULT_VARIANCE = {
    "tsls": "if_plugin",
    "ivg": "bootstrap",
    "tmle": "bootstrap",
    "ivg_sl": "if_plugin",
    "tmle_sl": "if_plugin",
}
COND_LIMIT = 1e12


@dataclass(eq=False)
class EffectEstimate:
    method: str
    psi_c: float
    psi_v: float
    se_c: float = float("nan")
    se_v: float = float("nan")
    ci_c: tuple = (float("nan"), float("nan"))
    ci_v: tuple = (float("nan"), float("nan"))
    variance_mode: str = "if_plugin"
    diagnostics: dict = field(default_factory=dict)
    influence: InfluenceMatrix | None = field(default=None, repr=False)

    @property
    def psi(self) -> np.ndarray:
        return np.array([self.psi_c, self.psi_v])

    @property
    def se(self) -> np.ndarray:
        return np.array([self.se_c, self.se_v])

    def set_inference(self, se, ci, mode: str) -> None:
        self.se_c, self.se_v = (float(s) for s in se)
        self.ci_c = (float(ci[0][0]), float(ci[0][1]))
        self.ci_v = (float(ci[1][0]), float(ci[1][1]))
        self.variance_mode = mode


def _nonzero_columns(X: np.ndarray) -> np.ndarray:
    return np.any(X != 0.0, axis=0)


# ---------------------------------------------------------------------------
# TSLS


def _partial_f(X, y, drop):
    n, k = X.shape
    full, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    rss_u = float(np.sum((y - X @ full) ** 2))
    keep = [j for j in range(k) if j not in drop]
    Xr = X[:, keep]
    red, _, _, _ = np.linalg.lstsq(Xr, y, rcond=None)
    rss_r = float(np.sum((y - Xr @ red) ** 2))
    q = len(drop)
    if rss_u <= 0 or n <= k:
        return float("inf")
    return ((rss_r - rss_u) / q) / (rss_u / (n - k))


def _tsls_stages(ds: Dataset):
    X1 = design_matrix(ds, tsls_first_stage_spec(ds))
    endog = np.column_stack([ds.a, ds.a * ds.v])
    coef1, _, _, _ = np.linalg.lstsq(X1, endog, rcond=None)
    Xexo = design_matrix(ds, outcome_my_spec(ds))
    Xhat = np.hstack([Xexo, X1 @ coef1])
    Xact = np.hstack([Xexo, endog])
    keep = _nonzero_columns(Xhat)
    beta, _, rank, _ = np.linalg.lstsq(Xhat[:, keep], ds.y, rcond=None)
    full = np.zeros(Xhat.shape[1])
    full[keep] = beta
    return X1, coef1, Xhat, Xact, keep, full, rank


def estimate_tsls(ds: Dataset, level: float = 0.95) -> EffectEstimate:
    """Two-stage least squares.

    First stage: A and A*V each regressed on (1, Z, Z*V, V, other W).
    Second stage: Y on (1, W, fitted A, fitted A*V). Standard errors are
    the heteroskedasticity-robust sandwich with residuals formed from the
    observed (not fitted) exposure terms, which is the stacked two-stage
    moment sandwich for this just-identified system.
    """
    X1, coef1, Xhat, Xact, keep, full, rank = _tsls_stages(ds)
    p = Xhat.shape[1]
    psi = full[-2:]
    u = ds.y - Xact @ full
    Xk = Xhat[:, keep]
    bread = np.linalg.pinv(Xk.T @ Xk)
    meat = (Xk * (u ** 2)[:, None]).T @ Xk
    cov_k = bread @ meat @ bread
    cov = np.full((p, p), np.nan)
    cov[np.ix_(keep, keep)] = cov_k
    se = np.sqrt(np.diag(cov)[-2:])
    weak = rank < int(keep.sum())
    # partial F of the excluded instruments (Z, Z*V: columns 1 and 2 of the first stage)
    X1_keep = _nonzero_columns(X1)
    drop = [int(X1_keep[:j].sum()) for j in (1, 2) if X1_keep[j]]
    X1k = X1[:, X1_keep]
    first_f = [_partial_f(X1k, col, drop) for col in (ds.a, ds.a * ds.v)] if drop else [0.0, 0.0]
    # Influence rows, also used by the cross-validated variance.
    H = np.zeros((ds.n, p))
    H[:, keep] = (Xk * u[:, None]) @ (bread * ds.n).T
    est = EffectEstimate(
        "tsls", float(psi[0]), float(psi[1]),
        diagnostics={
            "first_stage_F": first_f,
            "weak_instrument": bool(weak),
            "unidentified": [name for name, k in zip(("psi_c", "psi_v"), keep[-2:]) if not k],
        },
        influence=InfluenceMatrix(H[:, -2:], "tsls"),
    )
    est.set_inference(se, normal_ci(psi, se, level), "if_plugin")
    return est


# ---------------------------------------------------------------------------
# g-estimation


def _iv_g_system(ds: Dataset, preds: NuisancePredictions):
    """Index rows ``(X_my, (1, V) K)`` against regressors ``(X_my, (1, V) A)``."""
    Xy = design_matrix(ds, outcome_my_spec(ds))
    E = effect_design(ds.v)
    U = np.hstack([Xy, E * preds.K[:, None]])
    R = np.hstack([Xy, E * ds.a[:, None]])
    return U, R


def solve_iv_g(ds: Dataset, preds: NuisancePredictions):
    """Solve the stacked estimating equations; returns ``(beta, psi, residual_norm)``.

    Identically zero index rows and regressor columns (e.g. a modifier that is
    constant zero) are removed first and their coefficients reported as zero.
    """
    U, R = _iv_g_system(ds, preds)
    ku, kr = _nonzero_columns(U), _nonzero_columns(R)
    Uk, Rk = U[:, ku], R[:, kr]
    if Uk.shape[1] != Rk.shape[1]:
        raise DegenerateDesign("estimating equations and unknowns do not match after "
                               "removing all-zero columns")
    M = Uk.T @ Rk
    if np.linalg.cond(M) > COND_LIMIT:
        raise DegenerateDesign(f"stacked g-estimation system is singular (cond={np.linalg.cond(M):.3g})")
    theta_k = np.linalg.solve(M, Uk.T @ ds.y)
    theta = np.zeros(R.shape[1])
    theta[kr] = theta_k
    resid = U.T @ (ds.y - R @ theta)
    return theta[:-2], theta[-2:], float(np.linalg.norm(resid))


def estimate_iv_g(ds: Dataset, nuisance: NuisanceFits | NuisancePredictions,
                  level: float = 0.95, method: str | None = None) -> EffectEstimate:
    """Locally efficient g-estimator with unit variance weights.

    The index for the effect rows is ``(1, V) K`` with ``K = ma(Z,W) -
    E_g[ma(Z,W) | W]``; the baseline outcome ``my`` is a main-terms linear
    model whose coefficients are estimated in the same linear system.
    """
    preds = nuisance if isinstance(nuisance, NuisancePredictions) else predictions(ds, nuisance)
    if method is None:
        method = "ivg_sl" if getattr(nuisance, "mode", "parametric") == "ensemble" else "ivg"
    beta, psi, resid_norm = solve_iv_g(ds, preds)
    diagnostics = {"ee_residual_norm": resid_norm, "mean_abs_K": float(np.mean(np.abs(preds.K)))}
    if isinstance(nuisance, NuisanceFits):
        diagnostics.update(nuisance.flags())
    est = EffectEstimate(method, float(psi[0]), float(psi[1]), diagnostics=diagnostics)
    try:
        infl = iv_g_influence(ds, preds, psi, beta)
    except DegenerateDesign as exc:
        diagnostics["influence"] = str(exc)
        return est
    est.influence = infl
    se = infl.se()
    est.set_inference(se, normal_ci(psi, se, level), "if_plugin")
    return est


# ---------------------------------------------------------------------------
# TMLE


def solve_epsilon(ds: Dataset, preds: NuisancePredictions, m_hat, my_hat, h) -> np.ndarray:
    """Fluctuation coefficients from the two linear equations
    ``sum h K (Y - A (m + h'eps) - my) = 0``."""
    K = preds.K
    lhs = (h * (K * ds.a)[:, None]).T @ h
    rhs = h.T @ (K * (ds.y - ds.a * m_hat - my_hat))
    if not np.any(ds.a) or np.linalg.cond(lhs) > COND_LIMIT:
        raise TmleDegenerate("the fluctuation system is singular")
    return np.linalg.solve(lhs, rhs)


@dataclass(frozen=True, eq=False)
class TmleFit:
    psi: np.ndarray
    eps: np.ndarray
    m_hat: np.ndarray
    m_star: np.ndarray
    my_hat: np.ndarray
    moments: ModifierMoments
    m_floor_count: int
    zeta_floor_count: int
    zeta_floored: np.ndarray


def tmle_fit(ds: Dataset, preds: NuisancePredictions) -> TmleFit:
    if preds.mu1 is None:
        raise ConfigError("the TMLE needs an outcome regression (mu)")
    moments = ModifierMoments.of(ds.v)
    m_hat, my_hat, m_floor = initial_m_hat(preds)
    h, _, z_floor = clever_covariate(preds, ds.v, moments)
    eps = solve_epsilon(ds, preds, m_hat, my_hat, h)
    m_star = m_hat + h @ eps
    psi = moments.c(ds.v).T @ m_star / ds.n
    return TmleFit(psi, eps, m_hat, m_star, my_hat, moments, int(m_floor.sum()),
                   int(z_floor.sum()), z_floor)


def estimate_iv_tmle(ds: Dataset, nuisance: NuisanceFits | NuisancePredictions,
                     level: float = 0.95, method: str | None = None) -> EffectEstimate:
    """Linear-fluctuation TMLE projected onto ``psi_c + psi_v V``.

    The initial effect curve is the ratio of fitted outcome and exposure
    contrasts; it is moved along the clever covariate by the coefficients
    that zero the empirical efficient-influence-function equation, and the
    targeted curve is regressed on (1, V).
    """
    preds = nuisance if isinstance(nuisance, NuisancePredictions) else predictions(ds, nuisance)
    if method is None:
        method = "tmle_sl" if getattr(nuisance, "mode", "parametric") == "ensemble" else "tmle"
    fit = tmle_fit(ds, preds)
    infl = tmle_eif(ds, preds, fit.m_star, fit.psi, fit.moments)
    diagnostics = {
        "epsilon": [float(e) for e in fit.eps],
        "zeta_floor_count": fit.zeta_floor_count,
        "m_denominator_floor_count": fit.m_floor_count,
        "eif_mean": [float(x) for x in infl.values.mean(axis=0)],
    }
    if isinstance(nuisance, NuisanceFits):
        diagnostics.update(nuisance.flags())
    est = EffectEstimate(method, float(fit.psi[0]), float(fit.psi[1]),
                         diagnostics=diagnostics, influence=infl)
    se = infl.se()
    est.set_inference(se, normal_ci(fit.psi, se, level), "if_plugin")
    return est


# ---------------------------------------------------------------------------
# method dispatch


def _family(method: str) -> str:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    return method.split("_")[0]


def _mode(method: str) -> str:
    return "ensemble" if method.endswith("_sl") else "parametric"


def _roles(family: str):
    return ("ma", "g") if family == "ivg" else ("ma", "g", "mu")


def point_estimate(ds: Dataset, method: str, sl_configs: dict | None = None,
                   nuisance: NuisanceFits | None = None) -> EffectEstimate:
    """Point estimate with plug-in inference (sandwich for TSLS)."""
    fam = _family(method)
    if fam == "tsls":
        return estimate_tsls(ds)
    if nuisance is None:
        nuisance = build_nuisance(ds, _mode(method), sl_configs, roles=_roles(fam))
    if fam == "ivg":
        return estimate_iv_g(ds, nuisance, method=method)
    return estimate_iv_tmle(ds, nuisance, method=method)


def statistic(method: str, sl_configs: dict | None = None):
    """``ds -> (psi_c, psi_v)`` refitting all nuisances; used by the bootstrap."""
    def stat(ds: Dataset) -> np.ndarray:
        return point_estimate(ds, method, sl_configs).psi
    return stat


def fold_influence(method: str, sl_configs: dict | None = None):
    """``(train, valid) -> influence rows on valid`` with everything fitted on train."""
    fam = _family(method)

    def tsls_rows(train: Dataset, valid: Dataset) -> np.ndarray:
        _, coef1, Xhat, _, keep, full, _ = _tsls_stages(train)
        Xk = Xhat[:, keep]
        bread = np.linalg.pinv(Xk.T @ Xk / train.n)
        X1v = design_matrix(valid, tsls_first_stage_spec(valid))
        Xexo = design_matrix(valid, outcome_my_spec(valid))
        Xhat_v = np.hstack([Xexo, X1v @ coef1])
        Xact_v = np.column_stack([Xexo, valid.a, valid.a * valid.v])
        u = valid.y - Xact_v @ full
        H = np.zeros((valid.n, Xhat.shape[1]))
        H[:, keep] = (Xhat_v[:, keep] * u[:, None]) @ bread.T
        return H[:, -2:]

    def ivg_rows(train: Dataset, valid: Dataset) -> np.ndarray:
        nuis = build_nuisance(train, _mode(method), sl_configs, roles=_roles(fam))
        p_train = predictions(train, nuis)
        beta, psi, _ = solve_iv_g(train, p_train)
        E = effect_design(train.v)
        M = (E * (train.a * p_train.K)[:, None]).T @ E / train.n
        return iv_g_influence(valid, predictions(valid, nuis), psi, beta, M=M).values

    def tmle_rows(train: Dataset, valid: Dataset) -> np.ndarray:
        nuis = build_nuisance(train, _mode(method), sl_configs, roles=_roles(fam))
        fit = tmle_fit(train, predictions(train, nuis))
        p_valid = predictions(valid, nuis)
        h, _, _ = clever_covariate(p_valid, valid.v, fit.moments)
        m_hat, _, _ = initial_m_hat(p_valid)
        m_star = m_hat + h @ fit.eps
        return tmle_eif(valid, p_valid, m_star, fit.psi, fit.moments).values

    return {"tsls": tsls_rows, "ivg": ivg_rows, "tmle": tmle_rows}[fam]


def estimate(ds: Dataset, method: str, ci: CiConfig = CiConfig(),
             sl_configs: dict | None = None) -> EffectEstimate:
    """Estimate ``method`` on ``ds`` with the inference named by ``ci.variance_mode``
    (or the method's default when that is None)."""
    fam = _family(method)
    est = point_estimate(ds, method, sl_configs)
    mode = ci.variance_mode or DEFAULT_VARIANCE[method]
    if mode == "if_plugin":
        if est.influence is not None:
            est.set_inference(est.se, normal_ci(est.psi, est.se, ci.level), mode)
    elif mode == "cv_if":
        cov = cv_if_variance(ds, fold_influence(method, sl_configs), ci.cv_folds, ci.bootstrap_seed)
        se = np.sqrt(np.diag(cov))
        est.set_inference(se, normal_ci(est.psi, se, ci.level), mode)
    else:
        boot = bootstrap_ci(ds, statistic(method, sl_configs), ci)
        est.set_inference(boot.se, boot.ci, mode)
        est.diagnostics.update(bootstrap_failed_draws=boot.failed_draws,
                               bootstrap_lost=boot.lost, bootstrap_unstable=boot.unstable)
    est.diagnostics.setdefault("family", fam)
    return est
