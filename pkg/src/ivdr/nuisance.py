"""Nuisance regressions and the per-row quantities derived from them.

Four regressions enter the estimators: the exposure mean ``ma(Z, W)``,
the instrument propensity ``g(W) = P(Z = 1 | W)``, the outcome mean
``mu(Z, W)`` and (for the g-estimator, jointly with the effect) the
baseline outcome ``my(W)``. Each is fitted either by a main-terms
parametric model or by a Super Learner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    Dataset, ModelSpec, design_matrix, exposure_spec, instrument_spec, outcome_mu_spec,
)
from .errors import ConfigError, DegenerateModifier
from .learners import fit_least_squares, fit_logistic
from .superlearner import (
    SuperLearnerConfig, binary_library, continuous_library, fit_super_learner,
)

M_HAT_DENOM_FLOOR = 0.01
ZETA2_FLOOR = 0.025

NUISANCE_ROLES = ("ma", "g", "mu")
_SPEC_ROLE = {"ma": "exposure_ma", "g": "instrument_g", "mu": "outcome_mu"}


@dataclass(frozen=True, eq=False)
class NuisanceModel:
    """A fitted regression plus the recipe for building its inputs from a Dataset."""

    role: str
    mode: str
    fit: object
    spec: ModelSpec | None = None
    uses_z: bool = True

    def features(self, ds: Dataset, z: int | None = None) -> np.ndarray:
        if self.spec is not None:
            return design_matrix(ds, self.spec, z)
        if not self.uses_z:
            return ds.w
        zc = ds.z if z is None else np.full(ds.n, float(z))
        return np.column_stack([zc, ds.w])

    def predict(self, ds: Dataset, z: int | None = None) -> np.ndarray:
        return self.fit.predict(self.features(ds, z))

    @property
    def converged(self) -> bool:
        return bool(self.fit.converged)


@dataclass(frozen=True, eq=False)
class NuisanceFits:
    ma: NuisanceModel
    g: NuisanceModel
    mu: NuisanceModel | None = None
    my: NuisanceModel | None = None

    @property
    def mode(self) -> str:
        return self.ma.mode

    def flags(self) -> dict:
        return {f"{m.role}_converged": m.converged
                for m in (self.ma, self.g, self.mu, self.my) if m is not None}


@dataclass(frozen=True, eq=False)
class NuisancePredictions:
    """Nuisance predictions at the observed and both counterfactual instrument values."""

    ma1: np.ndarray
    ma0: np.ndarray
    g: np.ndarray
    z: np.ndarray
    mu1: np.ndarray | None = None
    mu0: np.ndarray | None = None

    @property
    def ma_obs(self) -> np.ndarray:
        return np.where(self.z == 1, self.ma1, self.ma0)

    @property
    def ma_mean(self) -> np.ndarray:
        """E_g[ma(Z, W) | W] in closed form for binary Z."""
        return self.g * self.ma1 + (1.0 - self.g) * self.ma0

    @property
    def K(self) -> np.ndarray:
        return self.ma_obs - self.ma_mean


def predictions(ds: Dataset, nuisance: NuisanceFits) -> NuisancePredictions:
    mu1 = mu0 = None
    if nuisance.mu is not None:
        mu1, mu0 = nuisance.mu.predict(ds, 1), nuisance.mu.predict(ds, 0)
    return NuisancePredictions(
        ma1=nuisance.ma.predict(ds, 1), ma0=nuisance.ma.predict(ds, 0),
        g=nuisance.g.predict(ds), z=ds.z, mu1=mu1, mu0=mu0,
    )


def default_sl_configs(folds: int = 10, seed: int = 0) -> dict:
    return {
        "ma": SuperLearnerConfig(binary_library(), folds, seed),
        "g": SuperLearnerConfig(binary_library(), folds, seed + 1),
        "mu": SuperLearnerConfig(continuous_library(), folds, seed + 2),
    }


def _parametric(ds: Dataset, role: str, spec: ModelSpec | None) -> NuisanceModel:
    if spec is None:
        spec = {"ma": exposure_spec, "g": instrument_spec, "mu": outcome_mu_spec}[role](ds)
    elif spec.role != _SPEC_ROLE[role]:
        raise ConfigError(f"spec role {spec.role!r} does not fit nuisance {role!r}")
    X = design_matrix(ds, spec)
    if role == "ma":
        fit = fit_logistic(X, ds.a)
    elif role == "g":
        fit = fit_logistic(X, ds.z)
    else:
        fit = fit_least_squares(X, ds.y)
    return NuisanceModel(role, "parametric", fit, spec=spec)


def _ensemble(ds: Dataset, role: str, config: SuperLearnerConfig) -> NuisanceModel:
    uses_z = role != "g"
    X = np.column_stack([ds.z, ds.w]) if uses_z else ds.w
    target = {"ma": ds.a, "g": ds.z, "mu": ds.y}[role]
    return NuisanceModel(role, "ensemble", fit_super_learner(X, target, config), uses_z=uses_z)


def build_nuisance(ds: Dataset, mode: str = "parametric", sl_configs: dict | None = None,
                   roles=NUISANCE_ROLES, specs: dict | None = None, seed: int = 0) -> NuisanceFits:
    """Fit the nuisance regressions named in ``roles``.

    Parametric mode: logistic main-terms models for ``ma`` (on Z, W) and ``g``
    (on W), least squares for ``mu`` on (Z, W, Z*V). ``specs`` overrides any of
    these designs. Ensemble mode: a Super Learner per role, configured by
    ``sl_configs`` (defaults from :func:`default_sl_configs`).
    """
    if mode not in ("parametric", "ensemble"):
        raise ConfigError(f"unknown nuisance mode {mode!r}")
    specs = specs or {}
    configs = default_sl_configs(seed=seed)
    configs.update(sl_configs or {})
    fitted = {}
    for role in roles:
        if role not in NUISANCE_ROLES:
            raise ConfigError(f"unknown nuisance role {role!r}")
        if mode == "parametric":
            fitted[role] = _parametric(ds, role, specs.get(role))
        else:
            fitted[role] = _ensemble(ds, role, configs[role])
    return NuisanceFits(**fitted)


# ---------------------------------------------------------------------------
# quantities shared by the TMLE and its influence function


def initial_m_hat(preds: NuisancePredictions):
    """Initial effect curve from the identification ratio, and the implied baseline outcome.

    ``m = (mu(1,W) - mu(0,W)) / (ma(1,W) - ma(0,W))`` with the denominator
    floored at 0.01 in absolute value (sign kept, zero treated as positive);
    ``my = mu(0,W) - m * ma(0,W)``. Returns ``(m_hat, my_hat, floored)``.
    """
    den = preds.ma1 - preds.ma0
    floored = np.abs(den) < M_HAT_DENOM_FLOOR
    sign = np.where(den < 0, -1.0, 1.0)
    den = np.where(floored, sign * M_HAT_DENOM_FLOOR, den)
    m_hat = (preds.mu1 - preds.mu0) / den
    my_hat = preds.mu0 - m_hat * preds.ma0
    return m_hat, my_hat, floored


@dataclass(frozen=True)
class ModifierMoments:
    mean: float
    second: float

    @property
    def var(self) -> float:
        return self.second - self.mean ** 2

    @classmethod
    def of(cls, v) -> "ModifierMoments":
        v = np.asarray(v, dtype=float)
        mom = cls(float(v.mean()), float(np.mean(v * v)))
        if not mom.var > 1e-12 * max(1.0, mom.second):
            raise DegenerateModifier("the effect modifier has zero sample variance")
        return mom

    def c(self, v) -> np.ndarray:
        """Rows ``Var(V)^-1 (E[V^2] - E[V] V, V - E[V])``, i.e. ``E[XX']^-1 X`` with X = (1, V)."""
        v = np.asarray(v, dtype=float)
        return np.column_stack([self.second - self.mean * v, v - self.mean]) / self.var


def instrument_strength(preds: NuisancePredictions) -> np.ndarray:
    """Raw zeta^2(W) = Var_g(ma(Z,W) | W) = (ma(1,W) - ma(0,W))^2 g(W)(1 - g(W))."""
    return (preds.ma1 - preds.ma0) ** 2 * preds.g * (1.0 - preds.g)


def clever_covariate(preds: NuisancePredictions, v, moments: ModifierMoments | None = None):
    """Fluctuation direction ``h(W) = c(V) / zeta^2(W)`` with zeta^2 floored at 0.025.

    Returns ``(h, zeta2, floored)`` where ``zeta2`` is the floored value and
    ``floored`` marks the rows where the floor was active.
    """
    moments = moments or ModifierMoments.of(v)
    raw = instrument_strength(preds)
    floored = raw < ZETA2_FLOOR
    zeta2 = np.maximum(raw, ZETA2_FLOOR)
    return moments.c(v) / zeta2[:, None], zeta2, floored
