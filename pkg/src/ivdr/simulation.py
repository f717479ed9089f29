"""Factorial Monte Carlo study of the five estimators.

Data come from a two-sided non-adherence trial: five standard-normal
baseline covariates (w1..w4 and the modifier v), an unobserved normal
confounder, ``Z ~ Bernoulli(0.6)``, a logistic exposure model and a normal
outcome. Three flags switch the exposure, baseline-outcome and effect
models from their simple main-terms form to a misspecified one. The true
working-model parameters are (0.5, 0.5) in every scenario.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import Dataset
from .errors import ConfigError, IVDRError
from .estimators import (
    DEFAULT_VARIANCE, METHODS, EffectEstimate, estimate, estimate_iv_g, estimate_iv_tmle,
    estimate_tsls,
)
from .inference import CiConfig, VARIANCE_MODES, bootstrap_ci
from .nuisance import build_nuisance, default_sl_configs, predictions

log = logging.getLogger(__name__)

PSI_TRUE = (0.5, 0.5)
COVARIATES = ("w1", "w2", "w3", "w4", "v")
MODIFIER = "v"
THREADS_ENV = "IVDR_THREADS"


@dataclass(frozen=True)
class DgpCoefficients:
    p_z: float = 0.6
    a_z: float = 1.5
    a_v: float = 0.03
    a_w: float = 0.01
    a_zw1_misspec: float = 5.0
    a_u_misspec: float = 0.03
    my_c: float = 0.5
    my_v: float = 0.5
    my_w: float = 0.01
    my_exp: tuple = (0.05, 0.05, 0.001, -0.2)
    m_c: float = 0.5
    m_v: float = 0.5
    m_w_misspec: float = 3.0


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 500
    reps: int = 200
    seed: int = 1
    misspec_a: bool = False
    misspec_y: bool = False
    misspec_m: bool = False
    methods: tuple = METHODS
    level: float = 0.95
    bootstrap_B: int = 499
    # per-method variance mode; methods not listed use their default
    variance: tuple = ()
    sl_folds: int = 10
    dgp: DgpCoefficients = DgpCoefficients()

    def __post_init__(self):
        if self.n < 50:
            raise ConfigError("n must be at least 50")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown method(s): {', '.join(bad) or '(none given)'}")
        for m, mode in self.variance:
            if m not in METHODS or mode not in VARIANCE_MODES:
                raise ConfigError(f"bad variance override {m}:{mode}")
        CiConfig(level=self.level, bootstrap_B=self.bootstrap_B)

    def variance_mode(self, method: str) -> str:
        return dict(self.variance).get(method, DEFAULT_VARIANCE[method])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["variance"] = [list(p) for p in self.variance]
        d["dgp"]["my_exp"] = list(self.dgp.my_exp)
        return d


@dataclass(frozen=True)
class TruthRecord:
    psi_true: tuple = PSI_TRUE
    coefficients: dict = field(default_factory=dict)


def replicate_seed(master: int, rep: int, stream: int = 0) -> int:
    """Stable per-replicate seed; independent of execution order."""
    return int(np.random.SeedSequence([master, rep, stream]).generate_state(1)[0])


def simulate_arrays(cfg: ScenarioConfig, seed: int) -> dict:
    """Draw one replicate, including the unobserved confounder and the true curves."""
    c = cfg.dgp
    rng = np.random.default_rng(seed)
    n = cfg.n
    w = rng.standard_normal((n, 4))
    v = rng.standard_normal(n)
    u = rng.standard_normal(n)
    z = (rng.random(n) < c.p_z).astype(float)
    wsum = w.sum(axis=1)
    logit_a = c.a_z * z + c.a_v * v + c.a_w * wsum
    if cfg.misspec_a:
        logit_a = logit_a - (c.a_zw1_misspec * z * w[:, 0] + c.a_u_misspec * u)
    a = (rng.random(n) < expit(logit_a)).astype(float)
    if cfg.misspec_y:
        e0, ev, ew, evw = c.my_exp
        my = np.exp(e0 + ev * v + ew * wsum + evw * v * wsum)
    else:
        my = c.my_c + c.my_v * v + c.my_w * wsum
    m = c.m_c + c.m_v * v + (c.m_w_misspec * wsum if cfg.misspec_m else 0.0)
    y = my + m * a + u + rng.standard_normal(n)
    return {"w": np.column_stack([w, v]), "z": z, "a": a, "y": y, "u": u, "my": my, "m": m}


def generate_dataset(cfg: ScenarioConfig, seed: int) -> tuple[Dataset, TruthRecord]:
    arr = simulate_arrays(cfg, seed)
    # the confounder stays behind: only W, Z, A, Y reach the Dataset
    ds = Dataset(arr["w"], arr["z"], arr["a"], arr["y"], COVARIATES, COVARIATES.index(MODIFIER))
    return ds, TruthRecord(PSI_TRUE, asdict(cfg.dgp))


# ---------------------------------------------------------------------------
# replicate execution


def _row(rep: int, method: str, est: EffectEstimate | None, error: str = "") -> dict:
    if est is None:
        return {"replicate": rep, "method": method, "ok": False, "error": error}
    d = est.diagnostics
    return {
        "replicate": rep, "method": method, "ok": bool(np.isfinite(est.psi).all()), "error": error,
        "psi_c": est.psi_c, "psi_v": est.psi_v, "se_c": est.se_c, "se_v": est.se_v,
        "ci_c_lo": est.ci_c[0], "ci_c_hi": est.ci_c[1],
        "ci_v_lo": est.ci_v[0], "ci_v_hi": est.ci_v[1],
        "variance_mode": est.variance_mode,
        "zeta_floor_count": d.get("zeta_floor_count", 0),
        "m_floor_count": d.get("m_denominator_floor_count", 0),
        "boot_failed_draws": d.get("bootstrap_failed_draws", 0),
    }


def _joint_parametric_statistic(fams):
    def stat(ds):
        nuis = build_nuisance(ds, "parametric", roles=("ma", "g", "mu") if "tmle" in fams else ("ma", "g"))
        p = predictions(ds, nuis)
        out = []
        for fam in fams:
            est = estimate_iv_g(ds, p) if fam == "ivg" else estimate_iv_tmle(ds, p)
            out.extend(est.psi)
        return np.array(out)
    return stat


def run_replicate(cfg: ScenarioConfig, rep: int) -> list[dict]:
    ds, _ = generate_dataset(cfg, replicate_seed(cfg.seed, rep, 0))
    ci_boot = CiConfig(cfg.level, cfg.bootstrap_B, replicate_seed(cfg.seed, rep, 1))
    sl = default_sl_configs(cfg.sl_folds, replicate_seed(cfg.seed, rep, 2) % (2 ** 31))
    rows = {}

    def attempt(method, fn):
        try:
            rows[method] = _row(rep, method, fn())
        except (IVDRError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.debug("replicate %d method %s failed: %s", rep, method, exc)
            rows[method] = _row(rep, method, None, type(exc).__name__)

    def with_ci(est, mode):
        from .inference import normal_ci
        est.set_inference(est.se, normal_ci(est.psi, est.se, cfg.level), mode)
        return est

    # methods sharing nuisance fits are grouped; non-default inference goes the generic route
    shared = {"parametric": [], "ensemble": []}
    for method in cfg.methods:
        mode = cfg.variance_mode(method)
        if method == "tsls" and mode == "if_plugin":
            attempt(method, lambda: with_ci(estimate_tsls(ds), mode))
        elif method in ("ivg", "tmle") and mode in ("bootstrap", "if_plugin"):
            shared["parametric"].append(method)
        elif method in ("ivg_sl", "tmle_sl") and mode == "if_plugin":
            shared["ensemble"].append(method)
        else:
            ci = CiConfig(cfg.level, cfg.bootstrap_B, replicate_seed(cfg.seed, rep, 1), mode)
            attempt(method, lambda m=method, c=ci: estimate(ds, m, c, sl))

    for kind, methods in shared.items():
        if not methods:
            continue
        fams = [m.split("_")[0] for m in methods]
        roles = ("ma", "g", "mu") if "tmle" in fams else ("ma", "g")
        try:
            nuis = build_nuisance(ds, kind, sl, roles=roles)
            p = predictions(ds, nuis)
        except (IVDRError, np.linalg.LinAlgError) as exc:
            for m in methods:
                rows[m] = _row(rep, m, None, type(exc).__name__)
            continue
        ests = {}
        for m, fam in zip(methods, fams):
            fn = estimate_iv_g if fam == "ivg" else estimate_iv_tmle
            attempt(m, lambda fn=fn, m=m: with_ci(fn(ds, p, level=cfg.level, method=m), "if_plugin"))
            ests[m] = rows[m]
        boot_methods = [m for m in methods if cfg.variance_mode(m) == "bootstrap"
                        and rows[m]["ok"]]
        if boot_methods:
            boot_fams = [m.split("_")[0] for m in boot_methods]
            try:
                boot = bootstrap_ci(ds, _joint_parametric_statistic(boot_fams), ci_boot)
            except IVDRError as exc:
                for m in boot_methods:
                    rows[m] = _row(rep, m, None, type(exc).__name__)
                continue
            for j, m in enumerate(boot_methods):
                r = rows[m]
                r["se_c"], r["se_v"] = boot.se[2 * j], boot.se[2 * j + 1]
                r["ci_c_lo"], r["ci_c_hi"] = boot.ci[2 * j]
                r["ci_v_lo"], r["ci_v_hi"] = boot.ci[2 * j + 1]
                r["variance_mode"] = "bootstrap"
                r["boot_failed_draws"] = boot.failed_draws
    return [rows[m] for m in cfg.methods]


def _run_chunk(args):
    cfg, reps = args
    out = []
    for rep in reps:
        out.extend(run_replicate(cfg, rep))
    return out


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        k = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer >= 1") from None
    if k < 1:
        raise ConfigError(f"{THREADS_ENV} must be an integer >= 1")
    return k


RESULT_COLUMNS = [
    "replicate", "method", "ok", "error", "psi_c", "psi_v", "se_c", "se_v",
    "ci_c_lo", "ci_c_hi", "ci_v_lo", "ci_v_hi", "variance_mode",
    "zeta_floor_count", "m_floor_count", "boot_failed_draws",
]


def run_scenario(cfg: ScenarioConfig, workers: int | None = None, reps=None) -> pd.DataFrame:
    """Replicate-level results, one row per (replicate, method), sorted by that key."""
    reps = list(range(cfg.reps)) if reps is None else list(reps)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(reps) <= 1:
        rows = _run_chunk((cfg, reps))
    else:
        chunks = [(cfg, reps[i::workers]) for i in range(workers)]
        rows = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_run_chunk, chunks):
                rows.extend(part)
    df = pd.DataFrame(rows).reindex(columns=RESULT_COLUMNS)
    order = {m: i for i, m in enumerate(cfg.methods)}
    df["_m"] = df["method"].map(order)
    df = df.sort_values(["replicate", "_m"]).drop(columns="_m").reset_index(drop=True)
    df["ok"] = df["ok"].astype(bool)
    return df


# ---------------------------------------------------------------------------
# summaries


SUMMARY_COLUMNS = [
    "method", "parameter", "n_ok", "n_failed", "mean_estimate", "mean_bias", "mc_error",
    "coverage", "rmse", "sd", "mean_se", "zeta_floor_mean", "boot_failed_draws",
]


def summarize(results: pd.DataFrame, truth=PSI_TRUE) -> pd.DataFrame:
    """Bias, Monte Carlo error, CI coverage and RMSE per method and parameter.

    Failed replicates are excluded and counted; a method without any
    successful replicate gets NaN metrics rather than zeros.
    """
    truth = dict(zip(("c", "v"), truth))
    out = []
    for method, grp in results.groupby("method", sort=False):
        ok = grp[grp["ok"].astype(bool)]
        for par in ("c", "v"):
            row = {"method": method, "parameter": f"psi_{par}", "n_ok": len(ok),
                   "n_failed": len(grp) - len(ok)}
            if len(ok):
                est = ok[f"psi_{par}"].to_numpy(dtype=float)
                err = est - truth[par]
                lo = ok[f"ci_{par}_lo"].to_numpy(dtype=float)
                hi = ok[f"ci_{par}_hi"].to_numpy(dtype=float)
                sd = float(est.std(ddof=1)) if len(est) > 1 else 0.0
                row.update(
                    mean_estimate=float(est.mean()),
                    mean_bias=float(err.mean()),
                    mc_error=sd / np.sqrt(len(est)),
                    coverage=float(np.mean((lo <= truth[par]) & (truth[par] <= hi))),
                    rmse=float(np.sqrt(np.mean(err ** 2))),
                    sd=sd,
                    mean_se=float(np.nanmean(ok[f"se_{par}"].to_numpy(dtype=float))),
                    zeta_floor_mean=float(ok["zeta_floor_count"].fillna(0).mean()),
                    boot_failed_draws=int(ok["boot_failed_draws"].fillna(0).sum()),
                )
            out.append(row)
    return pd.DataFrame(out).reindex(columns=SUMMARY_COLUMNS)
