"""Doubly robust instrumental-variable estimation of a linearly modified treatment effect.

Three estimators of ``(psi_c, psi_v)`` in ``m(W) = psi_c + psi_v V``:
two-stage least squares, the locally efficient g-estimator and a
linear-fluctuation TMLE, each with parametric or Super Learner nuisance
fits, plus a Monte Carlo harness for comparing them.
"""

from .data import Dataset, ModelSpec, read_csv, validate_dataset
from .errors import (
    BootstrapUnstable, ConfigError, DegenerateDesign, DegenerateModifier, InvalidTreatmentCoding,
    IVDRError, MissingData, SpecError, TmleDegenerate,
)
from .estimators import (
    METHODS, EffectEstimate, estimate, estimate_iv_g, estimate_iv_tmle, estimate_tsls,
)
from .inference import CiConfig
from .nuisance import build_nuisance
from .simulation import ScenarioConfig, generate_dataset, run_scenario, summarize

__all__ = [
    "BootstrapUnstable", "CiConfig", "ConfigError", "Dataset", "DegenerateDesign",
    "DegenerateModifier", "EffectEstimate", "IVDRError", "InvalidTreatmentCoding", "METHODS",
    "MissingData", "ModelSpec", "ScenarioConfig", "SpecError", "TmleDegenerate", "build_nuisance",
    "estimate", "estimate_iv_g", "estimate_iv_tmle", "estimate_tsls", "generate_dataset",
    "read_csv", "run_scenario", "summarize", "validate_dataset",
]
