"""Observed-data container and design-matrix construction.

A :class:`Dataset` holds one row per subject: baseline covariates ``w``
(one of which is the effect modifier ``v``), the binary instrument ``z``,
the binary exposure ``a`` and a continuous outcome ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import DegenerateDesign, InvalidTreatmentCoding, MissingData, SpecError

RESERVED = ("y", "z", "a")
N_EFFECT_PARAMS = 2

ROLES = ("outcome_my", "exposure_ma", "instrument_g", "outcome_mu", "effect_m")


class Observation(NamedTuple):
    w: np.ndarray
    z: int
    a: int
    y: float


@dataclass(frozen=True, eq=False)
class Dataset:
    w: np.ndarray
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    covariate_names: tuple[str, ...]
    modifier_index: int

    def __post_init__(self):
        for arr in (self.w, self.z, self.a, self.y):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def v(self) -> np.ndarray:
        return self.w[:, self.modifier_index]

    @property
    def modifier_name(self) -> str:
        return self.covariate_names[self.modifier_index]

    def column(self, name: str) -> np.ndarray:
        if name in ("z", "a", "y"):
            return getattr(self, name)
        try:
            return self.w[:, self.covariate_names.index(name)]
        except ValueError:
            raise SpecError(f"unknown column {name!r}") from None

    def rows(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(self.w[i], int(self.z[i]), int(self.a[i]), float(self.y[i]))

    def take(self, idx) -> "Dataset":
        """Row subset (or resample, with repeated indices) preserving covariate layout."""
        idx = np.asarray(idx)
        return Dataset(
            self.w[idx].copy(), self.z[idx].copy(), self.a[idx].copy(), self.y[idx].copy(),
            self.covariate_names, self.modifier_index,
        )

    def with_y(self, y) -> "Dataset":
        return Dataset(self.w, self.z, self.a, np.asarray(y, dtype=float).copy(),
                       self.covariate_names, self.modifier_index)

    def to_frame(self) -> pd.DataFrame:
        out = pd.DataFrame(self.w, columns=list(self.covariate_names))
        out.insert(0, "a", self.a.astype(int))
        out.insert(0, "z", self.z.astype(int))
        out.insert(0, "y", self.y)
        return out


def _binary(col: pd.Series, name: str) -> np.ndarray:
    vals = pd.to_numeric(col, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isin(vals, (0.0, 1.0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InvalidTreatmentCoding(f"column {name!r} must be 0/1; row {i} has {col.iloc[i]!r}")
    return vals


def validate_dataset(raw_table, modifier_name: str) -> Dataset:
    """Check a raw table against the data contract and build a :class:`Dataset`.

    ``raw_table`` is anything :class:`pandas.DataFrame` accepts (a frame, a
    dict of columns, a list of row dicts). Columns ``y``, ``z`` and ``a`` are
    required; every other column is a covariate. Incomplete rows are rejected,
    not dropped.
    """
    df = raw_table if isinstance(raw_table, pd.DataFrame) else pd.DataFrame(raw_table)
    df = df.reset_index(drop=True)
    missing = [c for c in RESERVED if c not in df.columns]
    if missing:
        raise SpecError(f"missing required column(s): {', '.join(missing)}")
    covariates = [str(c) for c in df.columns if c not in RESERVED]
    if not covariates:
        raise SpecError("at least one covariate column is required")
    if modifier_name not in covariates:
        raise SpecError(f"modifier {modifier_name!r} is not a covariate column")

    # missing cells first, so a blank z reports MissingData rather than a coding error
    numeric = {}
    for c in ["y", "z", "a"] + covariates:
        vals = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(vals)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            if c in ("z", "a") and not pd.isna(df[c].iloc[i]):
                raise InvalidTreatmentCoding(f"column {c!r} must be 0/1; row {i} has {df[c].iloc[i]!r}")
            raise MissingData(i, c)
        numeric[c] = vals
    z = _binary(df["z"], "z")
    a = _binary(df["a"], "a")

    if z.all() or not z.any():
        raise DegenerateDesign("both instrument arms must be non-empty")
    if len(df) < 2 * N_EFFECT_PARAMS:
        raise DegenerateDesign(f"need at least {2 * N_EFFECT_PARAMS} rows, got {len(df)}")

    w = np.column_stack([numeric[c] for c in covariates])
    return Dataset(w, z, a, numeric["y"], tuple(covariates), covariates.index(modifier_name))


def read_csv(path, modifier_name: str) -> Dataset:
    return validate_dataset(pd.read_csv(path), modifier_name)


class Term(NamedTuple):
    """One design column.

    kind is ``intercept``, ``main`` (a covariate), ``z``, ``z_x`` (Z times a
    covariate) or ``x_x`` (product of two covariates).
    """

    kind: str
    cols: tuple[str, ...] = ()

    @property
    def involves_z(self) -> bool:
        return self.kind in ("z", "z_x")

    def label(self) -> str:
        if self.kind == "intercept":
            return "(intercept)"
        if self.kind == "z":
            return "z"
        if self.kind == "z_x":
            return "z:" + self.cols[0]
        return ":".join(self.cols)


INTERCEPT = Term("intercept")
Z = Term("z")


def main(name: str) -> Term:
    return Term("main", (name,))


def z_times(name: str) -> Term:
    return Term("z_x", (name,))


def product(a: str, b: str) -> Term:
    return Term("x_x", (a, b))


@dataclass(frozen=True)
class ModelSpec:
    role: str
    terms: tuple[Term, ...]
    fit_mode: str = "parametric"

    def __post_init__(self):
        if self.role not in ROLES:
            raise SpecError(f"unknown model role {self.role!r}")
        if self.fit_mode not in ("parametric", "ensemble"):
            raise SpecError(f"unknown fit mode {self.fit_mode!r}")

    @property
    def labels(self) -> list[str]:
        return [t.label() for t in self.terms]


def design_matrix(ds: Dataset, spec: ModelSpec, z_override: int | None = None) -> np.ndarray:
    """Materialize ``spec`` on ``ds``, one row per observation, columns in term order.

    With ``z_override`` every Z-involving column is computed as if all rows had
    that instrument value.
    """
    z = ds.z if z_override is None else np.full(ds.n, float(z_override))
    cols = []
    for t in spec.terms:
        if t.kind == "intercept":
            cols.append(np.ones(ds.n))
        elif t.kind == "main":
            cols.append(ds.column(t.cols[0]))
        elif t.kind == "z":
            cols.append(z)
        elif t.kind == "z_x":
            cols.append(z * ds.column(t.cols[0]))
        elif t.kind == "x_x":
            cols.append(ds.column(t.cols[0]) * ds.column(t.cols[1]))
        else:
            raise SpecError(f"unknown term kind {t.kind!r}")
    if not cols:
        return np.empty((ds.n, 0))
    return np.column_stack(cols)


# default main-terms specifications used by the parametric nuisance fits


def effect_spec(ds: Dataset) -> ModelSpec:
    return ModelSpec("effect_m", (INTERCEPT, main(ds.modifier_name)))


def outcome_my_spec(ds: Dataset) -> ModelSpec:
    return ModelSpec("outcome_my", (INTERCEPT,) + tuple(main(c) for c in ds.covariate_names))


def exposure_spec(ds: Dataset) -> ModelSpec:
    return ModelSpec("exposure_ma", (INTERCEPT, Z) + tuple(main(c) for c in ds.covariate_names))


def instrument_spec(ds: Dataset) -> ModelSpec:
    return ModelSpec("instrument_g", (INTERCEPT,) + tuple(main(c) for c in ds.covariate_names))


def outcome_mu_spec(ds: Dataset) -> ModelSpec:
    return ModelSpec(
        "outcome_mu",
        (INTERCEPT, Z) + tuple(main(c) for c in ds.covariate_names) + (z_times(ds.modifier_name),),
    )


def tsls_first_stage_spec(ds: Dataset) -> ModelSpec:
    """Regressors of both first-stage equations: Z, Z*V, V, the other W, intercept."""
    v = ds.modifier_name
    others = tuple(main(c) for c in ds.covariate_names if c != v)
    return ModelSpec("exposure_ma", (INTERCEPT, Z, z_times(v), main(v)) + others)


def check_tsls_first_stage(first: ModelSpec, effect: ModelSpec, outcome: ModelSpec) -> None:
    """The first stage must contain every exogenous second-stage regressor plus the Z-interactions."""
    have = set(first.terms)
    need = set(outcome.terms)
    for t in effect.terms:
        need.add(Z if t.kind == "intercept" else Term("z_x", t.cols))
    lacking = need - have
    if lacking:
        raise SpecError("first stage lacks " + ", ".join(sorted(t.label() for t in lacking)))
