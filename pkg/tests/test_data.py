import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from ivdr.data import (
    INTERCEPT, Z, ModelSpec, check_tsls_first_stage, design_matrix, effect_spec, main,
    outcome_my_spec, read_csv, tsls_first_stage_spec, validate_dataset, z_times,
)
from ivdr.errors import DegenerateDesign, InvalidTreatmentCoding, MissingData, SpecError


def small_table():
    return {
        "y": [1.0, 2.0, 3.5, -1.0],
        "z": [0, 1, 0, 1],
        "a": [0, 1, 1, 0],
        "w1": [0.3, -0.2, 1.1, 0.0],
        "v": [2.0, -1.0, 0.5, 0.25],
    }


def test_four_rows_valid():
    ds = validate_dataset(small_table(), "v")
    assert ds.n == 4
    assert ds.covariate_names == ("w1", "v")
    np.testing.assert_array_equal(ds.v, [2.0, -1.0, 0.5, 0.25])
    np.testing.assert_array_equal(ds.y, small_table()["y"])


def test_exposure_coded_two_rejected():
    t = small_table()
    t["a"][2] = 2
    with pytest.raises(InvalidTreatmentCoding):
        validate_dataset(t, "v")


def test_text_instrument_rejected():
    t = small_table()
    t["z"] = ["0", "yes", "0", "1"]
    with pytest.raises(InvalidTreatmentCoding):
        validate_dataset(t, "v")


def test_single_instrument_arm():
    t = small_table()
    t["z"] = [1, 1, 1, 1]
    with pytest.raises(DegenerateDesign):
        validate_dataset(t, "v")


def test_missing_cell_reports_location():
    t = small_table()
    t["w1"][3] = np.nan
    with pytest.raises(MissingData) as info:
        validate_dataset(t, "v")
    assert info.value.row == 3 and info.value.column == "w1"


def test_too_few_rows():
    t = {k: v[:3] for k, v in small_table().items()}
    with pytest.raises(DegenerateDesign):
        validate_dataset(t, "v")


@pytest.mark.parametrize("drop", ["y", "z", "a"])
def test_required_columns(drop):
    t = small_table()
    del t[drop]
    with pytest.raises(SpecError):
        validate_dataset(t, "v")


def test_modifier_must_be_covariate():
    with pytest.raises(SpecError):
        validate_dataset(small_table(), "age")
    with pytest.raises(SpecError):
        validate_dataset(small_table(), "z")


def test_dataset_immutable():
    ds = validate_dataset(small_table(), "v")
    with pytest.raises(ValueError):
        ds.y[0] = 10.0


def test_intercept_only_design():
    ds = validate_dataset(small_table(), "v").take([0, 1, 2])
    X = design_matrix(ds, ModelSpec("outcome_my", (INTERCEPT,)))
    np.testing.assert_array_equal(X, np.ones((3, 1)))


def test_z_override():
    ds = validate_dataset(small_table(), "v")
    spec = ModelSpec("outcome_mu", (INTERCEPT, main("v"), Z, z_times("v")))
    X1 = design_matrix(ds, spec, 1)
    np.testing.assert_array_equal(X1[:, 2], np.ones(4))
    np.testing.assert_array_equal(X1[:, 3], ds.v)
    X0 = design_matrix(ds, spec, 0)
    np.testing.assert_array_equal(X0[:, 2:], 0.0)
    np.testing.assert_array_equal(X0[:, :2], X1[:, :2])


def test_direct_materialization():
    t = {"y": [0.0, 1.0, 0.0, 1.0], "z": [0, 1, 1, 0], "a": [0, 1, 0, 0], "v": [2.0, -1.0, 3.0, 4.0]}
    ds = validate_dataset(t, "v").take([0, 1])
    np.testing.assert_array_equal(design_matrix(ds, effect_spec(ds)), [[1, 2], [1, -1]])


def test_unknown_column_in_spec():
    ds = validate_dataset(small_table(), "v")
    with pytest.raises(SpecError):
        design_matrix(ds, ModelSpec("outcome_my", (INTERCEPT, main("w9"))))


def test_bad_role():
    with pytest.raises(SpecError):
        ModelSpec("propensity", (INTERCEPT,))


def test_first_stage_completeness():
    ds = validate_dataset(small_table(), "v")
    check_tsls_first_stage(tsls_first_stage_spec(ds), effect_spec(ds), outcome_my_spec(ds))
    short = ModelSpec("exposure_ma", (INTERCEPT, Z, main("v"), main("w1")))
    with pytest.raises(SpecError, match="z:v"):
        check_tsls_first_stage(short, effect_spec(ds), outcome_my_spec(ds))


def test_csv_round_trip(tmp_path):
    ds = validate_dataset(small_table(), "v")
    path = tmp_path / "d.csv"
    ds.to_frame().to_csv(path, index=False)
    back = read_csv(path, "v")
    for name in ("w", "z", "a", "y"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    assert back.covariate_names == ds.covariate_names
    assert back.modifier_index == ds.modifier_index


def test_take_and_rows():
    ds = validate_dataset(small_table(), "v")
    sub = ds.take([3, 3, 0])
    assert sub.n == 3
    rows = list(sub.rows())
    assert rows[0].y == -1.0 and rows[2].z == 0
    assert rows[0].w.shape == (2,)


finite = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), min_size=4, max_size=20), st.data())
def test_override_changes_only_z_columns(rows, data):
    n = len(rows)
    z = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda l: 0 < sum(l) < len(l)))
    a = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    df = pd.DataFrame(rows, columns=["y", "w1", "v"])
    df["z"], df["a"] = z, a
    ds = validate_dataset(df, "v")
    spec = ModelSpec("outcome_mu", (INTERCEPT, Z, main("w1"), main("v"), z_times("v")))
    X1, X0 = design_matrix(ds, spec, 1), design_matrix(ds, spec, 0)
    involves = np.array([t.involves_z for t in spec.terms])
    np.testing.assert_array_equal(X1[:, ~involves], X0[:, ~involves])
    np.testing.assert_array_equal(design_matrix(ds, spec), design_matrix(ds, spec))
