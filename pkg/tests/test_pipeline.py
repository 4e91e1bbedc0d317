import io
import math
from datetime import date, datetime, timedelta

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greenmsm.errors import InputError
from greenmsm.pipeline import (
    CutPoints,
    DailyRecord,
    PreprocessSettings,
    RawSeries,
    aggregate_daily,
    assign_states,
    build_analysis_table,
    detrended_correlations,
    forward_carry,
    gap_fill_neighborhood,
    read_harvest_csv,
    read_sensor_csv,
    tertile_cutpoints,
    zscore_within_group,
)

from conftest import synthetic_greenhouses, write_harvest_csv, write_sensor_csv


def series(grid, cadence=15):
    grid = np.asarray(grid, dtype=float)
    return RawSeries("co2", "GH-1", date(2024, 1, 1), cadence, grid.reshape(-1))


# -- aggregation -----------------------------------------------------------------------

def test_constant_series_mean():
    agg = aggregate_daily(series(np.full((2, 96), 400.0)))
    np.testing.assert_array_equal(agg.values, [400.0, 400.0])
    assert not agg.partial.any()


def test_two_stage_mean_of_hourly_ramp():
    day = np.repeat(np.arange(1.0, 25.0), 4)
    assert aggregate_daily(series(day)).values[0] == 12.5


def test_two_stage_differs_from_flat_mean():
    # hour 0 has one reading (10), hour 1 has four (0); flat mean would be 2
    day = np.full(96, np.nan)
    day[0] = 10.0
    day[4:8] = 0.0
    agg = aggregate_daily(series(day))
    assert agg.values[0] == 5.0
    assert agg.partial[0]


def test_half_missing_hours_flagged_partial():
    day = np.repeat(np.arange(1.0, 25.0), 4)
    day[48:] = np.nan
    agg = aggregate_daily(series(day))
    assert agg.values[0] == pytest.approx(np.mean(np.arange(1.0, 13.0)))
    assert agg.partial[0]


def test_empty_day_is_missing():
    grid = np.full((2, 96), 3.0)
    grid[1] = np.nan
    agg = aggregate_daily(series(grid))
    assert agg.values[0] == 3.0 and math.isnan(agg.values[1])
    assert not agg.partial[1]


def test_cadence_must_divide_hour():
    with pytest.raises(InputError, match="hour"):
        aggregate_daily(series(np.ones(160), cadence=9))


def test_hourly_cadence_accepted():
    agg = aggregate_daily(series(np.arange(24.0), cadence=60))
    assert agg.values[0] == 11.5


# -- gap filling -------------------------------------------------------------------------

def test_full_neighbourhood_mean():
    grid = np.zeros((7, 96))
    for k, d in enumerate([0, 1, 2, 4, 5, 6]):
        grid[d, 10] = k + 1
    grid[3, 10] = np.nan
    assert gap_fill_neighborhood(series(grid)).grid()[3, 10] == 3.5


def test_partial_neighbourhood_mean():
    grid = np.full((7, 96), np.nan)
    grid[2, 5], grid[4, 5] = 10.0, 14.0
    assert gap_fill_neighborhood(series(grid)).grid()[3, 5] == 12.0


def test_fills_use_original_values_only():
    grid = np.full((8, 96), 1.0)
    grid[3, 0] = grid[4, 0] = np.nan
    grid[0, 0] = 7.0
    out = gap_fill_neighborhood(series(grid)).grid()
    # day 3 sees days 0,1,2,5,6 (not the gap at 4)
    assert out[3, 0] == pytest.approx((7 + 1 + 1 + 1 + 1) / 5)
    assert out[4, 0] == 1.0


def test_isolated_gap_remains_and_is_reported(caplog):
    grid = np.full((7, 96), np.nan)
    grid[0, 1] = 2.0
    with caplog.at_level("WARNING"):
        out = gap_fill_neighborhood(series(grid))
    assert np.isnan(out.grid()[0, 0])
    assert out.grid()[1, 1] == 2.0
    assert "remain missing" in caplog.text
    assert datetime(2024, 1, 1) in out.missing_timestamps()


def test_complete_series_unchanged_bitwise():
    rng = np.random.default_rng(0)
    raw = series(rng.normal(size=(9, 96)))
    assert gap_fill_neighborhood(raw).values.tobytes() == raw.values.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.9))
def test_observed_values_never_altered(seed, frac):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(9, 96))
    v[rng.random(v.shape) < frac] = np.nan
    raw = series(v)
    out = gap_fill_neighborhood(raw).values
    seen = ~np.isnan(raw.values)
    assert out[seen].tobytes() == raw.values[seen].tobytes()


# -- RawSeries construction -------------------------------------------------------------

def test_from_readings_places_on_grid():
    t0 = datetime(2024, 5, 2, 0, 0)
    stamps = [t0 + timedelta(minutes=15 * i) for i in (0, 1, 3)]
    raw = RawSeries.from_readings(stamps, [1.0, 2.0, 4.0], variable="rh", group="GH-2")
    assert raw.cadence_minutes == 15 and raw.n_days == 1
    np.testing.assert_array_equal(raw.values[:4], [1.0, 2.0, np.nan, 4.0])


def test_from_readings_requires_increasing_times():
    t0 = datetime(2024, 5, 2)
    with pytest.raises(InputError, match="increasing"):
        RawSeries.from_readings([t0, t0], [1.0, 2.0])


def test_from_readings_rejects_off_grid():
    t0 = datetime(2024, 5, 2)
    with pytest.raises(InputError, match="grid"):
        RawSeries.from_readings([t0, t0 + timedelta(minutes=7)], [1.0, 2.0], cadence_minutes=15)


# -- z-scores ------------------------------------------------------------------------------

def test_zscore_simple():
    df = pd.DataFrame({"g": ["a"] * 3, "x": [0.0, 1.0, 2.0]})
    np.testing.assert_array_equal(zscore_within_group(df, "g", ["x"])["x"], [-1.0, 0.0, 1.0])


def test_zscore_constant_group_named():
    df = pd.DataFrame({"g": ["a", "a", "b", "b"], "x": [1.0, 2.0, 5.0, 5.0]})
    with pytest.raises(InputError, match="'x'.*'b'"):
        zscore_within_group(df, "g", ["x"])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100.0), st.floats(-1e3, 1e3))
def test_zscore_moments_and_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    df = pd.DataFrame({"g": np.repeat(["p", "q", "r"], 20), "x": rng.normal(5, 2, 60)})
    z = zscore_within_group(df, "g", ["x"])
    for _, grp in z.groupby("g"):
        assert abs(grp["x"].mean()) < 1e-10
        assert abs(grp["x"].std(ddof=1) - 1) < 1e-10
    shifted = df.assign(x=a * df["x"] + b)
    np.testing.assert_allclose(zscore_within_group(shifted, "g", ["x"])["x"], z["x"], atol=1e-12)


# -- tertiles and states --------------------------------------------------------------------

def test_tertiles_of_one_to_nine():
    cuts = tertile_cutpoints(range(1, 10))
    assert (cuts.t1, cuts.t2) == pytest.approx((11 / 3, 19 / 3), abs=1e-12)
    assert round(cuts.t1, 3) == 3.667 and round(cuts.t2, 3) == 6.333


@pytest.mark.parametrize("values", [[1.0] * 5, [1.0, 2.0, 1.0, 2.0]])
def test_degenerate_tertiles_rejected(values):
    with pytest.raises(InputError, match="distinct"):
        tertile_cutpoints(values)


def test_state_assignment_with_closed_middle():
    cuts = CutPoints(0.55, 1.15)
    np.testing.assert_array_equal(assign_states([0.50, 0.80, 1.20], cuts), [1, 2, 3])
    np.testing.assert_array_equal(assign_states([0.55, 1.15], cuts), [2, 2])
    assert assign_states([], cuts).size == 0


def test_negative_yield_rejected():
    with pytest.raises(InputError, match="non-negative"):
        assign_states([0.2, -0.1], CutPoints(0.55, 1.15))


def test_cutpoints_must_increase():
    with pytest.raises(InputError):
        CutPoints(1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 400))
def test_tertile_occupancy_near_even(seed, n):
    y = np.random.default_rng(seed).gamma(2.0, 0.5, n)
    counts = np.bincount(assign_states(y, tertile_cutpoints(y)), minlength=4)[1:]
    assert np.all(np.abs(counts - n / 3) <= 1)


# -- forward carry ---------------------------------------------------------------------------

def test_forward_carry_weekly():
    np.testing.assert_array_equal(forward_carry([(0, 1.0), (7, 2.0)], 10), [1.0] * 7 + [2.0] * 3)


def test_forward_carry_single():
    np.testing.assert_array_equal(forward_carry([(0, 5.0)], 3), [5.0, 5.0, 5.0])


def test_forward_carry_leading_gap():
    out = forward_carry([(3, 4.0)], 5)
    assert np.isnan(out[:3]).all()
    np.testing.assert_array_equal(out[3:], [4.0, 4.0])


def test_forward_carry_empty_rejected():
    with pytest.raises(InputError):
        forward_carry([], 5)


# -- detrended correlations ---------------------------------------------------------------------

def test_identical_anomalies_correlate_perfectly():
    rng = np.random.default_rng(0)
    x = rng.normal(size=60)
    df = pd.DataFrame({"greenhouse": "A", "day": np.arange(60), "u": x, "v": 3 * x + 2})
    c = detrended_correlations(df, ["u", "v"])
    assert c.loc["u", "v"] == pytest.approx(1.0, abs=1e-12)


def test_common_trend_removed():
    rng = np.random.default_rng(1)
    d = np.arange(500)
    trend = 20 * np.sin(2 * np.pi * d / 365) + 0.05 * d
    df = pd.DataFrame({"greenhouse": "A", "day": d, "u": trend + rng.normal(size=500), "v": trend + rng.normal(size=500)})
    assert np.corrcoef(df["u"], df["v"])[0, 1] > 0.9
    assert abs(detrended_correlations(df, ["u", "v"]).loc["u", "v"]) < 0.2


def test_matrix_shape_and_symmetry():
    rng = np.random.default_rng(2)
    df = pd.DataFrame({"greenhouse": np.repeat(["A", "B"], 40), "day": np.tile(np.arange(40), 2)})
    for v in "abcd":
        df[v] = rng.normal(size=80) + np.tile(np.linspace(0, 3, 40), 2)
    c = detrended_correlations(df, list("abcd")).to_numpy()
    assert np.all(np.diag(c) == 1.0)
    assert np.abs(c - c.T).max() <= 1e-12


def test_correlation_input_checks():
    df = pd.DataFrame({"greenhouse": "A", "day": np.arange(5), "u": np.arange(5.0), "v": np.arange(5.0)})
    with pytest.raises(InputError, match="window"):
        detrended_correlations(df, ["u", "v"], window=4)
    with pytest.raises(InputError, match="days"):
        detrended_correlations(df, ["u", "v"], window=7)


# -- records and CSV ------------------------------------------------------------------------------

def test_daily_record_invariants():
    DailyRecord("GH-1", "L1", 0, yield_kg=0.0, state=2)
    with pytest.raises(InputError):
        DailyRecord("GH-1", "L1", -1)
    with pytest.raises(InputError):
        DailyRecord("GH-1", "L1", 2, yield_kg=-0.5)


def test_sensor_csv_round_trip(tmp_path):
    sensors, harvest = synthetic_greenhouses(seed=3, houses=("GH-1",), lines=1, n_days=3)
    write_sensor_csv(tmp_path / "s.csv", sensors)
    back = read_sensor_csv(tmp_path / "s.csv")
    for key, raw in sensors.items():
        assert back[key].cadence_minutes == 15
        np.testing.assert_array_equal(back[key].values, raw.values)


def test_sensor_csv_bad_value_reports_line():
    text = "timestamp,greenhouse,variable,value\n2024-01-01T00:00,GH-1,co2,400\n2024-01-01T00:15,GH-1,co2,abc\n"
    with pytest.raises(InputError, match="line 3"):
        read_sensor_csv(io.StringIO(text))


def test_harvest_csv_checks():
    with pytest.raises(InputError, match="missing columns"):
        read_harvest_csv(io.StringIO("greenhouse,line,day\nGH-1,L1,0\n"))
    with pytest.raises(InputError, match="negative"):
        read_harvest_csv(io.StringIO("greenhouse,line,day,yield_kg\nGH-1,L1,0,-2\n"))


# -- assembly ---------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def table():
    sensors, harvest = synthetic_greenhouses(seed=0)
    settings_ = PreprocessSettings(reference_group="GH-3", covariates=("co2", "rh", "par", "GH-1", "GH-2"))
    return build_analysis_table(sensors, harvest, settings_)


def test_panel_is_valid(table):
    panel = table.panel
    assert len(panel) == 12
    assert panel.covariate_names == ("co2", "rh", "par", "GH-1", "GH-2")
    for sid in panel.subject_ids:
        t, s, z = panel[sid]
        assert np.all(np.diff(t) == 1.0)
        assert set(np.unique(s)) <= {1, 2, 3}
        gh = sid.split("/")[0]
        assert np.all(z[:, 3] == (gh == "GH-1")) and np.all(z[:, 4] == (gh == "GH-2"))


def test_cutpoints_come_from_reference(table):
    ref = table.daily.loc[table.daily["greenhouse"] == "GH-3", "yield_kg"].dropna()
    expected = tertile_cutpoints(ref)
    assert table.cutpoints == expected


def test_fixed_cutpoints_override():
    sensors, harvest = synthetic_greenhouses(seed=0, n_days=14)
    t = build_analysis_table(sensors, harvest, PreprocessSettings(covariates=("rh",), cutpoints=(0.55, 1.15)))
    assert t.cutpoints == CutPoints(0.55, 1.15)


def test_unknown_covariate_rejected():
    sensors, harvest = synthetic_greenhouses(seed=0, n_days=14)
    with pytest.raises(InputError, match="temp"):
        build_analysis_table(sensors, harvest, PreprocessSettings(covariates=("temp",)))


def test_screening_matrix_covers_all_variables(table):
    assert list(table.correlations.columns) == ["co2", "par", "rh"]
