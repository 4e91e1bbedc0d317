import csv
from datetime import datetime, timedelta

import numpy as np
import pytest

from greenmsm.model import ModelSpec, ParameterSet
from greenmsm.pipeline import RawSeries

STATES = ["low", "medium", "high"]
PAIRS = ["1->2", "2->1", "2->3", "3->2"]

# Rounded control-house intensities; 3->2 is effectively zero.
GH3_Q = np.array([[-0.005, 0.005, 0.0], [0.021, -0.043, 0.022], [0.0, 0.0, 0.0]])

TRUE_BASELINE = {"1->2": 0.08, "2->1": 0.06, "2->3": 0.07, "3->2": 0.05}
TRUE_BETA = {
    "1->2": {"x1": 0.5, "x2": -0.3},
    "2->1": {"x1": -0.4, "x2": 0.2},
    "2->3": {"x1": 0.3, "x2": 0.4},
    "3->2": {"x1": -0.5, "x2": 0.1},
}


def two_state_spec(covariates=()):
    return ModelSpec.build(["a", "b"], ["1->2", "2->1"], covariates)


def two_state_theta(spec, a=0.5, b=0.5):
    return ParameterSet.from_intensities(spec, {"1->2": a, "2->1": b})


@pytest.fixture
def ladder_spec():
    return ModelSpec.build(STATES, PAIRS, ["x1", "x2"])


@pytest.fixture
def true_theta(ladder_spec):
    return ParameterSet.from_intensities(ladder_spec, TRUE_BASELINE, TRUE_BETA)


def synthetic_greenhouses(seed=0, houses=("GH-1", "GH-2", "GH-3"), lines=4, n_days=35, missing=0.03):
    """15-minute climate for each house plus weekly per-line harvests.

    Yields respond to the house climate so fitted effects are non-trivial.
    """
    rng = np.random.default_rng(seed)
    slots = 96
    t = np.arange(n_days * slots) / slots
    sensors = {}
    climate = {}
    for gh in houses:
        base = {
            "co2": 420 + 40 * rng.standard_normal(n_days).repeat(slots),
            "rh": 70 + 6 * rng.standard_normal(n_days).repeat(slots),
            "par": 300 + 80 * np.sin(2 * np.pi * t) + 30 * rng.standard_normal(n_days).repeat(slots),
        }
        climate[gh] = {v: x.reshape(n_days, slots).mean(axis=1) for v, x in base.items()}
        for var, x in base.items():
            x = x + rng.normal(0, 2, x.size)
            x[rng.random(x.size) < missing] = np.nan
            stamps = [datetime(2024, 3, 1) + timedelta(minutes=15 * i) for i in range(x.size)]
            sensors[(gh, var)] = RawSeries.from_readings(stamps, x, 15, var, gh)
    harvest = {}
    for gh in houses:
        rh = climate[gh]["rh"]
        for k in range(lines):
            level = rng.gamma(4.0, 0.25)
            recs = []
            for d in range(0, n_days, 7):
                level = max(0.05, level * np.exp(0.02 * (rh[d] - 70) + rng.normal(0, 0.35)))
                recs.append((d, float(level)))
            harvest[(gh, f"L{k + 1}")] = recs
    return sensors, harvest


def write_sensor_csv(path, sensors, fmt=repr):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "greenhouse", "variable", "value"])
        for (gh, var), raw in sensors.items():
            t0 = datetime.combine(raw.start, datetime.min.time())
            for i, v in enumerate(raw.values):
                ts = (t0 + timedelta(minutes=raw.cadence_minutes * i)).isoformat()
                w.writerow([ts, gh, var, "" if np.isnan(v) else fmt(float(v))])


def write_harvest_csv(path, harvest):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["greenhouse", "line", "day", "yield_kg"])
        for (gh, line), recs in harvest.items():
            for d, y in recs:
                w.writerow([gh, line, d, repr(y)])


# -- acceptance report ------------------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
