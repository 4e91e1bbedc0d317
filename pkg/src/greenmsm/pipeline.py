"""Raw sensor and harvest streams to the long-format analysis panel.

Steps: regular-grid raw series -> neighbourhood gap filling -> two-stage
(slot -> hour -> day) means -> forward-carried harvests -> tertile states
from a reference house -> within-house z-scores -> panel.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import InputError
from .likelihood import PanelDataset, format_sig6

log = logging.getLogger(__name__)

GAP_OFFSETS = (-3, -2, -1, 1, 2, 3)
MINUTES_PER_DAY = 1440


@dataclass(frozen=True, eq=False)
class RawSeries:
    """Readings on a regular grid that starts at midnight of ``start``.

    ``values`` has one entry per slot, ``n_days * slots_per_day`` in total;
    NaN marks a missing reading.
    """

    variable: str
    group: str
    start: date
    cadence_minutes: int
    values: np.ndarray

    def __post_init__(self):
        if self.cadence_minutes <= 0 or MINUTES_PER_DAY % self.cadence_minutes:
            raise InputError(f"cadence {self.cadence_minutes} min does not divide a day")
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size == 0 or v.size % self.slots_per_day:
            raise InputError(f"{self.group}/{self.variable}: series does not cover whole days")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def slots_per_day(self) -> int:
        return MINUTES_PER_DAY // self.cadence_minutes

    @property
    def n_days(self) -> int:
        return self.values.size // self.slots_per_day

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.n_days, self.slots_per_day)

    def replace_values(self, values) -> "RawSeries":
        return RawSeries(self.variable, self.group, self.start, self.cadence_minutes, values)

    def missing_timestamps(self) -> list[datetime]:
        t0 = datetime.combine(self.start, datetime.min.time())
        step = timedelta(minutes=self.cadence_minutes)
        return [t0 + i * step for i in np.flatnonzero(np.isnan(self.values))]

    @classmethod
    def from_readings(
        cls,
        timestamps: Sequence[datetime],
        values: Sequence[float],
        cadence_minutes: int | None = None,
        variable: str = "",
        group: str = "",
    ) -> "RawSeries":
        if len(timestamps) == 0:
            raise InputError(f"{group}/{variable}: empty series")
        if len(values) != len(timestamps):
            raise InputError(f"{group}/{variable}: {len(values)} values for {len(timestamps)} timestamps")
        t0 = datetime.combine(timestamps[0].date(), datetime.min.time(), tzinfo=timestamps[0].tzinfo)
        minutes = np.array([(ts - t0).total_seconds() / 60.0 for ts in timestamps])
        if np.any(np.diff(minutes) <= 0):
            raise InputError(f"{group}/{variable}: timestamps must be strictly increasing")
        if cadence_minutes is None:
            cadence_minutes = infer_cadence(minutes)
        idx = minutes / cadence_minutes
        if not np.allclose(idx, np.round(idx)):
            raise InputError(f"{group}/{variable}: timestamps are off the {cadence_minutes}-minute grid")
        idx = np.round(idx).astype(int)
        slots = MINUTES_PER_DAY // cadence_minutes
        n_days = idx[-1] // slots + 1
        grid = np.full(n_days * slots, np.nan)
        grid[idx] = np.asarray(values, dtype=float)
        return cls(variable, group, t0.date(), int(cadence_minutes), grid)


def infer_cadence(minutes: np.ndarray) -> int:
    """Largest whole-minute step that divides every offset and the day length."""
    offsets = np.round(np.asarray(minutes)).astype(int)
    g = MINUTES_PER_DAY
    for m in offsets:
        g = math.gcd(g, int(m))
    return max(g, 1)


def gap_fill_neighborhood(raw: RawSeries) -> RawSeries:
    """Fill each missing slot with the mean of the same slot at days -3..+3.

    Only the originally observed neighbours are used (filled values never
    feed other fills) and any subset of the six offsets suffices.  Slots
    with no observed neighbour stay missing and are logged.
    """
    grid = raw.grid()
    n_days = grid.shape[0]
    out = grid.copy()
    missing = np.argwhere(np.isnan(grid))
    for d, j in missing:
        nb = [grid[d + o, j] for o in GAP_OFFSETS if 0 <= d + o < n_days]
        nb = [v for v in nb if not math.isnan(v)]
        if nb:
            out[d, j] = sum(nb) / len(nb)
    filled = raw.replace_values(out.reshape(-1))
    residual = int(np.isnan(out).sum())
    if residual:
        log.warning("%s/%s: %d slots remain missing after gap filling", raw.group, raw.variable, residual)
    return filled


@dataclass(frozen=True, eq=False)
class DailySeries:
    variable: str
    group: str
    start: date
    values: np.ndarray  # daily means, NaN when no hour had data
    partial: np.ndarray  # True when at least one hour was missing


def aggregate_daily(raw: RawSeries) -> DailySeries:
    """Two-stage mean: slots to hourly means, hourly means to daily means.

    Missing values are skipped at both stages.
    """
    if raw.values.size == 0:
        raise InputError("cannot aggregate an empty series")
    grid = raw.grid()
    if raw.cadence_minutes < 60:
        if 60 % raw.cadence_minutes:
            raise InputError(f"cadence {raw.cadence_minutes} min does not divide one hour")
        per_hour = 60 // raw.cadence_minutes
        hourly = _nanmean(grid.reshape(grid.shape[0], 24, per_hour), axis=2)
    else:
        hourly = grid
    daily = _nanmean(hourly, axis=1)
    partial = np.isnan(hourly).any(axis=1) & ~np.isnan(daily)
    return DailySeries(raw.variable, raw.group, raw.start, daily, partial)


def _nanmean(a: np.ndarray, axis: int) -> np.ndarray:
    ok = ~np.isnan(a)
    n = ok.sum(axis=axis)
    s = np.where(ok, a, 0.0).sum(axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, s / np.maximum(n, 1), np.nan)


@dataclass(frozen=True)
class DailyRecord:
    """One line-day of the analysis table; climate fields are daily means."""

    greenhouse: str
    line: str
    day: int
    yield_kg: float | None = None
    co2_ppm: float | None = None
    rh_percent: float | None = None
    par_umol: float | None = None
    temp_c: float | None = None
    water_l_m2: float | None = None
    state: int | None = None

    def __post_init__(self):
        if self.day < 0:
            raise InputError(f"day index must be >= 0, got {self.day}")
        if self.yield_kg is not None and self.yield_kg < 0:
            raise InputError(f"yield must be >= 0, got {self.yield_kg}")
        if self.state is not None and self.state not in (1, 2, 3):
            raise InputError(f"state must be 1..3, got {self.state}")


@dataclass(frozen=True)
class CutPoints:
    t1: float
    t2: float

    def __post_init__(self):
        if not self.t1 < self.t2:
            raise InputError(f"cut-points must satisfy t1 < t2, got ({self.t1}, {self.t2})")


def tertile_cutpoints(values: Iterable[float]) -> CutPoints:
    """1/3 and 2/3 quantiles, linear interpolation at position ``(n - 1) p + 1``."""
    v = np.asarray(list(values), dtype=float)
    v = v[~np.isnan(v)]
    if np.unique(v).size < 3:
        raise InputError("tertile cut-points need at least three distinct values")
    t1, t2 = np.quantile(v, [1 / 3, 2 / 3], method="linear")
    return CutPoints(float(t1), float(t2))


def assign_states(yields: Iterable[float], cuts: CutPoints) -> np.ndarray:
    """1 below ``t1``, 2 on the closed interval ``[t1, t2]``, 3 above ``t2``."""
    y = np.asarray(list(yields), dtype=float)
    if y.size == 0:
        return np.zeros(0, dtype=int)
    if np.isnan(y).any():
        raise InputError("cannot assign a state to a missing yield")
    if (y < 0).any():
        raise InputError("yields must be non-negative")
    return np.where(y < cuts.t1, 1, np.where(y > cuts.t2, 3, 2)).astype(int)


def forward_carry(weekly: Sequence[tuple[int, float]], horizon_days: int) -> np.ndarray:
    """Daily vector carrying the latest measurement forward; NaN before the first."""
    if not weekly:
        raise InputError("forward carry needs at least one measurement")
    days = [int(d) for d, _ in weekly]
    if any(b <= a for a, b in zip(days, days[1:])):
        raise InputError("measurement days must be strictly increasing")
    out = np.full(int(horizon_days), np.nan)
    for k, (d, v) in enumerate(weekly):
        end = int(weekly[k + 1][0]) if k + 1 < len(weekly) else int(horizon_days)
        out[max(int(d), 0):max(end, 0)] = float(v)
    return out


def zscore_within_group(table: pd.DataFrame, group_key: str, variables: Sequence[str]) -> pd.DataFrame:
    """Centre and scale each variable within each group (sample SD, ``n - 1``).

    Missing values are ignored when computing the moments and stay missing.
    """
    out = table.copy()
    for var in variables:
        col = out[var].to_numpy(dtype=float).copy()
        for g, idx in out.groupby(group_key, sort=True).indices.items():
            x = col[idx]
            ok = ~np.isnan(x)
            if np.unique(x[ok]).size < 2:
                raise InputError(f"variable {var!r} has zero variance in group {g!r}")
            mean = x[ok].mean()
            sd = x[ok].std(ddof=1)
            col[idx] = (x - mean) / sd
        out[var] = col
    return out


def detrended_correlations(
    table: pd.DataFrame,
    variables: Sequence[str],
    window: int = 7,
    group_key: str = "greenhouse",
    groups: Sequence[str] | None = None,
) -> pd.DataFrame:
    """Pearson correlations of residuals from a centred moving average.

    Each group's series (one row per day) is detrended separately; edge days
    without a full window are dropped.  Residuals of the selected groups
    (all by default) are pooled and correlated on pairwise-complete days.
    """
    if window < 3 or window % 2 == 0:
        raise InputError(f"window must be odd and >= 3, got {window}")
    half = window // 2
    kernel = np.ones(window) / window
    pooled = {v: [] for v in variables}
    for g, sub in table.groupby(group_key, sort=True):
        if groups is not None and g not in groups:
            continue
        sub = sub.sort_values("day")
        if sub["day"].duplicated().any():
            raise InputError(f"group {g!r} has several rows per day; pass one series per group")
        if len(sub) <= window:
            raise InputError(f"group {g!r} has {len(sub)} days, need more than the window {window}")
        for v in variables:
            x = sub[v].to_numpy(dtype=float)
            trend = np.convolve(x, kernel, mode="valid")
            pooled[v].append(x[half:len(x) - half] - trend)
    resid = {v: np.concatenate(pooled[v]) for v in variables}
    n = len(variables)
    corr = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = resid[variables[i]], resid[variables[j]]
            ok = ~(np.isnan(a) | np.isnan(b))
            c = float(np.corrcoef(a[ok], b[ok])[0, 1]) if ok.sum() > 2 else math.nan
            corr[i, j] = corr[j, i] = c
    return pd.DataFrame(corr, index=list(variables), columns=list(variables))


# -- I/O ------------------------------------------------------------------

def read_sensor_csv(source, cadence_minutes: int | None = None) -> dict[tuple[str, str], RawSeries]:
    """``timestamp,greenhouse,variable,value``; blank value means missing."""
    rows = _read_csv(source, ("timestamp", "greenhouse", "variable", "value"))
    grouped: dict[tuple[str, str], list] = {}
    for lineno, r in rows:
        try:
            ts = datetime.fromisoformat(r["timestamp"].strip())
            val = float(r["value"]) if r["value"].strip() else math.nan
        except ValueError as exc:
            raise InputError(f"sensor CSV line {lineno}: {exc}") from None
        grouped.setdefault((r["greenhouse"].strip(), r["variable"].strip()), []).append((ts, val))
    out = {}
    for (gh, var), items in sorted(grouped.items()):
        items.sort(key=lambda x: x[0])
        out[(gh, var)] = RawSeries.from_readings(
            [t for t, _ in items], [v for _, v in items], cadence_minutes, var, gh
        )
    return out


def read_harvest_csv(source) -> dict[tuple[str, str], list[tuple[int, float]]]:
    """``greenhouse,line,day,yield_kg`` -> per-line sorted measurement lists."""
    rows = _read_csv(source, ("greenhouse", "line", "day", "yield_kg"))
    out: dict[tuple[str, str], list] = {}
    for lineno, r in rows:
        try:
            day = int(r["day"])
            y = float(r["yield_kg"])
        except ValueError as exc:
            raise InputError(f"harvest CSV line {lineno}: {exc}") from None
        if y < 0:
            raise InputError(f"harvest CSV line {lineno}: negative yield")
        out.setdefault((r["greenhouse"].strip(), r["line"].strip()), []).append((day, y))
    return {k: sorted(v) for k, v in sorted(out.items())}


def _read_csv(source, required: Sequence[str]):
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    header = [h.strip() for h in (reader.fieldnames or [])]
    missing = [c for c in required if c not in header]
    if missing:
        raise InputError(f"CSV is missing columns {missing}")
    reader.fieldnames = header
    return [(i, row) for i, row in enumerate(reader, start=2)]


# -- assembly ---------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessSettings:
    reference_group: str | None = None
    covariates: tuple[str, ...] = ()
    cutpoints: tuple[float, float] | None = None
    start_date: date | None = None
    days: int | None = None
    window: int = 7
    screening: tuple[str, ...] = ()


@dataclass(eq=False)
class AnalysisTable:
    daily: pd.DataFrame  # one row per line-day
    climate: pd.DataFrame  # one row per greenhouse-day, raw daily means
    cutpoints: CutPoints
    correlations: pd.DataFrame | None
    partial_days: int
    residual_gaps: int
    panel: PanelDataset = field(repr=False, default=None)


def build_analysis_table(
    sensors: Mapping[tuple[str, str], RawSeries],
    harvest: Mapping[tuple[str, str], list[tuple[int, float]]],
    settings: PreprocessSettings,
) -> AnalysisTable:
    """Run the full preprocessing chain and return tables plus the panel.

    Model covariates named after a greenhouse become 0/1 indicators for that
    house; every other covariate must be a sensor variable and is z-scored
    within house.
    """
    if not sensors:
        raise InputError("no sensor series supplied")
    if not harvest:
        raise InputError("no harvest records supplied")
    start = settings.start_date or min(s.start for s in sensors.values())
    houses = sorted({gh for gh, _ in harvest} | {gh for gh, _ in sensors})
    variables = sorted({var for _, var in sensors})

    daily_means: dict[tuple[str, str], np.ndarray] = {}
    partial_days = residual = 0
    n_days = settings.days
    for key, raw in sensors.items():
        filled = gap_fill_neighborhood(raw)
        residual += int(np.isnan(filled.values).sum())
        agg = aggregate_daily(filled)
        partial_days += int(agg.partial.sum())
        offset = (agg.start - start).days
        daily_means[key] = (offset, agg.values)
    if n_days is None:
        last_sensor = max(off + v.size for off, v in daily_means.values())
        last_harvest = max(d for recs in harvest.values() for d, _ in recs) + 1
        n_days = max(last_sensor, last_harvest)

    climate_rows = []
    for gh in houses:
        block = {"greenhouse": [gh] * n_days, "day": list(range(n_days))}
        for var in variables:
            col = np.full(n_days, np.nan)
            if (gh, var) in daily_means:
                off, vals = daily_means[(gh, var)]
                for d in range(n_days):
                    if 0 <= d - off < vals.size:
                        col[d] = vals[d - off]
            block[var] = col
        climate_rows.append(pd.DataFrame(block))
    climate = pd.concat(climate_rows, ignore_index=True)

    line_rows = []
    for (gh, line), recs in harvest.items():
        y = forward_carry(recs, n_days)
        line_rows.append(pd.DataFrame({"greenhouse": gh, "line": line, "day": np.arange(n_days), "yield_kg": y}))
    daily = pd.concat(line_rows, ignore_index=True).merge(climate, on=["greenhouse", "day"], how="left")

    ref = settings.reference_group or houses[0]
    if settings.cutpoints is not None:
        cuts = CutPoints(*settings.cutpoints)
    else:
        ref_yields = daily.loc[daily["greenhouse"] == ref, "yield_kg"].dropna()
        if ref_yields.empty:
            raise InputError(f"reference greenhouse {ref!r} has no yield data")
        cuts = tertile_cutpoints(ref_yields)
    has_yield = daily["yield_kg"].notna()
    state = np.zeros(len(daily), dtype=int)
    state[has_yield.to_numpy()] = assign_states(daily.loc[has_yield, "yield_kg"], cuts)
    daily["state"] = state

    climate_covs = [c for c in settings.covariates if c not in houses]
    unknown = [c for c in climate_covs if c not in variables]
    if unknown:
        raise InputError(f"covariates {unknown} are neither sensor variables nor greenhouse ids")
    zs = zscore_within_group(daily, "greenhouse", climate_covs)
    for c in climate_covs:
        daily[f"z_{c}"] = zs[c]

    screening = list(settings.screening) or variables
    correlations = None
    if len(screening) >= 2:
        correlations = detrended_correlations(climate, screening, settings.window)

    table = AnalysisTable(daily, climate, cuts, correlations, partial_days, residual)
    table.panel = panel_from_table(daily, settings.covariates, houses)
    return table


def panel_from_table(daily: pd.DataFrame, covariates: Sequence[str], houses: Sequence[str]) -> PanelDataset:
    """Line-days with a state and complete covariates, one subject per line."""
    cols = []
    for c in covariates:
        if c in houses:
            cols.append((daily["greenhouse"] == c).astype(float).to_numpy())
        else:
            cols.append(daily[f"z_{c}"].to_numpy(dtype=float))
    Z = np.column_stack(cols) if cols else np.zeros((len(daily), 0))
    keep = (daily["state"].to_numpy() > 0) & ~np.isnan(Z).any(axis=1)
    subjects = {}
    sid = (daily["greenhouse"].astype(str) + "/" + daily["line"].astype(str)).to_numpy()
    days = daily["day"].to_numpy(dtype=float)
    states = daily["state"].to_numpy()
    for s in dict.fromkeys(sid[keep]):
        m = keep & (sid == s)
        subjects[s] = (days[m], states[m], Z[m])
    return PanelDataset(subjects, covariates)


def round_panel(panel: PanelDataset) -> PanelDataset:
    """Round to the 6 significant digits used in pipeline CSV output."""
    buf = io.StringIO()
    panel.write_csv(buf, float_format=format_sig6)
    buf.seek(0)
    return PanelDataset.read_csv(buf)
