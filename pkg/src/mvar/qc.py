"""Three-step station quality control: station removal, Kriging fill of
sparse gaps (or timestep exclusion), and per-city maximum aggregation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .kriging import (DegenerateGeometryError, Variogram, default_variogram, fit_variogram,
                      idw_estimate, kriging_weights)
from .series import POLLUTANTS, CitySeries, EmptyDatasetError, format_time, parse_times

log = logging.getLogger(__name__)

STATION_COLUMNS = ("time", "station_id", "city_id", "lat", "lon") + POLLUTANTS
MAX_STATION_MISSING = 0.5
MAX_TIMESTEP_MISSING = 0.2


class MalformedRowError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class StationTable:
    """Station observations on a full hourly axis; missing = NaN."""

    station_ids: List[str]
    city_ids: List[str]  # per station
    lat: np.ndarray
    lon: np.ndarray
    times: pd.DatetimeIndex
    values: np.ndarray  # (T, S, D)
    pollutants: Sequence[str] = POLLUTANTS

    def subset(self, idx) -> "StationTable":
        idx = np.asarray(idx, dtype=int)
        return StationTable([self.station_ids[i] for i in idx], [self.city_ids[i] for i in idx],
                            self.lat[idx], self.lon[idx], self.times, self.values[:, idx],
                            tuple(self.pollutants))


def read_station_csv(path, local_offset_hours: float = 8.0, start=None, end=None) -> StationTable:
    """Parse the station CSV; ``start``/``end`` declare the time range (default: data extent)."""
    rows_t, rows_s, vals, lines = [], [], [], []
    meta: Dict[str, Tuple[str, float, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != STATION_COLUMNS:
            raise MalformedRowError(1, f"expected header {','.join(STATION_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(STATION_COLUMNS):
                raise MalformedRowError(lineno, f"expected {len(STATION_COLUMNS)} fields, got {len(row)}")
            t, sid, cid, la, lo = row[:5]
            try:
                la, lo = float(la), float(lo)
                v = [float(x) if x.strip() != "" else math.nan for x in row[5:]]
            except ValueError as exc:
                raise MalformedRowError(lineno, str(exc)) from None
            if not (-90 <= la <= 90 and -180 <= lo <= 180):
                raise MalformedRowError(lineno, f"coordinates out of range ({la}, {lo})")
            if any((not math.isnan(x)) and (not math.isfinite(x) or x < 0) for x in v):
                raise MalformedRowError(lineno, "concentrations must be finite and >= 0")
            if sid in meta and meta[sid] != (cid, la, lo):
                raise MalformedRowError(lineno, f"station {sid} changes city or location")
            meta.setdefault(sid, (cid, la, lo))
            rows_t.append(t)
            lines.append(lineno)
            rows_s.append(sid)
            vals.append(v)
    if not rows_t:
        raise EmptyDatasetError(f"{path}: no observations")
    try:
        times = parse_times(rows_t, local_offset_hours)
    except (ValueError, TypeError):
        # locate the offending row for the error message
        for i, raw in enumerate(rows_t):
            try:
                parse_times([raw], local_offset_hours)
            except (ValueError, TypeError):
                raise MalformedRowError(lines[i], f"unparseable timestamp {raw!r}") from None
        raise
    if times.isna().any():
        bad = int(np.flatnonzero(times.isna())[0])
        raise MalformedRowError(lines[bad], f"unparseable timestamp {rows_t[bad]!r}")
    lo_t = pd.Timestamp(start, tz="UTC") if start is not None else times.min()
    hi_t = pd.Timestamp(end, tz="UTC") if end is not None else times.max()
    axis = pd.date_range(lo_t.floor("h"), hi_t.floor("h"), freq="h")
    stations = sorted(meta)
    s_index = {s: i for i, s in enumerate(stations)}
    values = np.full((len(axis), len(stations), len(POLLUTANTS)), np.nan)
    ti = axis.get_indexer(times.floor("h"))
    keep = ti >= 0
    si = np.array([s_index[s] for s in rows_s])
    values[ti[keep], si[keep]] = np.asarray(vals)[keep]
    return StationTable(stations, [meta[s][0] for s in stations],
                        np.array([meta[s][1] for s in stations]), np.array([meta[s][2] for s in stations]),
                        axis, values)


def write_station_csv(table: StationTable, path) -> None:
    T, S, D = table.values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATION_COLUMNS)
        for t in range(T):
            ts = format_time(table.times[t])
            for s in range(S):
                row = table.values[t, s]
                w.writerow([ts, table.station_ids[s], table.city_ids[s], repr(float(table.lat[s])),
                            repr(float(table.lon[s]))] + ["" if np.isnan(x) else repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# step 1
# ---------------------------------------------------------------------------

def qc_station_filter(table: StationTable, threshold: float = MAX_STATION_MISSING):
    """Drop stations whose missing fraction exceeds ``threshold`` for any pollutant.

    Returns ``(retained_indices, removals)``; each removal records the
    station and its per-pollutant missing fractions.
    """
    if table.values.size == 0:
        raise EmptyDatasetError("no station records")
    frac = np.isnan(table.values).mean(axis=0)  # (S, D)
    removed = (frac > threshold).any(axis=1)
    removals = [
        {"station_id": table.station_ids[s], "city_id": table.city_ids[s],
         "missing_fraction": {p: float(frac[s, j]) for j, p in enumerate(table.pollutants)}}
        for s in np.flatnonzero(removed)
    ]
    return np.flatnonzero(~removed), removals


# ---------------------------------------------------------------------------
# step 2
# ---------------------------------------------------------------------------

def qc_timestep_fill(lat, lon, snapshot, variogram: Variogram,
                     threshold: float = MAX_TIMESTEP_MISSING):
    """Fill one (timestep, pollutant) station snapshot.

    Returns ``(values, status)`` where status is ``"complete"``,
    ``"kriged"``, ``"idw"`` (fewer than 3 present stations or singular
    geometry) or ``"dropped"`` (missing fraction above ``threshold``; values
    returned unchanged).
    """
    snap = np.asarray(snapshot, dtype=np.float64)
    miss = np.isnan(snap)
    if not miss.any():
        return snap.copy(), "complete"
    if miss.mean() > threshold:
        return snap.copy(), "dropped"
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    pres = np.flatnonzero(~miss)
    out = snap.copy()
    status = "kriged"
    if pres.size < 3:
        status = "idw"
    else:
        try:
            for s in np.flatnonzero(miss):
                w, _, _ = kriging_weights((lat[s], lon[s]), lat[pres], lon[pres], variogram)
                out[s] = w @ snap[pres]
        except DegenerateGeometryError:
            status = "idw"
    if status == "idw":
        if pres.size == 0:
            return snap.copy(), "dropped"
        for s in np.flatnonzero(miss):
            out[s] = idw_estimate((lat[s], lon[s]), lat[pres], lon[pres], snap[pres])
    return out, status


# ---------------------------------------------------------------------------
# step 3
# ---------------------------------------------------------------------------

def city_aggregate(station_values, station_cities: Sequence[str], cities: Sequence[str]) -> np.ndarray:
    """Per-city maximum over stations: (..., S, D) -> (..., N, D).

    Cities without stations get NaN; NaN station entries are ignored.
    """
    v = np.asarray(station_values, dtype=np.float64)
    out = np.full(v.shape[:-2] + (len(cities), v.shape[-1]), np.nan)
    station_cities = np.asarray(station_cities)
    for i, c in enumerate(cities):
        sel = np.flatnonzero(station_cities == c)
        if sel.size == 0:
            continue
        block = v[..., sel, :]
        with np.errstate(invalid="ignore"):
            allnan = np.isnan(block).all(axis=-2)
            m = np.where(allnan, np.nan, np.nanmax(np.where(np.isnan(block), -np.inf, block), axis=-2))
        out[..., i, :] = m
    return out


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

@dataclass
class QCResult:
    series: CitySeries
    stations: StationTable  # retained stations after filling; dropped cells NaN
    variograms: Dict[str, Variogram]
    report: dict = field(default_factory=dict)


def _fit_variograms(table: StationTable, max_snapshots: int = 200) -> Dict[str, Variogram]:
    out = {}
    for j, p in enumerate(table.pollutants):
        v = table.values[:, :, j]
        complete = np.flatnonzero(~np.isnan(v).any(axis=1))
        if complete.size == 0:
            out[p] = default_variogram(v)
            continue
        pick = complete[np.linspace(0, complete.size - 1, min(max_snapshots, complete.size)).astype(int)]
        out[p] = fit_variogram(table.lat, table.lon, v[pick])
    return out


def run_qc(table: StationTable, variogram: Union[str, Variogram, Dict[str, Variogram], None] = "auto",
           station_threshold: float = MAX_STATION_MISSING,
           timestep_threshold: float = MAX_TIMESTEP_MISSING) -> QCResult:
    """Station removal, per-(timestep, pollutant) fill/drop, city maxima."""
    retained, removals = qc_station_filter(table, station_threshold)
    if retained.size == 0:
        raise EmptyDatasetError("every station was removed by the missing-data rule")
    kept = table.subset(retained)
    if variogram is None or variogram == "auto":
        vgs = _fit_variograms(kept)
    elif isinstance(variogram, Variogram):
        vgs = {p: variogram for p in kept.pollutants}
    else:
        vgs = dict(variogram)

    filled = kept.values.copy()
    counts = {"complete": 0, "kriged": 0, "idw": 0, "dropped": 0}
    dropped: List[Tuple[str, str]] = []
    for j, p in enumerate(kept.pollutants):
        col = kept.values[:, :, j]
        needs = np.flatnonzero(np.isnan(col).any(axis=1))
        counts["complete"] += col.shape[0] - needs.size
        for t in needs:
            vals, status = qc_timestep_fill(kept.lat, kept.lon, col[t], vgs[p], timestep_threshold)
            counts[status] += 1
            if status == "dropped":
                filled[t, :, j] = np.nan
                dropped.append((format_time(kept.times[t]), p))
            else:
                filled[t, :, j] = vals

    all_cities = sorted(set(table.city_ids))
    live = sorted(set(kept.city_ids))
    excluded = [c for c in all_cities if c not in live]
    city_vals = city_aggregate(filled, kept.city_ids, live)
    # city coordinate = mean of its retained stations
    owner = np.asarray(kept.city_ids)
    lat = np.array([kept.lat[owner == c].mean() for c in live])
    lon = np.array([kept.lon[owner == c].mean() for c in live])
    series = CitySeries(live, lat, lon, kept.times, city_vals, tuple(kept.pollutants))
    filled_table = StationTable(kept.station_ids, kept.city_ids, kept.lat, kept.lon, kept.times,
                                filled, tuple(kept.pollutants))
    report = {
        "stations_total": len(table.station_ids),
        "stations_removed": len(removals),
        "removals": removals,
        "cities_excluded": excluded,
        "timestep_status_counts": counts,
        "dropped_timesteps": len(dropped),
        "dropped": [{"time": t, "pollutant": p} for t, p in dropped],
        "variograms": {p: {"sill": v.sill, "range_km": v.range, "nugget": v.nugget,
                           "degenerate": v.degenerate} for p, v in vgs.items()},
    }
    if len(live) == 0 or not np.isfinite(city_vals).any():
        raise EmptyDatasetError("QC produced no valid city data")
    return QCResult(series, filled_table, vgs, report)
