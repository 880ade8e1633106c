"""City-level series, normalisation statistics and their file formats."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

POLLUTANTS = ("pm25", "pm10", "so2", "no2", "co", "o3")
DEGENERATE_STD = 1e-8
NORM_STATS_VERSION = 1


class EmptyDatasetError(ValueError):
    pass


@dataclass
class CitySeries:
    """Hourly concentrations ``values[t, city, pollutant]``; invalid entries are NaN."""

    city_ids: List[str]
    lat: np.ndarray
    lon: np.ndarray
    times: pd.DatetimeIndex  # tz-aware UTC, hourly
    values: np.ndarray
    pollutants: Sequence[str] = POLLUTANTS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        T, N, D = self.values.shape
        if len(self.times) != T or len(self.city_ids) != N or len(self.pollutants) != D:
            raise ValueError(f"CitySeries shape {self.values.shape} vs {len(self.times)} times, "
                             f"{len(self.city_ids)} cities, {len(self.pollutants)} pollutants")
        if T > 1 and not (np.diff(self.times.asi8) > 0).all():
            raise ValueError("times must be strictly increasing")

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "CitySeries":
        return CitySeries(list(self.city_ids), self.lat.copy(), self.lon.copy(), self.times,
                          values, tuple(self.pollutants))

    def reindex_hourly(self) -> "CitySeries":
        """Insert all-NaN rows for hours missing from a gappy time axis."""
        full = pd.date_range(self.times[0], self.times[-1], freq="h")
        if len(full) == len(self.times):
            return self
        pos = full.get_indexer(self.times)
        v = np.full((len(full),) + self.values.shape[1:], np.nan)
        v[pos] = self.values
        return CitySeries(list(self.city_ids), self.lat, self.lon, full, v, tuple(self.pollutants))

    def select_cities(self, idx) -> "CitySeries":
        idx = np.asarray(idx)
        return CitySeries([self.city_ids[i] for i in idx], self.lat[idx], self.lon[idx], self.times,
                          self.values[:, idx], tuple(self.pollutants))

    def slice_time(self, lo: int, hi: int) -> "CitySeries":
        return CitySeries(list(self.city_ids), self.lat, self.lon, self.times[lo:hi],
                          self.values[lo:hi], tuple(self.pollutants))


@dataclass
class NormStats:
    mean: np.ndarray  # (N, D)
    std: np.ndarray  # (N, D), degenerate entries clamped to 1
    degenerate: np.ndarray = field(default=None)
    city_ids: Optional[List[str]] = None
    pollutants: Sequence[str] = POLLUTANTS

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(self.mean.shape, dtype=bool)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if (self.std < 0).any():
            raise ValueError("negative std")

    def to_dict(self) -> dict:
        return {
            "version": NORM_STATS_VERSION,
            "city_ids": self.city_ids,
            "pollutants": list(self.pollutants),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "degenerate": self.degenerate.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        if d.get("version") != NORM_STATS_VERSION:
            raise ValueError(f"unsupported NormStats version {d.get('version')!r}")
        return cls(np.array(d["mean"]), np.array(d["std"]), np.array(d["degenerate"]),
                   d.get("city_ids"), tuple(d.get("pollutants", POLLUTANTS)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_norm_stats(train: CitySeries) -> NormStats:
    """Population mean/std over time of valid entries, per (city, pollutant)."""
    v = train.values
    valid = np.isfinite(v)
    counts = valid.sum(axis=0)
    if (counts < 2).any():
        bad = np.argwhere(counts < 2)[0]
        raise ValueError(f"fewer than 2 valid entries for city {train.city_ids[bad[0]]}, "
                         f"pollutant {train.pollutants[bad[1]]}")
    mean = np.nanmean(v, axis=0)
    std = np.nanstd(v, axis=0)
    degenerate = std < DEGENERATE_STD
    std = np.where(degenerate, 1.0, std)
    return NormStats(mean, std, degenerate, list(train.city_ids), tuple(train.pollutants))


def _check(x: np.ndarray, stats: NormStats):
    if x.shape[-2:] != stats.mean.shape:
        raise ValueError(f"values {x.shape} do not match stats {stats.mean.shape}")


def normalize_array(x, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check(x, stats)
    return (x - stats.mean) / stats.std


def denormalize_array(x, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check(x, stats)
    return x * stats.std + stats.mean


def normalize(series: CitySeries, stats: NormStats) -> CitySeries:
    return series.with_values(normalize_array(series.values, stats))


def denormalize(series: CitySeries, stats: NormStats) -> CitySeries:
    return series.with_values(denormalize_array(series.values, stats))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def parse_times(col, local_offset_hours: float = 8.0) -> pd.DatetimeIndex:
    """ISO-8601 strings to UTC; naive stamps are read as local time at ``local_offset_hours``."""
    col = pd.Series(col, dtype="string")
    has_tz = col.str.contains(r"(?:Z|[+-]\d\d:?\d\d)$", regex=True)
    out = pd.Series(pd.NaT, index=col.index, dtype="datetime64[ns, UTC]")
    if has_tz.any():
        out[has_tz] = pd.to_datetime(col[has_tz], utc=True, format="ISO8601")
    if (~has_tz).any():
        naive = pd.to_datetime(col[~has_tz], format="ISO8601")
        out[~has_tz] = (naive - pd.Timedelta(hours=local_offset_hours)).dt.tz_localize("UTC")
    return pd.DatetimeIndex(out)


def format_time(ts) -> str:
    return pd.Timestamp(ts).tz_convert("UTC").strftime("%Y-%m-%dT%H:%M:%SZ")


def write_city_csv(series: CitySeries, path, meta: Optional[dict] = None) -> None:
    """``time,city_id,<pollutants>`` rows plus a ``<path>.meta.json`` sidecar."""
    T, N, D = series.shape
    times = np.repeat([format_time(t) for t in series.times], N)
    df = pd.DataFrame({"time": times, "city_id": np.tile(series.city_ids, T)})
    flat = series.values.reshape(T * N, D)
    for j, name in enumerate(series.pollutants):
        df[name] = flat[:, j]
    df.to_csv(path, index=False, float_format="%.17g", na_rep="")
    sidecar = {
        "cities": [{"city_id": c, "lat": float(la), "lon": float(lo)}
                   for c, la, lo in zip(series.city_ids, series.lat, series.lon)],
        "pollutants": list(series.pollutants),
    }
    if meta:
        sidecar.update(meta)
    Path(str(path) + ".meta.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def read_city_csv(path, meta_path=None) -> CitySeries:
    meta_path = Path(meta_path or str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text())
    cities = [c["city_id"] for c in meta["cities"]]
    pollutants = tuple(meta.get("pollutants", POLLUTANTS))
    df = pd.read_csv(path, dtype={"city_id": str, "time": str}, float_precision="round_trip")
    times = parse_times(df["time"])
    uniq = pd.DatetimeIndex(sorted(set(times)))
    ti = uniq.get_indexer(times)
    index = {c: i for i, c in enumerate(cities)}
    ci = np.array([index[c] for c in df["city_id"]])
    values = np.full((len(uniq), len(cities), len(pollutants)), np.nan)
    values[ti, ci] = df[list(pollutants)].to_numpy(dtype=np.float64)
    series = CitySeries(cities, [c["lat"] for c in meta["cities"]], [c["lon"] for c in meta["cities"]],
                        uniq, values, pollutants)
    return series.reindex_hourly()
