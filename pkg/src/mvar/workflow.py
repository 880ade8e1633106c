"""Glue between data products, the model, training and the scheduler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .meteo import MeteoGrid
from .model import HyperParams, Params, normalized_coords, predict_step
from .series import CitySeries, NormStats, normalize_array
from .training import RolloutDataset, valid_starts


def hyperparams_for(series: CitySeries, meteo: Optional[MeteoGrid] = None, **overrides) -> HyperParams:
    """Fill data-dependent sizes (N, D, grid, coordinate frame) into HyperParams."""
    lat, lon = series.lat, series.lon
    span = max(float(np.ptp(lat)), float(np.ptp(lon)), 1e-3)
    base = dict(N=len(series.city_ids), D=len(series.pollutants),
                coord_origin=[float(lat.mean()), float(lon.mean())], coord_scale=span / 2.0)
    if meteo is not None:
        _, C, H, W = meteo.shape
        base.update(C=C, H=H, W=W, grid_lat0=meteo.lat0, grid_lon0=meteo.lon0,
                    grid_dlat=meteo.dlat, grid_dlon=meteo.dlon, use_meteo=True)
    base.update(overrides)
    hp = HyperParams(**base)
    hp.validate()
    return hp


@dataclass
class MeteoScaler:
    mean: np.ndarray  # (C,)
    std: np.ndarray

    @classmethod
    def fit(cls, grid: MeteoGrid, idx=None) -> "MeteoScaler":
        v = grid.values if idx is None else grid.values[idx]
        v = v.astype(np.float64)
        std = v.std(axis=(0, 2, 3))
        return cls(v.mean(axis=(0, 2, 3)), np.where(std < 1e-8, 1.0, std))

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean[:, None, None]) / self.std[:, None, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MeteoScaler":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


def aligned_meteo(series: CitySeries, grid: MeteoGrid, scaler: MeteoScaler) -> np.ndarray:
    return scaler.apply(grid.align(series.times))


def build_dataset(series: CitySeries, stats: NormStats, hp: HyperParams, lead: int, tau: int,
                  lo: int = 0, hi: Optional[int] = None, meteo: Optional[np.ndarray] = None) -> RolloutDataset:
    """Samples at every valid hourly start inside ``[lo, hi)``.

    ``meteo`` must already be normalised and aligned to ``series.times``.
    """
    norm = normalize_array(series.values, stats)
    starts = valid_starts(np.isfinite(norm), lead, tau, lo, hi)
    xy = normalized_coords(hp, series.lat, series.lon)
    times = series.times.tz_convert("UTC").tz_localize(None).to_numpy().astype("datetime64[s]")
    return RolloutDataset(np.nan_to_num(norm), starts, lead, tau, xy, times,
                          meteo if hp.use_meteo else None)


def forecast_states(params: Params, hp: HyperParams, dataset: RolloutDataset, idx) -> np.ndarray:
    """Untracked rollout predictions (len(idx), tau, N, D) in normalised units."""
    from .training import rollout
    x_prev, x_curr, _, meteo, times = dataset.batch(np.asarray(idx))
    preds = rollout(x_prev, x_curr, params, hp, dataset.city_xy, dataset.tau, meteo, times)
    return np.stack([p.value for p in preds], axis=1)


def step_model(params: Params, hp: HyperParams, city_xy: np.ndarray, lead: int, init_time=None,
               meteo_at: Optional[Callable[[int], np.ndarray]] = None) -> Callable:
    """Scheduler callable ``(x_back, x_now, cursor) -> x_next`` for one checkpoint.

    In meteo mode ``meteo_at(offset_hours)`` supplies normalised grids at the
    cursor and at ``cursor + lead``.
    """
    t0 = pd.Timestamp(init_time) if init_time is not None else None

    def f(x_back, x_now, cursor):
        pair = time = None
        if hp.use_meteo:
            if meteo_at is None or t0 is None:
                raise ValueError("meteo-coupled model needs a meteo source and init time")
            pair = (meteo_at(cursor), meteo_at(cursor + lead))
            time = t0 + pd.Timedelta(hours=cursor + lead)
        return predict_step(x_back, x_now, params, hp, city_xy, pair, time).value

    return f
