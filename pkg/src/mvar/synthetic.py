"""Seeded desk-scale datasets with known structure.

Particulates are an advected background field plus a term driven by a
large-scale stagnation index that also appears in the humidity/dew-point
channels, so meteorology carries information the pollutant history lacks.
O3 follows a diurnal cycle, NO2 anticorrelates with it, SO2/CO are slow
local AR(1) processes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.ndimage import map_coordinates

from .meteo import VARIABLES, MeteoGrid, write_grid
from .qc import StationTable, write_station_csv
from .series import POLLUTANTS, CitySeries, write_city_csv


@dataclass
class SynthConfig:
    n_cities: int = 12
    stations_per_city: int = 3
    days: int = 180
    H: int = 8
    W: int = 8
    seed: int = 0
    start: str = "2023-01-01T00:00:00Z"
    lat0: float = 36.0
    lon0: float = 113.0
    dlat: float = 0.5
    dlon: float = 0.5
    local_offset_hours: float = 8.0
    # particulates
    pm_base: float = 70.0
    pm_ar: float = 0.97
    pm_noise: float = 2.0
    stagnation_gain: float = 30.0
    stagnation_ar: float = 0.9
    advection: float = 1.0
    # O3 / NO2 diurnal pair
    o3_base: float = 80.0
    o3_amplitude: float = 40.0
    o3_noise: float = 2.0
    no2_base: float = 40.0
    no2_coupling: float = 0.3
    # slow local processes
    so2_base: float = 10.0
    co_base: float = 1.0
    local_ar: float = 0.995
    local_noise: float = 0.1  # relative innovation scale
    station_noise: float = 0.02  # relative to pollutant base
    # missingness
    missing_rate: float = 0.0  # independent station-hour-pollutant cells
    outage_rate: float = 0.0  # whole timesteps missing at every station

    def validate(self):
        for name in ("n_cities", "stations_per_city", "days", "H", "W"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("missing_rate", "outage_rate"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthData:
    stations: StationTable
    truth: CitySeries
    meteo: MeteoGrid
    config: SynthConfig


def _ar1(rng, n, phi, sd, size=()):
    out = np.empty((n,) + tuple(size))
    innov = sd * np.sqrt(1 - phi ** 2)
    x = rng.normal(0.0, sd, size)
    for t in range(n):
        x = phi * x + rng.normal(0.0, innov, size)
        out[t] = x
    return out


def generate(config: SynthConfig) -> SynthData:
    config.validate()
    rng = np.random.default_rng(config.seed)
    T = config.days * 24
    H, W, N = config.H, config.W, config.n_cities
    times = pd.date_range(pd.Timestamp(config.start), periods=T, freq="h")
    if times.tz is None:
        times = times.tz_localize("UTC")
    local_hour = ((times.hour + config.local_offset_hours) % 24).to_numpy(dtype=np.float64)
    doy = times.dayofyear.to_numpy(dtype=np.float64)

    # city and station placement (grid index space keeps one cell margin)
    gy = rng.uniform(1.0, H - 2.0, N)
    gx = rng.uniform(1.0, W - 2.0, N)
    c_lat = config.lat0 + config.dlat * gy
    c_lon = config.lon0 + config.dlon * gx
    city_ids = [f"C{i:02d}" for i in range(N)]

    # large-scale drivers
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    u_reg = 2.0 + _ar1(rng, T, 0.98, 2.5)
    v_reg = _ar1(rng, T, 0.98, 2.5)
    s_mean = _ar1(rng, T, config.stagnation_ar, 1.0)
    s_tilt = _ar1(rng, T, config.stagnation_ar, 0.4, (2,))
    stag = s_mean[:, None, None] + s_tilt[:, 0, None, None] * yy + s_tilt[:, 1, None, None] * xx
    u = u_reg[:, None, None] * (1.0 + 0.2 * yy)
    v = v_reg[:, None, None] * (1.0 + 0.2 * xx)
    temp = (5.0 + 10.0 * np.sin(2 * np.pi * (local_hour - 9.0) / 24.0)
            - 10.0 * np.cos(2 * np.pi * (doy - 15) / 365.25))[:, None, None] - 2.0 * yy

    # advected particulate background on the grid
    km_per_cell = 111.0 * config.dlat
    plume = np.exp(-((yy - 0.2) ** 2 + (xx + 0.1) ** 2) / 0.3)
    emission = config.pm_base * 0.01 * (plume - plume.mean())
    bg = np.empty((T, H, W))
    b = np.full((H, W), config.pm_base)
    iy, ix = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    for t in range(T):
        # semi-Lagrangian: value arrives from upwind (m/s -> cells/hour)
        dy = config.advection * v[t] * 3.6 / km_per_cell
        dx = config.advection * u[t] * 3.6 / km_per_cell
        upwind = map_coordinates(b, [iy - dy, ix - dx], order=1, mode="nearest")
        b = (config.pm_base + config.pm_ar * (upwind - config.pm_base) + emission
             + rng.normal(0.0, config.pm_noise, (H, W)))
        bg[t] = b

    def at_cities(field):  # (T, H, W) -> (T, N)
        out = np.empty((field.shape[0], N))
        for i in range(N):
            y0, x0 = int(gy[i]), int(gx[i])
            fy, fx = gy[i] - y0, gx[i] - x0
            out[:, i] = ((1 - fy) * (1 - fx) * field[:, y0, x0] + (1 - fy) * fx * field[:, y0, x0 + 1]
                         + fy * (1 - fx) * field[:, y0 + 1, x0] + fy * fx * field[:, y0 + 1, x0 + 1])
        return out

    stag_c = at_cities(stag)
    pm25 = at_cities(bg) + config.stagnation_gain * stag_c
    pm10 = 1.6 * pm25 + _ar1(rng, T, 0.95, 5.0, (N,))
    o3_phase = rng.uniform(-1.0, 1.0, N)
    o3 = (config.o3_base + config.o3_amplitude
          * np.sin(2 * np.pi * (local_hour[:, None] - 9.0 - o3_phase[None, :]) / 24.0)
          + _ar1(rng, T, 0.9, config.o3_noise, (N,)))
    no2 = (config.no2_base - config.no2_coupling * (o3 - config.o3_base)
           + _ar1(rng, T, 0.9, 2.0, (N,)))
    so2 = config.so2_base * (1.0 + _ar1(rng, T, config.local_ar, 3 * config.local_noise, (N,)))
    co = config.co_base * (1.0 + _ar1(rng, T, config.local_ar, 3 * config.local_noise, (N,)))
    city = np.stack([pm25, pm10, so2, no2, co, o3], axis=-1)
    city = np.maximum(city, 0.0)

    # meteorological channels (T, 19, H, W)
    chans = []
    for var in ("t", "u", "v", "q"):
        for k, lev in enumerate((1000, 925, 850)):
            if var == "t":
                chans.append(temp - 3.0 * k)
            elif var == "u":
                chans.append(u * (1.0 + 0.3 * k))
            elif var == "v":
                chans.append(v * (1.0 + 0.3 * k))
            else:
                chans.append(6.0 + 2.0 * stag - 0.5 * k)
    chans += [temp + 1.0, temp - 6.0 + 3.0 * stag, u * 0.8, v * 0.8, u * 1.1, v * 1.1,
              np.maximum(0.0, -stag - 1.0)]
    mvals = np.stack(chans, axis=1).astype(np.float32)
    meteo = MeteoGrid(list(VARIABLES), config.lat0, config.lon0, config.dlat, config.dlon, times, mvals)

    # stations
    S = config.stations_per_city
    st_ids, st_city, st_lat, st_lon = [], [], [], []
    scales = np.array([config.pm_base, 1.6 * config.pm_base, config.so2_base, config.no2_base,
                       config.co_base, config.o3_base])
    st_vals = np.empty((T, N * S, len(POLLUTANTS)))
    for i in range(N):
        for k in range(S):
            j = i * S + k
            st_ids.append(f"{city_ids[i]}S{k}")
            st_city.append(city_ids[i])
            st_lat.append(float(c_lat[i] + rng.uniform(-0.05, 0.05)))
            st_lon.append(float(c_lon[i] + rng.uniform(-0.05, 0.05)))
            noise = rng.normal(0.0, 1.0, (T, len(POLLUTANTS))) * config.station_noise * scales
            st_vals[:, j] = np.maximum(city[:, i] + noise, 0.0)
    if config.missing_rate > 0:
        st_vals[rng.random(st_vals.shape) < config.missing_rate] = np.nan
    if config.outage_rate > 0:
        st_vals[rng.random(T) < config.outage_rate] = np.nan
    stations = StationTable(st_ids, st_city, np.array(st_lat), np.array(st_lon), times, st_vals)
    truth = CitySeries(city_ids, c_lat, c_lon, times, city)
    return SynthData(stations, truth, meteo, config)


def write_outputs(data: SynthData, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "stations": out / "stations.csv",
        "meteo": out / "meteo.mvgr",
        "truth": out / "truth_city.csv",
    }
    write_station_csv(data.stations, paths["stations"])
    write_grid(data.meteo, paths["meteo"])
    write_city_csv(data.truth, paths["truth"])
    (out / "synth_config.json").write_text(json.dumps(asdict(data.config), indent=1, sort_keys=True))
    return {k: str(v) for k, v in paths.items()}
