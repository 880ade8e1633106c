"""Gridded meteorological fields and the ``MVGR`` binary container.

Layout: ``b"MVGR"``, four little-endian uint32 counts ``T, C, H, W``, a
uint32 byte length followed by a UTF-8 JSON metadata block (variable names,
grid spec, ISO timestamps), then ``T*C*H*W`` little-endian float32 values in
``[t][c][h][w]`` order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
import pandas as pd

MAGIC = b"MVGR"

UPPER_AIR = ("t", "u", "v", "q")
LEVELS = (1000, 925, 850)
SURFACE = ("t2m", "d2m", "u10", "v10", "u100", "v100", "tp")
VARIABLES = tuple(f"{v}{lev}" for v in UPPER_AIR for lev in LEVELS) + SURFACE


class GridFormatError(ValueError):
    pass


@dataclass
class MeteoGrid:
    variables: List[str]
    lat0: float
    lon0: float
    dlat: float
    dlon: float
    times: pd.DatetimeIndex  # UTC
    values: np.ndarray  # (T, C, H, W) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        T, C, H, W = self.values.shape
        if len(self.times) != T or len(self.variables) != C:
            raise GridFormatError(f"grid {self.values.shape} vs {len(self.times)} times / "
                                  f"{len(self.variables)} variables")
        if not np.all(np.isfinite(self.values)):
            raise GridFormatError("meteo grid contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    def lats(self) -> np.ndarray:
        return self.lat0 + self.dlat * np.arange(self.values.shape[2])

    def lons(self) -> np.ndarray:
        return self.lon0 + self.dlon * np.arange(self.values.shape[3])

    def align(self, times: pd.DatetimeIndex) -> np.ndarray:
        """Values at ``times`` (T', C, H, W); raises if any time is absent."""
        pos = self.times.get_indexer(times)
        if (pos < 0).any():
            missing = times[pos < 0][0]
            raise KeyError(f"meteo grid has no field for {missing}")
        return self.values[pos]

    def channel_stats(self):
        v = self.values.astype(np.float64)
        mean = v.mean(axis=(0, 2, 3))
        std = v.std(axis=(0, 2, 3))
        return mean, np.where(std < 1e-8, 1.0, std)


def _meta(grid: MeteoGrid) -> dict:
    return {
        "variables": list(grid.variables),
        "grid": {"lat0": grid.lat0, "lon0": grid.lon0, "dlat": grid.dlat, "dlon": grid.dlon},
        "times": [pd.Timestamp(t).tz_convert("UTC").strftime("%Y-%m-%dT%H:%M:%SZ") for t in grid.times],
    }


def write_grid(grid: MeteoGrid, path) -> None:
    T, C, H, W = grid.values.shape
    meta = json.dumps(_meta(grid), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", T, C, H, W))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())


def read_grid(path) -> MeteoGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise GridFormatError(f"{path}: bad magic {raw[:4]!r}")
    T, C, H, W = struct.unpack_from("<4I", raw, 4)
    (n,) = struct.unpack_from("<I", raw, 20)
    meta = json.loads(raw[24:24 + n].decode("utf-8"))
    body = raw[24 + n:]
    if len(body) != 4 * T * C * H * W:
        raise GridFormatError(f"{path}: expected {4 * T * C * H * W} data bytes, got {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(T, C, H, W).astype(np.float32)
    g = meta["grid"]
    times = pd.DatetimeIndex(pd.to_datetime(meta["times"], utc=True))
    return MeteoGrid(meta["variables"], g["lat0"], g["lon0"], g["dlat"], g["dlon"], times, values)
