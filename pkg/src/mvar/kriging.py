"""Ordinary Kriging with an exponential semivariogram on great-circle distances."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import curve_fit

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0


class DegenerateGeometryError(ValueError):
    """The Kriging system is singular (e.g. duplicate station locations)."""


@dataclass(frozen=True)
class Variogram:
    sill: float
    range: float  # km
    nugget: float = 0.0
    model: str = "exponential"
    degenerate: bool = False

    def __post_init__(self):
        if not self.sill > 0 or not self.range > 0 or self.nugget < 0:
            raise ValueError(f"invalid variogram {self}")

    def __call__(self, h):
        h = np.asarray(h, dtype=np.float64)
        g = self.sill * (1.0 - np.exp(-h / self.range))
        return g + self.nugget * (h > 0)


def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(a, dtype=np.float64)) for a in (lat1, lon1, lat2, lon2))
    a = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def pairwise_km(lat, lon):
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    return haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])


def kriging_weights(target: Tuple[float, float], lat, lon, variogram: Variogram):
    """Solve the ordinary Kriging system; returns (weights, lagrange, gamma0)."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    n = lat.size
    if n < 2:
        raise ValueError("ordinary Kriging needs at least 2 stations")
    a = np.ones((n + 1, n + 1))
    a[:n, :n] = variogram(pairwise_km(lat, lon))
    a[n, n] = 0.0
    g0 = variogram(haversine_km(lat, lon, target[0], target[1]))
    b = np.append(g0, 1.0)
    try:
        if np.linalg.cond(a) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("singular Kriging system (duplicate station locations?)") from exc
    return sol[:n], sol[n], g0


def krige_estimate(target: Tuple[float, float], lat, lon, values, variogram: Variogram):
    """Ordinary-Kriging estimate at ``target`` = (lat, lon).

    Returns ``(estimate, kriging_variance)``.
    """
    w, mu, g0 = kriging_weights(target, lat, lon, variogram)
    return float(w @ np.asarray(values, dtype=np.float64)), float(w @ g0 + mu)


def idw_estimate(target, lat, lon, values, power: float = 2.0) -> float:
    """Inverse-distance weighting; exact at coincident stations."""
    d = haversine_km(lat, lon, target[0], target[1])
    values = np.asarray(values, dtype=np.float64)
    if np.any(d < 1e-9):
        return float(values[np.argmin(d)])
    w = 1.0 / d ** power
    return float(w @ values / w.sum())


def default_variogram(values=None) -> Variogram:
    sill = 1.0
    if values is not None:
        v = np.asarray(values, dtype=np.float64)
        v = v[np.isfinite(v)]
        if v.size > 1 and v.var() > 1e-12:
            sill = float(v.var())
    return Variogram(sill=sill, range=200.0, nugget=0.0, degenerate=True)


def _exp_model(h, sill, rng):
    return sill * (1.0 - np.exp(-h / rng))


def empirical_semivariogram(lat, lon, snapshots, n_bins: int = 10):
    """Binned semivariance of complete snapshots (S stations x K samples).

    Bins are equal-width up to half the maximum pairwise distance. Returns
    ``(bin_centres, gamma, pair_counts)`` for non-empty bins.
    """
    snaps = np.atleast_2d(np.asarray(snapshots, dtype=np.float64))
    d = pairwise_km(lat, lon)
    iu = np.triu_indices(d.shape[0], k=1)
    dist = d[iu]
    hmax = dist.max() / 2.0
    edges = np.linspace(0.0, hmax, n_bins + 1)
    # snaps: (K, S)
    sq = 0.5 * (snaps[:, iu[0]] - snaps[:, iu[1]]) ** 2  # (K, P)
    centres, gam, counts = [], [], []
    for i in range(n_bins):
        sel = (dist > edges[i]) & (dist <= edges[i + 1]) if i else (dist >= 0) & (dist <= edges[1])
        if not sel.any():
            continue
        centres.append(dist[sel].mean())
        gam.append(sq[:, sel].mean())
        counts.append(int(sel.sum()) * sq.shape[0])
    return np.array(centres), np.array(gam), np.array(counts)


def fit_variogram(lat, lon, snapshots, n_bins: int = 10, min_pairs: int = 50) -> Variogram:
    """Least-squares exponential fit to the empirical semivariogram.

    ``snapshots`` is (K, S): K complete timesteps over S stations. Falls
    back to :func:`default_variogram` (flagged ``degenerate``) when there are
    too few pairs, the field is constant, or the fit fails.
    """
    snaps = np.atleast_2d(np.asarray(snapshots, dtype=np.float64))
    lat = np.asarray(lat, dtype=np.float64)
    s = lat.size
    n_pairs = snaps.shape[0] * s * (s - 1) // 2
    if n_pairs < min_pairs or s < 3:
        return default_variogram(snaps)
    sample_var = float(snaps.var())
    if sample_var < 1e-12:
        return default_variogram(snaps)
    h, g, counts = empirical_semivariogram(lat, lon, snaps, n_bins)
    if h.size < 3:
        return default_variogram(snaps)
    try:
        (sill, rng), _ = curve_fit(
            _exp_model, h, g, p0=(max(g.max(), 1e-6), max(h.mean(), 1.0)),
            sigma=1.0 / np.sqrt(counts), bounds=([1e-12, 1e-3], [np.inf, 1e5]), maxfev=5000)
    except (RuntimeError, ValueError) as exc:
        log.warning("variogram fit failed (%s); using defaults", exc)
        return default_variogram(snaps)
    if not (np.isfinite(sill) and np.isfinite(rng)) or sill <= 0 or rng <= 0:
        return default_variogram(snaps)
    return Variogram(sill=float(sill), range=float(rng), nugget=0.0)
