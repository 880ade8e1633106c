"""Fixed-init-time RMSE evaluation with horizon buckets."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .series import CitySeries

# (label, first lead hour, last lead hour)
BUCKETS: Tuple[Tuple[str, int, int], ...] = (
    ("1-24h", 1, 24),
    ("25-48h", 25, 48),
    ("49-72h", 49, 72),
    ("97-120h", 97, 120),
)
INIT_HOURS_LOCAL = (8, 20)


@dataclass
class EvalReport:
    pollutants: List[str]
    resolution_hours: int
    bucket_rmse: Dict[str, Dict[str, float]]  # pollutant -> bucket -> rmse
    bucket_n: Dict[str, Dict[str, int]]
    step_rmse: np.ndarray  # (steps, D), NaN where no data
    step_n: np.ndarray  # (steps, D)
    init_times: List = field(default_factory=list)

    def rows(self):
        for p in self.pollutants:
            for label, _, _ in BUCKETS:
                if label in self.bucket_rmse[p]:
                    yield p, label, self.bucket_rmse[p][label], self.bucket_n[p][label]

    def write_csv(self, path, curve_path=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pollutant", "bucket", "rmse", "n"])
            for p, b, r, n in self.rows():
                w.writerow([p, b, repr(float(r)), n])
        if curve_path is not None:
            with open(curve_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "lead_hours", "pollutant", "rmse", "n"])
                for s in range(self.step_rmse.shape[0]):
                    for j, p in enumerate(self.pollutants):
                        w.writerow([s + 1, (s + 1) * self.resolution_hours, p,
                                    repr(float(self.step_rmse[s, j])), int(self.step_n[s, j])])


def step_buckets(n_steps: int, resolution_hours: int) -> Dict[str, List[int]]:
    """1-based step numbers falling into each bucket by lead hour."""
    out = {}
    for label, lo, hi in BUCKETS:
        steps = [s for s in range(1, n_steps + 1) if lo <= s * resolution_hours <= hi]
        if steps:
            out[label] = steps
    return out


def rmse_buckets(preds, truth, resolution_hours: int = 6, pollutants: Sequence[str] = None,
                 pooling: str = "pooled", init_times=None) -> EvalReport:
    """RMSE per pollutant and bucket for aligned (inits, steps, N, D) arrays.

    ``pooling="pooled"`` pools squared errors over inits, cities and in-bucket
    steps before one square root; ``"mean_of_steps"`` averages per-step RMSEs.
    NaN ground truth drops that entry.
    """
    preds = np.asarray(preds, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if preds.shape != truth.shape or preds.ndim != 4:
        raise ValueError(f"alignment mismatch: preds {preds.shape} vs truth {truth.shape}")
    _, S, _, D = preds.shape
    pollutants = list(pollutants) if pollutants is not None else [f"v{j}" for j in range(D)]
    sq = (preds - truth) ** 2
    ok = np.isfinite(sq)
    sq = np.where(ok, sq, 0.0)
    step_sse = sq.sum(axis=(0, 2))  # (S, D)
    step_n = ok.sum(axis=(0, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        step_rmse = np.sqrt(step_sse / step_n)
    brmse: Dict[str, Dict[str, float]] = {p: {} for p in pollutants}
    bn: Dict[str, Dict[str, int]] = {p: {} for p in pollutants}
    for label, steps in step_buckets(S, resolution_hours).items():
        idx = np.asarray(steps) - 1
        for j, p in enumerate(pollutants):
            n = int(step_n[idx, j].sum())
            if n == 0:
                continue
            if pooling == "pooled":
                r = float(np.sqrt(step_sse[idx, j].sum() / n))
            elif pooling == "mean_of_steps":
                r = float(np.nanmean(step_rmse[idx, j]))
            else:
                raise ValueError(f"unknown pooling {pooling!r}")
            brmse[p][label] = r
            bn[p][label] = n
    return EvalReport(pollutants, resolution_hours, brmse, bn, step_rmse, step_n,
                      list(init_times) if init_times is not None else [])


def pooled_rmse(preds, truth, axis=None) -> np.ndarray:
    """RMSE pooled over every axis except ``axis`` (kept), ignoring NaN truth."""
    sq = (np.asarray(preds, dtype=np.float64) - np.asarray(truth, dtype=np.float64)) ** 2
    if axis is None:
        return np.sqrt(np.nanmean(sq))
    other = tuple(i for i in range(sq.ndim) if i != axis % sq.ndim)
    return np.sqrt(np.nanmean(sq, axis=other))


def relative_rmse(report: EvalReport, baseline: EvalReport) -> Dict[str, Dict[str, float]]:
    """Bucket-wise ratio report / baseline."""
    out: Dict[str, Dict[str, float]] = {}
    for p in report.pollutants:
        out[p] = {}
        for b, r in report.bucket_rmse[p].items():
            base = baseline.bucket_rmse[p].get(b)
            if base is None:
                raise ValueError(f"baseline has no bucket {b} for {p}")
            if base == 0:
                raise ZeroDivisionError(f"zero baseline RMSE for {p} {b}")
            out[p][b] = r / base
    return out


def relative_curve(curve: np.ndarray, baseline_curve: np.ndarray) -> np.ndarray:
    baseline_curve = np.asarray(baseline_curve, dtype=np.float64)
    if np.any(baseline_curve == 0):
        raise ZeroDivisionError("zero baseline RMSE entry")
    return np.asarray(curve, dtype=np.float64) / baseline_curve


def select_init_times(series: CitySeries, local_offset_hours: float = 8.0,
                      history_hours: int = 6, horizon_hours: int = 0, resolution_hours: int = 6,
                      hours: Sequence[int] = INIT_HOURS_LOCAL) -> List[int]:
    """Indices of hours at local 08:00/20:00 whose inputs and targets are complete.

    Inputs are ``t - history_hours`` and ``t``; targets are every
    ``resolution_hours`` up to ``horizon_hours``.
    """
    full = np.isfinite(series.values).reshape(len(series.times), -1).all(axis=1)
    local = series.times + pd.Timedelta(hours=local_offset_hours)
    out = []
    T = len(series.times)
    need = [-history_hours, 0] + list(range(resolution_hours, horizon_hours + 1, resolution_hours))
    for i in np.flatnonzero(np.isin(local.hour, hours) & (local.minute == 0)):
        pos = [i + k for k in need]
        if all(0 <= p < T and full[p] for p in pos):
            out.append(int(i))
    return out


def persistence_baseline(values: np.ndarray, init_idx: Sequence[int], tau: int) -> np.ndarray:
    """(inits, tau, N, D) copies of the state at each init."""
    v = np.asarray(values, dtype=np.float64)
    x0 = v[np.asarray(init_idx, dtype=int)]
    return np.repeat(x0[:, None], tau, axis=1)


def gather_truth(values: np.ndarray, init_idx: Sequence[int], tau: int, resolution_hours: int) -> np.ndarray:
    """(inits, tau, N, D) targets at ``init + g*resolution``; beyond the series is NaN."""
    v = np.asarray(values, dtype=np.float64)
    T = v.shape[0]
    out = np.full((len(init_idx), tau) + v.shape[1:], np.nan)
    for a, i in enumerate(init_idx):
        for g in range(1, tau + 1):
            k = i + g * resolution_hours
            if k < T:
                out[a, g - 1] = v[k]
    return out
