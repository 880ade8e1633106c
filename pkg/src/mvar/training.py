"""Multi-step autoregressive training: rollout, step-weighted loss, Adam."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .model import HyperParams, Params, init_params, predict_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    tau: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 20
    batch_size: int = 64
    w_max: float = 5.0
    w_min: float = 0.1
    seed: int = 0
    lead_hours: int = 6
    loss: str = "mse"  # or "mae"
    grad_clip: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not self.w_max >= self.w_min > 0:
            raise ValueError("need w_max >= w_min > 0")
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lead_hours < 1:
            raise ValueError("epochs, batch_size and lead_hours must be >= 1")

    @classmethod
    def defaults_for(cls, use_meteo: bool, **overrides) -> "TrainConfig":
        """Mode-dependent defaults: the meteo-coupled model trains 10 epochs at batch 8."""
        base = dict(epochs=10, batch_size=8) if use_meteo else {}
        base.update(overrides)
        return cls.from_dict(base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def make_sw_weights(tau: int, w_max: float = 5.0, w_min: float = 0.1) -> np.ndarray:
    """Equally spaced, decreasing weights from ``w_max`` to ``w_min``."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if w_max < w_min:
        raise ValueError(f"w_max={w_max} < w_min={w_min}")
    if tau == 1:
        return np.array([float(w_max)])
    step = (w_max - w_min) / (tau - 1)
    # round away representation noise so (8, 5, 0.1) gives 4.3, 3.6, ... exactly
    return np.array([round(w_max - i * step, 12) for i in range(tau)])


def sw_loss(preds, targets, weights, kind: str = "mse"):
    """Step-weighted loss.

    ``preds``/``targets`` are sequences (or arrays) indexed by step, each
    (N, D) or (B, N, D).  Per step the squared error is averaged over
    pollutants, cities and batch; steps are combined with ``weights`` and
    divided by their sum.  Returns a Tensor when inputs are tracked, else
    a float.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(preds) != len(weights) or len(targets) != len(weights):
        raise nx.ShapeError(f"{len(preds)} preds / {len(targets)} targets / {len(weights)} weights")
    total = None
    for w, p, t in zip(weights, preds, targets):
        p, t = nx.as_tensor(p), nx.as_tensor(t)
        if p.shape != t.shape:
            raise nx.ShapeError(f"pred {p.shape} vs target {t.shape}")
        diff = nx.sub(p, t)
        err = nx.square(diff) if kind == "mse" else nx.absolute(diff)
        term = nx.scale(nx.reduce_mean(err), float(w))
        total = term if total is None else nx.add(total, term)
    total = nx.scale(total, 1.0 / float(weights.sum()))
    if total.tape is None:
        return float(total.value)
    return total


def rollout(x_prev, x_curr, params, hp: HyperParams, city_xy, tau: int,
            meteo: Optional[Sequence] = None, times: Optional[Sequence] = None):
    """Chain ``tau`` model steps; step g consumes the two previous states.

    ``meteo`` holds ``tau + 1`` grids (each (C,H,W) or (B,C,H,W)) so step g
    sees ``meteo[g-1], meteo[g]``; ``times[g-1]`` is the valid time of step g.
    Returns a list of ``tau`` predictions (Tensors).
    """
    if hp.use_meteo:
        if meteo is None or len(meteo) < tau + 1:
            raise ValueError(f"meteo mode needs {tau + 1} grids, got {0 if meteo is None else len(meteo)}")
        if times is None or len(times) < tau:
            raise ValueError("meteo mode needs valid times for every step")
    prev, curr = nx.as_tensor(x_prev), nx.as_tensor(x_curr)
    out = []
    for g in range(1, tau + 1):
        pair = (meteo[g - 1], meteo[g]) if hp.use_meteo else None
        t = times[g - 1] if times is not None else None
        nxt = predict_step(prev, curr, params, hp, city_xy, pair, t)
        out.append(nxt)
        prev, curr = curr, nxt
    return out


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Params, grads: Dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """In-place Adam update with decoupled weight decay."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise nx.NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2, lr = config.beta1, config.beta2, config.lr
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.weight_decay:
            p *= 1.0 - lr * config.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def _clip(grads: Dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        f = max_norm / total
        for g in grads.values():
            g *= f


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class RolloutDataset:
    """Normalised city states plus sample start indices.

    ``values`` is (T, N, D) on an hourly axis; sample ``i`` uses hours
    ``start - lead``, ``start`` as inputs and ``start + g*lead`` (g=1..tau)
    as targets.  ``meteo`` (T, C, H, W), if present, shares the hour axis.
    """

    values: np.ndarray
    starts: np.ndarray
    lead: int
    tau: int
    city_xy: np.ndarray
    times: np.ndarray
    meteo: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, idx: np.ndarray):
        s = self.starts[idx]
        x_prev = self.values[s - self.lead]
        x_curr = self.values[s]
        targets = [self.values[s + g * self.lead] for g in range(1, self.tau + 1)]
        meteo = times = None
        if self.meteo is not None:
            meteo = [self.meteo[s + g * self.lead] for g in range(self.tau + 1)]
        times = [self.times[s + g * self.lead] for g in range(1, self.tau + 1)]
        return x_prev, x_curr, targets, meteo, times

    def subset(self, idx) -> "RolloutDataset":
        return RolloutDataset(self.values, self.starts[np.asarray(idx, dtype=np.int64)], self.lead, self.tau,
                              self.city_xy, self.times, self.meteo)


def valid_starts(mask: np.ndarray, lead: int, tau: int, lo: int = 0, hi: Optional[int] = None) -> np.ndarray:
    """Start hours whose inputs and all targets are complete.

    ``mask`` is (T, N, D) validity; only starts in ``[lo, hi)`` whose whole
    window also lies in ``[lo, hi)`` are returned.
    """
    T = mask.shape[0]
    hi = T if hi is None else hi
    full = mask.reshape(T, -1).all(axis=1)
    out = []
    for s in range(max(lo + lead, 0), hi - tau * lead):
        if all(full[s + g * lead] for g in range(-1, tau + 1)):
            out.append(s)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def batch_loss_and_grads(params: Params, hp: HyperParams, data: RolloutDataset, idx: np.ndarray,
                         weights: np.ndarray, kind: str = "mse"):
    tape = nx.GradTape()
    tp = tape.watch(params)
    x_prev, x_curr, targets, meteo, times = data.batch(idx)
    preds = rollout(x_prev, x_curr, tp, hp, data.city_xy, data.tau, meteo, times)
    loss = sw_loss(preds, targets, weights, kind)
    grads = tape.backward(loss)
    return float(loss.value), grads


def evaluate_loss(params: Params, hp: HyperParams, data: RolloutDataset, weights: np.ndarray,
                  kind: str = "mse", batch_size: int = 256) -> float:
    total, n = 0.0, 0
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(data)))
        x_prev, x_curr, targets, meteo, times = data.batch(idx)
        preds = rollout(x_prev, x_curr, params, hp, data.city_xy, data.tau, meteo, times)
        total += sw_loss(preds, targets, weights, kind) * len(idx)
        n += len(idx)
    return total / max(n, 1)


@dataclass
class TrainResult:
    params: Params
    best_params: Params
    log: List[dict]
    best_epoch: int


def train(hp: HyperParams, config: TrainConfig, train_data: RolloutDataset,
          val_data: Optional[RolloutDataset] = None, params: Optional[Params] = None,
          progress: bool = False) -> TrainResult:
    """Mini-batch Adam over seeded shuffles; returns final and best parameters.

    The loss log has one ``train`` row per epoch (mean batch loss) and, when
    ``val_data`` is given, one ``val`` row.
    """
    config.validate()
    if len(train_data) == 0:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(hp, seed=config.seed)
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    state = AdamState.zeros(params)
    weights = make_sw_weights(config.tau, config.w_max, config.w_min)
    rows: List[dict] = []
    best, best_epoch, best_params = math.inf, -1, params
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_data))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads = batch_loss_and_grads(params, hp, train_data, idx, weights, config.loss)
            if config.grad_clip:
                _clip(grads, config.grad_clip)
            adam_step(params, grads, state, config)
            losses.append(loss * len(idx))
        train_loss = sum(losses) / len(order)
        rows.append({"epoch": epoch + 1, "split": "train", "loss": train_loss})
        score = train_loss
        if val_data is not None and len(val_data):
            score = evaluate_loss(params, hp, val_data, weights, config.loss)
            rows.append({"epoch": epoch + 1, "split": "val", "loss": score})
        if score < best:
            best, best_epoch = score, epoch + 1
            best_params = {k: v.copy() for k, v in params.items()}
        if progress:
            log.info("epoch %d train %.5f score %.5f", epoch + 1, train_loss, score)
    return TrainResult(params, best_params, rows, best_epoch)


def write_loss_log(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss"])
        w.writeheader()
        for r in rows:
            w.writerow({"epoch": r["epoch"], "split": r["split"], "loss": repr(float(r["loss"]))})
