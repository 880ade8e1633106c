"""MVAR network: embedding, positional/time encodings, meteorological
downsampler, stacked meteorology-coupled spatial transformer blocks and the
residual delta head.

Weights are stored in ``input x output`` layout and applied as ``x @ W``.
Parameters live in a flat ``{name: array}`` dict; forward functions accept
either raw arrays or tape-tracked :class:`~mvar.numerics.Tensor` values.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import numerics as nx
from .numerics import Tensor, ShapeError

Params = Dict[str, np.ndarray]


@dataclass
class HyperParams:
    """Architecture sizes.  ``d_e = d_in + d_pa``; ``d_pm == d_pa`` because
    cities and grid points share one coordinate projector."""

    N: int = 75
    D: int = 6
    C: int = 19
    H: int = 32
    W: int = 32
    L: int = 3
    d_in: int = 112
    d_pa: int = 16
    d_pm: int = 16
    d_t: int = 32
    heads: int = 4
    ffn_mult: int = 4
    ds_hidden: int = 64
    use_meteo: bool = False
    # coordinate frame for the shared lat/lon projector
    coord_origin: List[float] = field(default_factory=lambda: [39.0, 116.0])
    coord_scale: float = 5.0
    # meteorological grid spec (degrees)
    grid_lat0: float = 35.0
    grid_lon0: float = 110.0
    grid_dlat: float = 0.25
    grid_dlon: float = 0.25
    ln_eps: float = 1e-5

    @property
    def d_e(self) -> int:
        return self.d_in + self.d_pa

    def validate(self) -> None:
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.d_pm != self.d_pa:
            raise ValueError("d_pm must equal d_pa (shared coordinate projector)")
        if self.d_e % self.heads:
            raise ValueError(f"d_e={self.d_e} not divisible by heads={self.heads}")
        if self.use_meteo and (self.H % 4 or self.W % 4):
            raise ShapeError(f"grid {self.H}x{self.W} not divisible by 4")
        if self.d_t % 4:
            raise ValueError("d_t must be a multiple of 4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def param_shapes(hp: HyperParams) -> Dict[str, tuple]:
    hp.validate()
    de, din, D = hp.d_e, hp.d_in, hp.D
    s = {
        "embed.weight": (2 * D, din),
        "embed.bias": (din,),
        "pos.weight": (2, hp.d_pa),
        "pos.bias": (hp.d_pa,),
        "sa0.wq": (de, de),
        "sa0.wk": (de, de),
        "sa0.wv": (de, de),
        "sa0.wo": (de, din),
    }
    for j in range(hp.L):
        q_in = din if j == 0 else de
        kv_in = de if hp.use_meteo else q_in
        p = f"block{j}."
        s[p + "cross.wq"] = (q_in, de)
        s[p + "cross.wk"] = (kv_in, de)
        s[p + "cross.wv"] = (kv_in, de)
        s[p + "norm.gain"] = (de,)
        s[p + "norm.bias"] = (de,)
        for ffn in ("ffn1", "ffn2"):
            s[p + ffn + ".norm.gain"] = (de,)
            s[p + ffn + ".norm.bias"] = (de,)
            s[p + ffn + ".w1"] = (de, hp.ffn_mult * de)
            s[p + ffn + ".b1"] = (hp.ffn_mult * de,)
            s[p + ffn + ".w2"] = (hp.ffn_mult * de, de)
            s[p + ffn + ".b2"] = (de,)
        s[p + "self.wq"] = (de, de)
        s[p + "self.wk"] = (de, de)
        s[p + "self.wv"] = (de, de)
    s["head.w1"] = (hp.L * de, de)
    s["head.b1"] = (de,)
    s["head.w2"] = (de, D)
    if hp.use_meteo:
        chans = [2 * hp.C + hp.d_pm, hp.ds_hidden, de]
        for b in range(2):
            c_in, c_out = chans[b], chans[b + 1]
            p = f"ds{b}."
            s[p + "conv1"] = (c_out, c_in, 3, 3)
            s[p + "conv1_bias"] = (c_out,)
            s[p + "norm.gain"] = (c_out,)
            s[p + "norm.bias"] = (c_out,)
            s[p + "te.weight"] = (hp.d_t, c_out)
            s[p + "te.bias"] = (c_out,)
            s[p + "conv2"] = (c_out, c_out, 3, 3)
            s[p + "conv2_bias"] = (c_out,)
            s[p + "skip"] = (c_out, c_in, 1, 1)
    return s


def _fan_in(name: str, shape: tuple) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_params(hp: HyperParams, seed: int = 0) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(hp)
    params: Params = {}
    for name in shapes:  # insertion order is fixed, so the RNG stream is deterministic
        shape = shapes[name]
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith("bias") or name.endswith(".b1") or name.endswith(".b2"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------

def normalized_coords(hp: HyperParams, lat, lon) -> np.ndarray:
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    return np.stack([(lat - hp.coord_origin[0]) / hp.coord_scale,
                     (lon - hp.coord_origin[1]) / hp.coord_scale], axis=-1)


def grid_coords(hp: HyperParams) -> np.ndarray:
    """(H*W, 2) normalised coordinates of grid points in row-major order."""
    return _grid_coords(hp.H, hp.W, hp.grid_lat0, hp.grid_lon0, hp.grid_dlat, hp.grid_dlon,
                        tuple(hp.coord_origin), hp.coord_scale)


@lru_cache(maxsize=16)
def _grid_coords(H, W, lat0, lon0, dlat, dlon, origin, scale):
    lat = lat0 + dlat * np.arange(H)
    lon = lon0 + dlon * np.arange(W)
    la, lo = np.meshgrid(lat, lon, indexing="ij")
    out = np.stack([(la.ravel() - origin[0]) / scale, (lo.ravel() - origin[1]) / scale], axis=-1)
    out.setflags(write=False)
    return out


def to_utc64(times) -> np.ndarray:
    """Timestamps (naive = UTC) as a 1-D ``datetime64[s]`` array."""
    arr = np.atleast_1d(np.asarray(times))
    if arr.dtype.kind == "M":
        return arr.astype("datetime64[s]")
    idx = pd.DatetimeIndex(pd.to_datetime(arr, utc=True)).tz_convert(None)
    return idx.to_numpy().astype("datetime64[s]")


def time_encoding(times, d_t: int) -> np.ndarray:
    """Sinusoidal hour-of-day and day-of-year features, shape (B, d_t)."""
    t = to_utc64(times)
    day = t.astype("datetime64[D]")
    hour = (t - day).astype(np.float64) / 3600.0
    doy = (day - day.astype("datetime64[Y]")).astype(np.float64) + hour / 24.0
    k = np.arange(1, d_t // 4 + 1, dtype=np.float64)
    ph = 2 * np.pi * hour[:, None] / 24.0 * k
    py = 2 * np.pi * doy[:, None] / 365.25 * k
    return np.concatenate([np.sin(ph), np.cos(ph), np.sin(py), np.cos(py)], axis=1)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _affine(x, w, b=None):
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def multi_head_attention(xq, xkv, wq, wk, wv, heads: int, trace: Optional[list] = None):
    """Returns (Q, A V) for inputs of shape (B, Nq, .) and (B, Nk, .).

    Scores use 1/sqrt(d_e / heads) per head.
    """
    q = nx.matmul(xq, wq)
    k = nx.matmul(xkv, wk)
    v = nx.matmul(xkv, wv)
    B, nq, de = q.shape
    nk = k.shape[1]
    dh = de // heads
    qh = nx.transpose(nx.reshape(q, (B, nq, heads, dh)), (0, 2, 1, 3))
    kh = nx.transpose(nx.reshape(k, (B, nk, heads, dh)), (0, 2, 3, 1))
    vh = nx.transpose(nx.reshape(v, (B, nk, heads, dh)), (0, 2, 1, 3))
    scores = nx.scale(nx.matmul(qh, kh), 1.0 / math.sqrt(dh))
    attn = nx.softmax_rows(scores)  # (B, heads, Nq, Nk)
    if trace is not None:
        trace.append(attn.value)
    z = nx.matmul(attn, vh)
    z = nx.reshape(nx.transpose(z, (0, 2, 1, 3)), (B, nq, de))
    return q, z


def feed_forward(u, p: Dict, prefix: str, eps: float):
    h = nx.layer_norm(u, p[prefix + ".norm.gain"], p[prefix + ".norm.bias"], eps)
    h = nx.gelu(_affine(h, p[prefix + ".w1"], p[prefix + ".b1"]))
    h = _affine(h, p[prefix + ".w2"], p[prefix + ".b2"])
    return nx.add(u, h)


def mcst_block(x, kv, p: Dict, j: int, hp: HyperParams, trace: Optional[list] = None):
    """One meteorology-coupled spatial transformer block, (B,N,.) -> (B,N,d_e)."""
    pre = f"block{j}."
    q_in = hp.d_in if j == 0 else hp.d_e
    if x.shape[-1] != q_in:
        raise ShapeError(f"block {j} expects query width {q_in}, got {x.shape[-1]}")
    if kv.shape[-1] != p[pre + "cross.wk"].shape[0]:
        raise ShapeError(f"block {j} key/value width {kv.shape[-1]} mismatch")
    q, zca = multi_head_attention(x, kv, p[pre + "cross.wq"], p[pre + "cross.wk"],
                                  p[pre + "cross.wv"], hp.heads, trace)
    zcf = nx.layer_norm(nx.add(q, zca), p[pre + "norm.gain"], p[pre + "norm.bias"], hp.ln_eps)
    zcf = feed_forward(zcf, p, pre + "ffn1", hp.ln_eps)
    _, zsa = multi_head_attention(zcf, zcf, p[pre + "self.wq"], p[pre + "self.wk"],
                                  p[pre + "self.wv"], hp.heads, trace)
    return feed_forward(nx.add(zcf, zsa), p, pre + "ffn2", hp.ln_eps)


def _channel_norm(x, gain, bias, eps):
    # x: (B, C, H, W); normalise across channels at each grid point
    xt = nx.transpose(x, (0, 2, 3, 1))
    xt = nx.layer_norm(xt, gain, bias, eps)
    return nx.transpose(xt, (0, 3, 1, 2))


def _resnet_block(x, te, p: Dict, b: int, eps: float):
    pre = f"ds{b}."
    h = nx.conv2d(x, p[pre + "conv1"], stride=2)
    h = nx.add(h, nx.reshape(p[pre + "conv1_bias"], (-1, 1, 1)))
    tproj = _affine(te, p[pre + "te.weight"], p[pre + "te.bias"])  # (B, C_out)
    h = nx.add(h, nx.reshape(tproj, (tproj.shape[0], -1, 1, 1)))
    h = nx.gelu(_channel_norm(h, p[pre + "norm.gain"], p[pre + "norm.bias"], eps))
    h = nx.conv2d(h, p[pre + "conv2"], stride=1)
    h = nx.add(h, nx.reshape(p[pre + "conv2_bias"], (-1, 1, 1)))
    return nx.add(h, nx.conv2d(x, p[pre + "skip"], stride=2))


def embed_inputs(x_prev, x_curr, p: Dict, hp: HyperParams, city_xy: np.ndarray):
    """GELU affine of the concatenated states joined with the city position
    encoding: (B,N,D) x2 -> (B,N,d_e)."""
    B, N, D = x_curr.shape
    if x_prev.shape != x_curr.shape or D != hp.D:
        raise ShapeError(f"embed_inputs: {x_prev.shape} / {x_curr.shape} vs D={hp.D}")
    xc = nx.gelu(_affine(nx.concat([x_prev, x_curr], axis=-1), p["embed.weight"], p["embed.bias"]))
    coords = np.broadcast_to(city_xy, (B, N, 2))
    pe = _affine(coords, p["pos.weight"], p["pos.bias"])
    return nx.concat([xc, pe], axis=-1)


def encode_meteo(m_t, m_next, times, p: Dict, hp: HyperParams):
    """Two stacked grids (B,C,H,W) + grid PE + time encoding -> (B, N^m, d_e)."""
    m_t, m_next = nx.as_tensor(m_t), nx.as_tensor(m_next)
    B, C, H, W = m_t.shape
    if (C, H, W) != (hp.C, hp.H, hp.W) or m_next.shape != m_t.shape:
        raise ShapeError(f"meteo grids {m_t.shape}/{m_next.shape} vs ({hp.C},{hp.H},{hp.W})")
    if H % 4 or W % 4:
        raise ShapeError(f"grid {H}x{W} not divisible by 4")
    gxy = np.broadcast_to(grid_coords(hp), (B, H * W, 2))
    pe = _affine(gxy, p["pos.weight"], p["pos.bias"])  # (B, HW, d_pm)
    pe = nx.reshape(nx.transpose(pe, (0, 2, 1)), (B, hp.d_pm, H, W))
    x = nx.concat([m_t, m_next, pe], axis=1)
    te = time_encoding(times, hp.d_t)
    if te.shape[0] == 1 and B > 1:
        te = np.repeat(te, B, axis=0)
    for b in range(2):
        x = _resnet_block(x, te, p, b, hp.ln_eps)
    de = x.shape[1]
    return nx.transpose(nx.reshape(x, (B, de, -1)), (0, 2, 1))


def predict_step(
    x_prev,
    x_curr,
    params: Dict,
    hp: HyperParams,
    city_xy: np.ndarray,
    meteo_pair: Optional[Sequence] = None,
    time=None,
    trace: Optional[dict] = None,
):
    """One model step: returns ``x_curr + delta`` with the shape of ``x_curr``.

    ``city_xy`` are normalised coordinates from :func:`normalized_coords`.
    Inputs may be (N, D) or batched (B, N, D). ``trace`` (a dict) collects
    attention matrices under ``"attention"``.
    """
    x_prev, x_curr = nx.as_tensor(x_prev), nx.as_tensor(x_curr)
    squeeze = x_curr.ndim == 2
    if squeeze:
        x_prev = nx.reshape(x_prev, (1,) + x_prev.shape)
        x_curr = nx.reshape(x_curr, (1,) + x_curr.shape)
    attn_log = [] if trace is not None else None

    xcp = embed_inputs(x_prev, x_curr, params, hp, city_xy)
    qsa, zsa = multi_head_attention(xcp, xcp, params["sa0.wq"], params["sa0.wk"],
                                    params["sa0.wv"], hp.heads, attn_log)
    xsa = nx.matmul(zsa, params["sa0.wo"])  # (B, N, d_in)

    if hp.use_meteo:
        if meteo_pair is None:
            raise ValueError("meteo-coupled model needs a meteo_pair")
        m_t, m_next = (nx.as_tensor(m) for m in meteo_pair)
        if m_t.ndim == 3:
            m_t = nx.reshape(m_t, (1,) + m_t.shape)
            m_next = nx.reshape(m_next, (1,) + m_next.shape)
        kv = encode_meteo(m_t, m_next, time, params, hp)
    else:
        kv = None

    outs = []
    x = xsa
    for j in range(hp.L):
        x = mcst_block(x, kv if kv is not None else x, params, j, hp, attn_log)
        outs.append(x)
    o = nx.concat(outs, axis=-1) if hp.L > 1 else outs[0]
    delta = nx.matmul(nx.gelu(_affine(o, params["head.w1"], params["head.b1"])), params["head.w2"])
    out = nx.add(x_curr, delta)
    if trace is not None:
        trace["attention"] = attn_log
    if squeeze:
        out = nx.reshape(out, out.shape[1:])
    return out


def predict_step_array(x_prev, x_curr, params: Params, hp: HyperParams, city_xy, meteo_pair=None, time=None):
    """Untracked convenience wrapper returning a numpy array."""
    return predict_step(x_prev, x_curr, params, hp, city_xy, meteo_pair, time).value


def identity_params(params: Params) -> Params:
    """Copy of ``params`` with the delta head zeroed (prediction == x_curr)."""
    out = {k: v.copy() for k, v in params.items()}
    out["head.w2"][:] = 0.0
    return out
