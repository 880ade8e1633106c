"""``MVCK`` checkpoint container.

``b"MVCK"``, one version byte, a little-endian uint32 header length, a UTF-8
JSON header (hyperparameters, optional normalisation statistics, tensor
manifest with shapes and byte offsets), then float32 little-endian blobs.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .model import HyperParams, Params, param_shapes
from .series import NormStats

MAGIC = b"MVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Params, hp: HyperParams, norm_stats: Optional[NormStats] = None,
                    extra: Optional[dict] = None) -> None:
    expected = param_shapes(hp)
    if set(expected) != set(params):
        raise CheckpointError(f"parameter names do not match hyperparameters: "
                              f"{sorted(set(expected) ^ set(params))[:5]}")
    manifest, offset = [], 0
    for name in expected:
        arr = np.asarray(params[name])
        if arr.shape != expected[name]:
            raise CheckpointError(f"{name}: shape {arr.shape} != {expected[name]}")
        nbytes = 4 * arr.size
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "hyperparams": hp.to_dict(),
        "norm_stats": norm_stats.to_dict() if norm_stats is not None else None,
        "tensors": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in expected:
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Tuple[Params, HyperParams, Optional[NormStats], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an MVCK checkpoint")
    (version,) = struct.unpack_from("<B", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", raw, 5)
    header = json.loads(raw[9:9 + n].decode("utf-8"))
    body = memoryview(raw)[9 + n:]
    hp = HyperParams.from_dict(header["hyperparams"])
    params = {}
    for t in header["tensors"]:
        chunk = body[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        params[t["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(t["shape"])
    stats = NormStats.from_dict(header["norm_stats"]) if header.get("norm_stats") else None
    return params, hp, stats, header.get("extra", {})
