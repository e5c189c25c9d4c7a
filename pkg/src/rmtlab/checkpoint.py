"""Checkpoint format: versioned header, JSON manifest, flat binary blob.

Layout: the ASCII line ``RMTB1``, an 8-byte little-endian manifest length,
the manifest JSON (entry name/shape/dtype/offset plus free-form metadata),
then all arrays concatenated little-endian at their recorded offsets.
Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os

import numpy as np

from .optim import AdamState
from .tensor import Tensor

MAGIC = b"RMTB1\n"


class CheckpointError(ValueError):
    pass


def _arrays(params: dict, adam: AdamState | None):
    out = {name: p.data for name, p in params.items()}
    if adam is not None:
        for name, m in adam.m.items():
            out[f"adam.m.{name}"] = m
        for name, v in adam.v.items():
            out[f"adam.v.{name}"] = v
    return out


def save_checkpoint(path, params: dict, adam: AdamState | None = None,
                    meta: dict | None = None):
    arrays = _arrays(params, adam)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        b = a.astype(a.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(a.shape),
                        "dtype": str(a.dtype), "offset": offset})
        blobs.append(b)
        offset += len(b)
    manifest = {"entries": entries, "meta": meta or {}}
    if adam is not None:
        manifest["meta"]["adam"] = {"lr": adam.lr, "beta1": adam.beta1,
                                    "beta2": adam.beta2, "eps": adam.eps,
                                    "step_count": adam.step_count}
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(len(mbytes).to_bytes(8, "little"))
        f.write(mbytes)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def read_checkpoint(path):
    """Returns (arrays dict, meta dict) without touching any live model."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad or unsupported header "
                                  f"{magic!r}, expected {MAGIC!r}")
        try:
            mlen = int.from_bytes(f.read(8), "little")
            manifest = json.loads(f.read(mlen))
            blob = f.read()
        except (ValueError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt manifest ({e})")
    arrays = {}
    for e in manifest["entries"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        a = np.frombuffer(blob, dtype=dt, count=n, offset=start)
        arrays[e["name"]] = a.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return arrays, manifest["meta"]


def load_checkpoint(path, params: dict, adam: AdamState | None = None) -> dict:
    """Load arrays into live params (and optimizer moments); returns meta.

    Shape or name mismatches abort with the offending parameter named.
    """
    arrays, meta = read_checkpoint(path)
    stored = {k for k in arrays if not k.startswith("adam.")}
    wanted = set(params)
    if stored != wanted:
        missing = sorted(wanted - stored)
        extra = sorted(stored - wanted)
        raise CheckpointError(f"{path}: parameter set mismatch "
                              f"(missing={missing}, unexpected={extra})")
    for name, p in params.items():
        a = arrays[name]
        if tuple(a.shape) != tuple(p.data.shape):
            raise CheckpointError(f"{path}: shape mismatch for parameter "
                                  f"{name!r}: checkpoint {tuple(a.shape)} vs "
                                  f"model {tuple(p.data.shape)}")
        p.data = a.astype(p.data.dtype).copy()
    if adam is not None and "adam" in meta:
        for name in params:
            if f"adam.m.{name}" in arrays:
                adam.m[name] = arrays[f"adam.m.{name}"].copy()
                adam.v[name] = arrays[f"adam.v.{name}"].copy()
        adam.step_count = int(meta["adam"]["step_count"])
        adam.lr = float(meta["adam"]["lr"])
    return meta
