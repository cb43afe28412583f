"""Checkpoint files: JSON metadata followed by a little-endian parameter blob.

Layout::

    bytes 0-3   b"MCK1"
    bytes 4-7   little-endian u32 header length L
    bytes 8..   UTF-8 JSON {"config", "meta", "dtype", "tile_size", "seed",
                "tensors": [[name, shape, "w"|"b"], ...]}
    then        tensors concatenated in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

MAGIC = b"MCK1"


class CheckpointFormatError(ValueError):
    pass


def checkpoint_bytes(params: ModelParams, cfg: ModelConfig, meta: dict | None = None) -> bytes:
    dtype = np.dtype(cfg.dtype).newbyteorder("<")
    tensors = [[k, list(v.shape), "w"] for k, v in params.weights.items()]
    tensors += [[k, list(v.shape), "b"] for k, v in params.buffers.items()]
    header = {
        "config": cfg.to_dict(),
        "meta": meta or {},
        "dtype": dtype.name,
        "tile_size": params.tile_size,
        "seed": params.seed,
        "tensors": tensors,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = b"".join(
        np.ascontiguousarray(v, dtype=dtype).tobytes()
        for v in list(params.weights.values()) + list(params.buffers.values())
    )
    return MAGIC + struct.pack("<I", len(hb)) + hb + blob


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, meta: dict | None = None) -> int:
    data = checkpoint_bytes(params, cfg, meta)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {data[:4]!r}")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    cfg = ModelConfig.from_dict(header["config"])
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    offset = 8 + hlen
    weights, buffers = {}, {}
    for name, shape, kind in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(data):
            raise CheckpointFormatError("truncated checkpoint payload")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
        arr = arr.astype(dtype.newbyteorder("="))
        (weights if kind == "w" else buffers)[name] = arr
        offset += nbytes
    params = ModelParams(weights, buffers, int(header["tile_size"]), int(header["seed"]))
    return params, cfg, header["meta"]
