"""Parameter checkpoint format.

Layout of a .ssck file:

    bytes 0..7    magic b"SLOTCKPT"
    bytes 8..15   little-endian uint64: JSON header length H
    bytes 16..16+H  UTF-8 JSON header
    remainder     concatenated raw tensor bytes, row-major

Header fields: {"version": 1, "endianness": "little", "config": {...},
"tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}.
Offsets are relative to the end of the header. Tensors are always written
little-endian regardless of host order.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .model import ModelConfig, Transformer

MAGIC = b"SLOTCKPT"

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Transformer, path: Union[str, Path]) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        arr = p.detach().numpy()
        dtype = str(arr.dtype)
        raw = np.ascontiguousarray(arr.astype(_DTYPES[dtype])).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": 1,
        "endianness": "little",
        "config": dataclasses.asdict(model.config),
        "dtype": "float64" if model.dtype == torch.float64 else "float32",
        "tensors": tensors,
    }
    payload = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(payload).to_bytes(8, "little"))
        f.write(payload)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: Union[str, Path]) -> Transformer:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode())
        if header.get("endianness") != "little":
            raise CheckpointError("unsupported endianness tag")
        body = f.read()
    config = ModelConfig(**header["config"])
    dtype = torch.float64 if header.get("dtype") == "float64" else torch.float32
    model = Transformer(config, dtype=dtype)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for spec in header["tensors"]:
            raw = body[spec["offset"]:spec["offset"] + spec["nbytes"]]
            arr = np.frombuffer(raw, dtype=_DTYPES[spec["dtype"]])
            arr = arr.reshape(spec["shape"]).astype(spec["dtype"])
            params[spec["name"]].copy_(torch.from_numpy(arr.copy()))
    return model
