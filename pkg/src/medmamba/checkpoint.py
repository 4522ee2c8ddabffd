"""Binary checkpoint format.

Layout: magic ``MMB1`` | format version u32 LE | header length u32 LE |
UTF-8 JSON header {config, tensor manifest} | raw little-endian tensor
payload in manifest order. Tensors are written sorted by canonical name so
save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig
from .numerics import Tensor

MAGIC = b"MMB1"
FORMAT_VERSION = 1

_DTYPE_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(params: Mapping[str, Tensor], config: ModelConfig,
                    path: str | Path) -> None:
    names = sorted(params)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = params[name].data
        tag = _DTYPE_TO_TAG.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes()
        manifest.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                         "byte_offset": offset, "byte_len": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "config": config.to_dict(),
         "tensors": manifest},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(FORMAT_VERSION).tobytes())
        f.write(np.uint32(len(header)).tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], ModelConfig]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint file)")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} "
                              f"(expected {FORMAT_VERSION})")
    header_len = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if 12 + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    payload = raw[12 + header_len:]
    params: dict[str, Tensor] = {}
    for entry in header.get("tensors", []):
        name = entry["name"]
        tag = entry["dtype"]
        if tag not in _TAG_TO_DTYPE:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype tag {tag!r}")
        dtype = _TAG_TO_DTYPE[tag]
        shape = tuple(entry["shape"])
        start, nbytes = entry["byte_offset"], entry["byte_len"]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{path}: tensor {name!r} byte length disagrees "
                                  f"with shape {shape}")
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated tensor table at {name!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=dtype).reshape(shape)
        params[name] = Tensor(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    config = ModelConfig.from_dict(header["config"])
    return params, config
