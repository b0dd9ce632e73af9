"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"CAFDTNSR"            magic, 8 bytes
    u32 format version
    u64 header length
    header                 UTF-8 JSON: {"kind", "meta", "tensors": [...]}
    tensor data            row-major, little-endian, in header order

Each tensor entry records ``name``, ``dtype``, ``shape``, ``offset`` and
``nbytes`` relative to the start of the data section.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"CAFDTNSR"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def write_tensor_file(path, kind: str, meta: dict[str, Any], tensors: dict[str, torch.Tensor]) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        blob = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": _DTYPES[t.dtype],
            "shape": list(t.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": entries}, sort_keys=True).encode()

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_tensor_file(path, kind: str | None = None) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    """Return ``(meta, tensors)``; raises CheckpointError on any malformation."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor checkpoint (bad magic)")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    try:
        header = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")

    data = memoryview(raw)[20 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: tensor {e['name']!r} truncated")
        arr = np.frombuffer(data[e["offset"]:end], dtype=np.dtype(e["dtype"]))
        arr = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
        tensors[e["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[e["dtype"]])
    return header["meta"], tensors
