"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"UDCKPT\\x00\\x01"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          array payload, arrays packed back to back

The header holds ``meta`` (free-form JSON: configs, counters, schedule
position) and ``arrays``: a list of ``{name, dtype, shape, offset, nbytes}``
entries whose offsets are relative to the payload start. Array dtypes are
always stored explicitly little-endian (``<f4``, ``<f8``, ``<i8``), so a
round trip is bit-exact on any host.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"UDCKPT\x00\x01"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.ascontiguousarray(x)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_arrays(path: str | Path, arrays: Mapping[str, object], meta: dict) -> Path:
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, value in arrays.items():
        arr = _as_numpy(value)
        blob = arr.tobytes(order="C")
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    arrays = {}
    for entry in header["arrays"]:
        lo = start + entry["offset"]
        buf = data[lo: lo + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def state_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over every named parameter's bytes, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(_as_numpy(p).tobytes())
    return h.hexdigest()
