"""Self-describing checkpoint container.

Layout: magic ``MLCK``, u32 format version, u32 header length, a UTF-8 JSON
header, then raw little-endian tensor blobs. The header holds one entry per
section (``tokenizer``, ``lm``, ...) with the section's config echo, free-form
extras and the name, dtype, shape and byte range of every tensor.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import _atomic_write

MAGIC = b"MLCK"
VERSION = 1
_PRE = struct.Struct("<4sII")
_DTYPES = {"<f4": np.float32, "<i8": np.int64}


class CheckpointError(ValueError):
    pass


@dataclass
class Section:
    config: dict
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def _as_array(v) -> np.ndarray:
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    v = np.asarray(v)
    if np.issubdtype(v.dtype, np.integer) or v.dtype == np.bool_:
        return v.astype("<i8")
    return v.astype("<f4")


def to_bytes(sections: dict[str, Section]) -> bytes:
    header = {"format_version": VERSION, "sections": {}}
    blobs: list[bytes] = []
    offset = 0
    for name, sec in sorted(sections.items()):  # canonical order, matching the sorted header
        entries = []
        for tname, value in sec.tensors.items():
            arr = _as_array(value)
            raw = arr.tobytes()
            entries.append({"name": tname, "dtype": arr.dtype.str, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header["sections"][name] = {"config": sec.config, "extra": sec.extra, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PRE.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(buf: bytes) -> dict[str, Section]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < _PRE.size:
        raise CheckpointError("checkpoint header truncated")
    _, version, hlen = _PRE.unpack_from(buf)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PRE.size + hlen
    if len(buf) < start:
        raise CheckpointError("checkpoint header truncated")
    try:
        header = json.loads(buf[_PRE.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    body = memoryview(buf)[start:]
    out = {}
    for name, sec in header["sections"].items():
        tensors = {}
        for e in sec["tensors"]:
            lo, hi = e["offset"], e["offset"] + e["nbytes"]
            if hi > len(body):
                raise CheckpointError(f"tensor {name}/{e['name']} truncated")
            dtype = _DTYPES.get(e["dtype"])
            if dtype is None:
                raise CheckpointError(f"unsupported dtype {e['dtype']}")
            arr = np.frombuffer(body[lo:hi], dtype=e["dtype"]).astype(dtype)
            if arr.size != int(np.prod(e["shape"], dtype=np.int64)):
                raise CheckpointError(f"tensor {name}/{e['name']} size does not match shape")
            tensors[e["name"]] = arr.reshape(e["shape"])
        out[name] = Section(sec["config"], tensors, sec.get("extra", {}))
    return out


def save_checkpoint(path: str | Path, sections: dict[str, Section]) -> Path:
    path = Path(path)
    _atomic_write(path, to_bytes(sections))
    return path


def load_checkpoint(path: str | Path) -> dict[str, Section]:
    return from_bytes(Path(path).read_bytes())


def state_tensors(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: _as_array(v) for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    ref = module.state_dict()
    missing = set(ref) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    state = {k: torch.from_numpy(np.array(tensors[k])).to(ref[k].dtype) for k in ref}
    module.load_state_dict(state)
