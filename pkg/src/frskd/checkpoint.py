"""Binary checkpoint files.

Layout (all integers little-endian)::

    0     4 bytes   magic b"FRSK"
    4     u32       format version
    8     u64       header length H
    16    H bytes   UTF-8 JSON header
    ...   zero padding up to an 8-byte boundary
    D     tensor data, each entry 8-byte aligned

Header offsets are relative to ``D``. See ``docs/checkpoint.md``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FRSK"
VERSION = 1
GROUPS = ("param", "buffer", "momentum")
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    """The file is not a readable checkpoint of a supported version."""


@dataclass
class CheckpointState:
    config_text: str
    epoch: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _align(n: int) -> int:
    return (n + 7) & ~7


def _group(state: CheckpointState, group: str) -> dict[str, np.ndarray]:
    if group not in GROUPS:
        raise CheckpointError(f"unknown tensor group {group!r}")
    return {"param": state.params, "buffer": state.buffers, "momentum": state.momentum}[group]


def save_checkpoint(path: str | os.PathLike, state: CheckpointState) -> Path:
    """Write ``state`` atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, blobs, offset = [], [], 0
    for group in GROUPS:
        for name, arr in _group(state, group).items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            table.append({"group": group, "name": name, "dtype": le.dtype.str,
                          "shape": list(arr.shape), "offset": offset, "nbytes": le.nbytes})
            blobs.append((offset, le.tobytes()))
            offset = _align(offset + le.nbytes)
    header = json.dumps({"epoch": state.epoch, "config": state.config_text,
                         "rng": state.rng, "extra": state.extra,
                         "tensors": table}, sort_keys=True).encode()
    start = _align(_PREFIX.size + len(header))
    buf = bytearray(start + offset)
    buf[:_PREFIX.size] = _PREFIX.pack(MAGIC, VERSION, len(header))
    buf[_PREFIX.size:_PREFIX.size + len(header)] = header
    for off, raw in blobs:
        buf[start + off:start + off + len(raw)] = raw
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> CheckpointState:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated file")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    start = _align(_PREFIX.size + hlen)
    state = CheckpointState(header["config"], int(header["epoch"]), rng=header.get("rng", {}),
                            extra=header.get("extra", {}))
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        _group(state, entry["group"])[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return state
