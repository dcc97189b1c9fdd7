"""Checkpoint container: a JSON config block followed by named tensor records.

Layout (little-endian)::

    b"SPMK" | u32 version | u64 config length | config JSON (UTF-8, sorted keys)
    u32 entry count | per entry: u32 name length | name (UTF-8) | tensor record

Each tensor record is the ``SPMB`` encoding from :mod:`spmamba.tensor`.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"SPMK"
VERSION = 1


def dumps(entries: "OrderedDict[str, np.ndarray]", config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(cfg)), cfg, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(tensor_to_bytes(np.asarray(arr, dtype=np.float64)))
    return b"".join(parts)


def loads(buf: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if buf[:4] != MAGIC:
        raise ValueError("not a checkpoint file")
    version, cfg_len = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    config = json.loads(buf[pos:pos + cfg_len].decode())
    pos += cfg_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + n].decode()
        arr, pos = tensor_from_bytes(buf, pos + 4 + n)
        entries[name] = arr
    return entries, config


def save(path: str | Path, entries, config: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(entries, config))
    os.replace(tmp, path)


def load(path: str | Path):
    return loads(Path(path).read_bytes())
