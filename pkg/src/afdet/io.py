"""Atomic file writes and the tensor container format.

Container layout (all integers little-endian)::

    magic    8 bytes  b"AFDTNSR\\0"
    version  u32
    hlen     u64      length of the JSON header in bytes
    header   hlen bytes of UTF-8 JSON
    payload  raw little-endian tensor blocks, in header order

The header holds ``{"version", "meta", "sections": {name: [{"name",
"dtype", "shape", "offset", "nbytes"}, ...]}}``; offsets are relative to
the start of the payload. Checkpoints use the sections ``params``,
``buffers``, ``velocity`` and ``ema``; encoded targets use ``targets``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"AFDTNSR\0"
VERSION = 1


class ContainerError(Exception):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack_tensors(sections: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> bytes:
    entries: dict[str, list] = {}
    blocks = []
    offset = 0
    for section, tensors in sections.items():
        entries[section] = []
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            entries[section].append(
                {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            blocks.append(raw)
            offset += len(raw)
    header = json.dumps({"version": VERSION, "meta": meta or {}, "sections": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blocks)


def unpack_tensors(data: bytes) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a tensor container (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = len(MAGIC) + 12
    if len(data) < start + hlen:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(data[start : start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ContainerError(f"corrupt container header ({e})") from e
    payload = memoryview(data)[start + hlen :]
    sections = {}
    for section, entries in header["sections"].items():
        sections[section] = {}
        for e in entries:
            end = e["offset"] + e["nbytes"]
            if end > len(payload):
                raise ContainerError(f"truncated container: tensor {section}/{e['name']}")
            arr = np.frombuffer(payload[e["offset"] : end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            sections[section][e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return sections, header.get("meta", {})


def save_tensors(path, sections, meta=None) -> None:
    atomic_write_bytes(path, pack_tensors(sections, meta))


def load_tensors(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    return unpack_tensors(Path(path).read_bytes())
