"""Binary tensor container shared by checkpoints, trajectories and feature caches.

Layout::

    b"VSHF" | version u32 LE | metadata length u64 LE | metadata (UTF-8 JSON) | payload

The metadata carries a ``kind`` tag ("MODEL", "TRAJ", "FEAT"), free-form
fields, and a tensor index ``[{name, shape, offset}]`` with byte offsets into
the payload. Payloads are little-endian float32.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"VSHF"
VERSION = 1
KINDS = ("MODEL", "TRAJ", "FEAT")


class ContainerError(ValueError):
    pass


def dumps(kind: str, meta: Mapping[str, Any], tensors: Mapping[str, torch.Tensor]) -> bytes:
    if kind not in KINDS:
        raise ContainerError(f"unknown container kind {kind!r}")
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"kind": kind, "meta": dict(meta), "tensors": index}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob + b"".join(chunks)


def loads(data: bytes, kind: str | None = None) -> tuple[dict, dict[str, torch.Tensor]]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise ContainerError("bad magic; not a VSHF container")
    version, mlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if 16 + mlen > len(data):
        raise ContainerError("truncated metadata")
    header = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"expected a {kind} container, found {header['kind']}")
    base = 16 + mlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 4 * count > len(data):
            raise ContainerError(f"tensor {entry['name']!r} runs past the end of the file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, tensors


def save(path: str | Path, kind: str, meta: Mapping[str, Any], tensors: Mapping[str, torch.Tensor]) -> None:
    Path(path).write_bytes(dumps(kind, meta, tensors))


def load(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, torch.Tensor]]:
    return loads(Path(path).read_bytes(), kind)
