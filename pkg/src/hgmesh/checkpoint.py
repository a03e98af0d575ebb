"""Single-file checkpoints: JSON manifest followed by raw little-endian float32 tensors.

Layout: magic ``MTCK``, u32 format version, u64 manifest byte length, the UTF-8
JSON manifest, then every tensor in manifest order. The manifest stores the
model config, each tensor's name/shape/dtype/offset, and free-form metadata.
Point-encoder weights live under the ``encoder.`` prefix.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

from .hourglass import HourglassConfig, HourglassLM

MAGIC = b"MTCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, model: HourglassLM, meta: dict | None = None) -> None:
    tensors, entries, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        tensors.append(arr)
    manifest = {"config": model.cfg.to_dict(), "tensors": entries, "meta": meta or {}}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for arr in tensors:
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_manifest(path: str | os.PathLike) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CheckpointError(f"{path}: truncated header")
        magic, version, n = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(n).decode("utf-8"))
    return manifest, _HEADER.size + n


def load_checkpoint(path: str | os.PathLike, dtype=torch.float32) -> tuple[HourglassLM, dict]:
    manifest, base = read_manifest(path)
    model = HourglassLM(HourglassConfig.from_dict(manifest["config"]))
    expected = model.state_dict()
    raw = np.memmap(path, dtype=np.uint8, mode="r")
    state = {}
    for e in manifest["tensors"]:
        if e["name"] not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {e['name']}")
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]].tobytes(), dtype="<f4").reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    model.load_state_dict(state)
    return model.to(dtype), manifest["meta"]
