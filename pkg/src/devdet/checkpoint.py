"""Flat-tensor checkpoint files.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the parameters concatenated in header order as little-endian float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"DEVDETCK"

_REGISTRY: dict[str, type[nn.Module]] = {}


def register(architecture_id: str):
    def deco(cls):
        _REGISTRY[architecture_id] = cls
        cls.architecture_id = architecture_id
        return cls
    return deco


def build(architecture_id: str, arch: dict) -> nn.Module:
    if architecture_id not in _REGISTRY:
        raise ValueError(f"unknown architecture {architecture_id!r}")
    return _REGISTRY[architecture_id](**arch)


def shape_table(model: nn.Module) -> list[tuple[str, list[int]]]:
    return [(name, list(p.shape)) for name, p in model.state_dict().items()]


def flat_parameters(model: nn.Module) -> np.ndarray:
    """All state tensors concatenated as float32, in state_dict order."""
    parts = [t.detach().cpu().reshape(-1).to(torch.float32).numpy() for t in model.state_dict().values()]
    return np.concatenate(parts) if parts else np.zeros(0, np.float32)


def parameter_hash(model: nn.Module) -> str:
    return hashlib.sha256(flat_parameters(model).astype("<f4").tobytes()).hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(model: nn.Module, path: str | Path, **extra) -> Path:
    """Write ``model`` with header fields ``extra`` (seed, config echo, ...)."""
    header = {
        "architecture_id": model.architecture_id,
        "arch": model.arch,
        "shapes": shape_table(model),
        **extra,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    data = flat_parameters(model).astype("<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(data)
    return path


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a devdet checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a devdet checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    flat = np.frombuffer(raw[16 + n:], dtype="<f4")
    model = build(header["architecture_id"], header["arch"])
    expected = shape_table(model)
    got = [(name, list(shape)) for name, shape in header["shapes"]]
    if expected != got:
        raise ValueError(f"{path}: shape table does not match architecture {header['architecture_id']}")
    total = sum(int(np.prod(s)) for _, s in expected)
    if flat.size != total:
        raise ValueError(f"{path}: expected {total} parameters, found {flat.size}")
    state, offset = {}, 0
    for name, shape in expected:
        k = int(np.prod(shape))
        state[name] = torch.from_numpy(flat[offset:offset + k].astype(np.float32).reshape(shape))
        offset += k
    model.load_state_dict(state)
    model.eval()
    return model, header
