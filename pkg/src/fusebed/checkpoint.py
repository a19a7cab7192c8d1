"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"FUSEBED1"
    u64 header length, then a UTF-8 JSON header (configs, vocabulary, optimizer step)
    u64 tensor count
    per tensor: u32 name length, name, u32 ndim, u64 per dim, float64 data (row-major, little-endian)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import CheckpointError
from .model import HybridRetriever, ModelConfig
from .text import RESERVED, Vocabulary
from .training import Adam, TrainConfig

MAGIC = b"FUSEBED1"


def _write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(shape)


def save_checkpoint(path: str | Path, model: HybridRetriever, train_cfg: TrainConfig | None = None,
                    optimizer: Adam | None = None, seed: int = 0, extra: dict | None = None) -> None:
    params = model.parameters()
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("parameter names are not unique")
    header = {
        "model": model.config.to_dict(),
        "train": None if train_cfg is None else train_cfg.to_dict(),
        "vocab": model.vocab.tokens[len(RESERVED):],
        "seed": seed,
        "optimizer_step": None if optimizer is None else optimizer.t,
        "extra": extra or {},
    }
    tensors = [(p.name, p.value) for p in params]
    if optimizer is not None:
        tensors += [(f"adam.m/{p.name}", m) for p, m in zip(optimizer.params, optimizer.m)]
        tensors += [(f"adam.v/{p.name}", v) for p, v in zip(optimizer.params, optimizer.v)]
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with Path(path).open("rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<Q", _read_exact(fh, 8))
        header = json.loads(_read_exact(fh, n).decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8))
        tensors = dict(_read_tensor(fh) for _ in range(count))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[HybridRetriever, dict, Adam | None]:
    """Rebuild the model (and optimizer state, if stored) from a checkpoint file."""
    header, tensors = read_checkpoint(path)
    model = HybridRetriever(ModelConfig(**header["model"]), Vocabulary(header["vocab"]), header["seed"])
    params = model.parameters()
    for p in params:
        if p.name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {p.name!r}")
        value = tensors[p.name]
        if value.shape != p.shape:
            raise CheckpointError(f"{path}: tensor {p.name!r} has shape {value.shape}, expected {p.shape}")
        p.value[...] = value
    optimizer = None
    if header.get("optimizer_step") is not None:
        optimizer = Adam(params)
        optimizer.t = header["optimizer_step"]
        for i, p in enumerate(params):
            optimizer.m[i][...] = tensors[f"adam.m/{p.name}"]
            optimizer.v[i][...] = tensors[f"adam.v/{p.name}"]
    return model, header, optimizer


def train_config_from_header(header: dict) -> TrainConfig | None:
    return None if header.get("train") is None else TrainConfig.from_dict(header["train"])
