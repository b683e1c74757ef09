"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"PEWIRE01"
    version      u32
    config_len   u32
    config       config_len bytes of canonical JSON (UTF-8)
    n_tensors    u32
    n_tensors x  name_len u32, name bytes, rank u32, rank x u32 extents,
                 prod(extents) x f32 payload
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pewire.errors import FormatError
from pewire.model import ModelConfig, ModelParams
from pewire.optim import OptimizerState
from pewire.wiring_config import WiringConfig, variant_preset

MAGIC = b"PEWIRE01"
VERSION = 1


def canonical_json(obj) -> str:
    """Sorted keys, two-space indent, LF line endings, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    wiring: WiringConfig
    tensors: dict[str, np.ndarray]
    frozen: list[str] = field(default_factory=list)
    optimizer: OptimizerState | None = None
    rng_state: dict | None = None
    epoch: int = 0
    experiment: dict | None = None
    version: int = VERSION

    @classmethod
    def from_params(cls, params: ModelParams, **kw) -> "Checkpoint":
        tensors = {k: np.array(v, dtype=np.float32) for k, v in params.arrays().items()}
        return cls(params.config, params.wiring, tensors, frozen=params.frozen_names(), **kw)

    def to_params(self) -> ModelParams:
        return ModelParams.from_arrays(self.model_config, self.wiring, self.tensors, frozen=set(self.frozen))

    def header(self) -> dict:
        opt = None
        if self.optimizer is not None:
            o = self.optimizer
            opt = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps,
                   "weight_decay": o.weight_decay, "step": o.step}
        return {
            "model": self.model_config.to_dict(),
            "wiring": self.wiring.preset_string(),
            "frozen": list(self.frozen),
            "optimizer": opt,
            "rng_state": self.rng_state,
            "epoch": self.epoch,
            "experiment": self.experiment,
        }

    def all_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.tensors)
        if self.optimizer is not None:
            for name in sorted(self.optimizer.m):
                out[f"optim.m.{name}"] = self.optimizer.m[name]
                out[f"optim.v.{name}"] = self.optimizer.v[name]
        return out

    def to_bytes(self) -> bytes:
        blob = canonical_json(self.header()).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", self.version, len(blob)), blob]
        tensors = self.all_tensors()
        parts.append(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            parts.append(struct.pack("<I", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.source}: truncated while reading {what}", offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def checkpoint_from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(blob, source)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}", offset=len(MAGIC))
    start = r.pos
    try:
        header = json.loads(r.take(r.u32("config length"), "config").decode("utf-8"))
        model_config = ModelConfig(**header["model"])
        wiring = variant_preset(header["wiring"])
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: unreadable config blob ({exc})", offset=start) from None
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8", errors="replace")
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise FormatError(f"{source}: implausible rank {rank} for {name}", offset=at)
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name}"))
        size = int(np.prod(shape)) if shape else 1
        payload = r.take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(blob):
        raise FormatError(f"{source}: {len(blob) - r.pos} trailing bytes", offset=r.pos)

    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = OptimizerState(**header["optimizer"])
    model_tensors = {}
    for name, arr in tensors.items():
        if name.startswith("optim.") and optimizer is None:
            raise FormatError(f"{source}: optimizer tensor {name} without optimizer header")
        if name.startswith("optim.m."):
            optimizer.m[name[len("optim.m."):]] = arr
        elif name.startswith("optim.v."):
            optimizer.v[name[len("optim.v."):]] = arr
        else:
            model_tensors[name] = arr
    return Checkpoint(
        model_config=model_config,
        wiring=wiring,
        tensors=model_tensors,
        frozen=header.get("frozen", []),
        optimizer=optimizer,
        rng_state=header.get("rng_state"),
        epoch=header.get("epoch", 0),
        experiment=header.get("experiment"),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    return checkpoint_from_bytes(path.read_bytes(), str(path))
