"""Checkpoint bundles: a JSON manifest next to a flat little-endian float32 archive.

A bundle is a directory::

    manifest.json   version, stage, config, config_hash, message, metrics, ...
    weights.bin     named float32 arrays, each with its own shape header

``weights.bin`` layout (all integers little-endian)::

    b"INRMARKW"  u32 version  u32 count
    count x [ u16 name_len | name (utf-8) | u8 ndim | u32 dim * ndim | f32 data ]

Tensors that are not float32 (BatchNorm counters, RNG states, optimizer step
counts) are stored as float32 and their original dtype is recorded in the
manifest so ``load`` restores them exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError

MAGIC = b"INRMARKW"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f4")
            key = name.encode()
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractError(f"{path} is not an inrmark weight archive")
    version, count = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported archive version {version}")
    pos, out = 16, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + n].decode()
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(data):
        raise ContractError(f"{path} has {len(data) - pos} trailing bytes")
    return out


def _flatten(obj, prefix, arrays, dtypes):
    """Pull tensors out of a nested structure, leaving JSON-able placeholders."""
    if isinstance(obj, torch.Tensor):
        arrays[prefix] = obj.detach().cpu().to(torch.float32).numpy()
        if obj.dtype != torch.float32:
            dtypes[prefix] = str(obj.dtype).removeprefix("torch.")
        return {"__array__": prefix}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {k: _flatten(v, f"{prefix}/{k}", arrays, dtypes) for k, v in obj.items()}
        return {"__items__": [[k, _flatten(v, f"{prefix}/{k}", arrays, dtypes)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [_flatten(v, f"{prefix}/{i}", arrays, dtypes) for i, v in enumerate(obj)]
    return obj


def _unflatten(obj, arrays, dtypes):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            name = obj["__array__"]
            t = torch.from_numpy(arrays[name].copy())
            return t.to(getattr(torch, dtypes[name])) if name in dtypes else t
        if set(obj) == {"__items__"}:
            return {k: _unflatten(v, arrays, dtypes) for k, v in obj["__items__"]}
        return {k: _unflatten(v, arrays, dtypes) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unflatten(v, arrays, dtypes) for v in obj]
    return obj


@dataclass
class CheckpointBundle:
    stage: str
    config: dict
    tensors: dict = field(default_factory=dict)
    message: list[int] | None = None
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays, dtypes = {}, {}
        layout = _flatten(self.tensors, "", arrays, dtypes)
        manifest = {
            "version": FORMAT_VERSION,
            "stage": self.stage,
            "config": self.config,
            "config_hash": self.config_hash,
            "message": self.message,
            "metrics": self.metrics,
            "extra": self.extra,
            "layout": layout,
            "dtypes": dtypes,
        }
        write_arrays(directory / WEIGHTS, arrays)
        (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, default=_json_default))
        return directory

    @classmethod
    def load(cls, directory: str | Path, stage: str | None = None) -> CheckpointBundle:
        directory = Path(directory)
        if not (directory / MANIFEST).is_file():
            raise FileNotFoundError(f"no checkpoint manifest in {directory}")
        manifest = json.loads((directory / MANIFEST).read_text())
        if manifest.get("version") != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint version {manifest.get('version')}")
        if stage is not None and manifest["stage"] != stage:
            raise ContractError(f"{directory} holds a {manifest['stage']!r} checkpoint, expected {stage!r}")
        if config_hash(manifest["config"]) != manifest["config_hash"]:
            raise ContractError(f"{directory}: manifest config hash does not match its config")
        arrays = read_arrays(directory / WEIGHTS)
        return cls(
            stage=manifest["stage"],
            config=manifest["config"],
            tensors=_unflatten(manifest["layout"], arrays, manifest["dtypes"]),
            message=manifest["message"],
            metrics=manifest["metrics"],
            extra=manifest["extra"],
        )


def _json_default(obj):
    if isinstance(obj, float) and np.isinf(obj):
        return "inf"
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")
