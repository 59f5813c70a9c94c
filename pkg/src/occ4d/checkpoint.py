"""Checkpoint container: named f32 tensors + JSON header, bit-exact round trip.

Layout::

    magic "OCK1" | u8 version=1 | u32 header_len | header JSON (utf-8) | payload

The header records the step counter, a config snapshot, free-form metadata and
the tensor index (name, shape, byte offset into the payload).  All tensors are
little-endian float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"OCK1"
VERSION = 1
_PREFIX = struct.Struct("<4sBI")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    def tensor(self, name: str) -> torch.Tensor:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        return self.tensors[name]


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor],
                    config: dict | None = None, step: int = 0,
                    meta: dict | None = None) -> None:
    index = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": VERSION,
        "step": int(step),
        "config": config or {},
        "meta": meta or {},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: too short for a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:header_end].decode())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = raw[header_end:]
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} truncated")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(tensors=tensors, config=header.get("config", {}),
                      step=header.get("step", 0), meta=header.get("meta", {}))


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Parameters and persistent buffers of a module, name-keyed for a checkpoint."""
    out = {}
    for name, value in module.state_dict().items():
        out[prefix + name] = value.detach().clone()
    return out


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor],
                prefix: str = "") -> None:
    state = {}
    for name in module.state_dict():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key!r} for module load")
        state[name] = tensors[key]
    module.load_state_dict(state)


def optimizer_tensors(optimizer: torch.optim.Optimizer,
                      named_params: list[tuple[str, torch.Tensor]],
                      prefix: str = "opt.") -> dict[str, torch.Tensor]:
    """Flatten AdamW state (exp_avg, exp_avg_sq, step) into named f32 tensors."""
    by_param = {id(p): name for name, p in named_params}
    out: dict[str, torch.Tensor] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = by_param[id(p)]
            out[f"{prefix}{name}.exp_avg"] = state["exp_avg"].detach().clone()
            out[f"{prefix}{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().clone()
            out[f"{prefix}{name}.step"] = torch.as_tensor(state["step"]).float().reshape(1)
    return out


def load_optimizer(optimizer: torch.optim.Optimizer,
                   named_params: list[tuple[str, torch.Tensor]],
                   tensors: dict[str, torch.Tensor], prefix: str = "opt.") -> None:
    by_param = {id(p): name for name, p in named_params}
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = by_param[id(p)]
            key = f"{prefix}{name}.exp_avg"
            if key not in tensors:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"{prefix}{name}.step"][0])),
                "exp_avg": tensors[f"{prefix}{name}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"{prefix}{name}.exp_avg_sq"].clone(),
            }
