"""Versioned binary checkpoint container.

Layout (little endian)::

    b"KDCK" | u32 format version | u64 header length | JSON header | tensor payload

The header records the backbone spec, training counters, optimizer
hyperparameters and an index of (name, dtype, shape, offset, nbytes) for
every tensor in the payload. Serialisation is deterministic, so
save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .models import BackboneSpec

__all__ = [
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointError",
    "CheckpointVersionError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "checkpoint_from_bytes",
]

MAGIC = b"KDCK"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Unreadable checkpoint; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    spec: BackboneSpec
    state: Dict[str, torch.Tensor]
    epoch: int = 0
    best_val_loss: float = math.inf
    optimizer: Optional[dict] = None
    train_state: dict = field(default_factory=dict)
    rng_state: Optional[torch.Tensor] = None
    extras: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _float_key(x: float):
    # JSON has no inf/nan literals in strict mode
    if math.isfinite(x):
        return x
    return repr(x)


def _unfloat(x):
    if isinstance(x, str) and x in ("inf", "-inf", "nan"):
        return float(x)
    return x


def _split_optimizer(opt: Optional[dict]):
    if opt is None:
        return None, {}
    tensors = {}
    state_meta = {}
    for pid in sorted(opt.get("state", {}), key=int):
        entry = {}
        for key, value in sorted(opt["state"][pid].items()):
            if isinstance(value, torch.Tensor):
                tensors[f"optim/{pid}/{key}"] = value
                entry[key] = {"tensor": f"optim/{pid}/{key}"}
            else:
                entry[key] = value
        state_meta[str(pid)] = entry
    return {"param_groups": opt["param_groups"], "state": state_meta}, tensors


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors: Dict[str, torch.Tensor] = {f"model/{k}": v for k, v in ckpt.state.items()}
    opt_meta, opt_tensors = _split_optimizer(ckpt.optimizer)
    tensors.update(opt_tensors)
    if ckpt.rng_state is not None:
        tensors["rng/torch"] = ckpt.rng_state

    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"cannot store tensor {name} of dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "spec": ckpt.spec.to_dict(),
        "epoch": int(ckpt.epoch),
        "best_val_loss": _float_key(float(ckpt.best_val_loss)),
        "optimizer": opt_meta,
        "train_state": {k: _float_key(v) if isinstance(v, float) else v for k, v in ckpt.train_state.items()},
        "extras": ckpt.extras,
        "tensors": index,
        "payload_nbytes": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(blobs)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREAMBLE.size:
        raise CheckpointError(f"file too short for preamble ({len(buf)} bytes)", len(buf))
    magic, version, head_len = _PREAMBLE.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})", 4
        )
    start = _PREAMBLE.size
    if start + head_len > len(buf):
        raise CheckpointError(f"truncated header: need {head_len} bytes, have {len(buf) - start}", len(buf))
    try:
        header = json.loads(buf[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise CheckpointError(f"corrupt header: {exc}", start + pos) from None
    base = start + head_len
    if base + header["payload_nbytes"] != len(buf):
        raise CheckpointError(
            f"payload size mismatch: header says {header['payload_nbytes']}, file has {len(buf) - base}",
            min(len(buf), base + header["payload_nbytes"]),
        )

    tensors = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=lo).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[entry["dtype"]])

    optimizer = None
    if header["optimizer"] is not None:
        state = {}
        for pid, entry in header["optimizer"]["state"].items():
            state[int(pid)] = {
                k: tensors[v["tensor"]] if isinstance(v, dict) and "tensor" in v else v
                for k, v in entry.items()
            }
        optimizer = {"state": state, "param_groups": header["optimizer"]["param_groups"]}

    return Checkpoint(
        spec=BackboneSpec.from_dict(header["spec"]),
        state={k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")},
        epoch=header["epoch"],
        best_val_loss=float(_unfloat(header["best_val_loss"])),
        optimizer=optimizer,
        train_state={k: _unfloat(v) for k, v in header["train_state"].items()},
        rng_state=tensors.get("rng/torch"),
        extras=header["extras"],
        format_version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
