"""Binary checkpoints: parameters, optimizer state and metadata in one file.

Layout: magic ``GREC``, u32 version, u32 header length, a JSON header, then the
blobs as little-endian float64 in header order. The header lists every blob's name,
shape and in-memory dtype along with the model config, the step and free-form metadata.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .optim import AdamW

MAGIC = b"GREC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    cfg: M.ModelConfig
    opt: AdamW | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)


def to_bytes(ck: Checkpoint) -> bytes:
    blobs = {f"param.{k}": v for k, v in ck.params.items()}
    opt_header = None
    if ck.opt is not None:
        state = ck.opt.state()
        blobs.update({k: v for k, v in state.items() if k != "adam.step"})
        opt_header = {"lr": ck.opt.lr, "beta1": ck.opt.beta1, "beta2": ck.opt.beta2, "eps": ck.opt.eps,
                      "weight_decay": ck.opt.weight_decay, "clip_norm": ck.opt.clip_norm,
                      "step": int(ck.opt.step)}
    names = sorted(blobs)
    header = {"model": dataclasses.asdict(ck.cfg), "step": int(ck.step), "meta": ck.meta, "optimizer": opt_header,
              "blobs": [[n, list(np.shape(blobs[n])), np.asarray(blobs[n]).dtype.str] for n in names]}
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(blobs[n], dtype="<f8").tobytes() for n in names)
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + body


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint")
    magic, version, n_head = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + n_head])
    except ValueError as e:
        raise CheckpointError(f"{source}: corrupt header") from e
    offset = _PREFIX.size + n_head
    blobs = {}
    for name, shape, dtype in header["blobs"]:
        count = int(np.prod(shape))
        if offset + 8 * count > len(raw):
            raise CheckpointError(f"{source}: truncated blob {name}")
        blobs[name] = np.frombuffer(raw, "<f8", count, offset).reshape(shape).astype(dtype)
        offset += 8 * count
    if offset != len(raw):
        raise CheckpointError(f"{source}: trailing bytes")
    model = header["model"]
    cfg = M.ModelConfig(**model)
    params = {k[len("param."):]: v for k, v in blobs.items() if k.startswith("param.")}
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = AdamW(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], weight_decay=o["weight_decay"],
                    clip_norm=o["clip_norm"])
        state = {k: v for k, v in blobs.items() if k.startswith("adam.")}
        state["adam.step"] = np.array([o["step"]])
        opt.load_state(state)
    return Checkpoint(params, cfg, opt, header["step"], header["meta"])


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes(), str(p))
