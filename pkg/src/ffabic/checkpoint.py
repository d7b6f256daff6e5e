"""Binary checkpoint format.

::

    magic "FFABCKPT" | version u16 | meta_len u32 | meta JSON (sorted keys) |
    n_tensors u32 | n x (name_len u16 | name | dtype u8 | ndim u8 |
    shape u32*ndim | nbytes u64 | raw little-endian data) | sha256 of all of the above

The metadata carries the model configuration, its hash, the step counter,
the training stage and the seed. Tensor names are prefixed ``model/`` for the
state dict and ``optim/`` for optimiser state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import FormatError, ModelError

MAGIC = b"FFABCKPT"
VERSION = 1

_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3}
_NP = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_TORCH = {v: k for k, v in _DTYPES.items()}


def config_hash(model_config: dict) -> str:
    return hashlib.sha256(json.dumps(model_config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def model_config(self) -> dict:
        return self.meta["model_config"]

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def optimizer_state(self) -> dict[str, torch.Tensor]:
        return {k[len("optim/"):]: v for k, v in self.tensors.items() if k.startswith("optim/")}


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.tensors))]
    for name, t in ckpt.tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {t.dtype} for {name}")
        code = _DTYPES[t.dtype]
        raw = t.numpy().astype(_NP[code], copy=False).tobytes()
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", code, t.dim()),
                  struct.pack(f"<{t.dim()}I", *t.shape), struct.pack("<Q", len(raw)), raw]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"checkpoint truncated at byte {len(self.data)} while reading {what} "
                f"(needed {n} bytes at offset {self.pos})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic at byte 0)")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (mlen,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(mlen, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata at byte {r.pos - mlen}: {exc}") from None
    (n,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(n):
        (nl,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(nl, f"tensor {i} name").decode(errors="replace")
        code, ndim = r.unpack("<BB", f"{name} header")
        if code not in _NP:
            raise FormatError(f"unknown dtype code {code} for {name} at byte {r.pos - 2}")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        (nbytes,) = r.unpack("<Q", f"{name} size")
        raw = r.take(nbytes, f"{name} data")
        arr = np.frombuffer(raw, dtype=_NP[code])
        if arr.size != int(np.prod(shape)):
            raise FormatError(f"{name}: {arr.size} values for shape {shape}")
        tensors[name] = torch.from_numpy(arr.reshape(shape).astype(arr.dtype.newbyteorder("="))).to(_TORCH[code])
    digest = r.take(32, "checksum")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checksum at byte {r.pos}")
    if hashlib.sha256(data[:-32]).digest() != digest:
        raise FormatError("checkpoint checksum mismatch (file corrupt)")
    return Checkpoint(meta, tensors)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path: str | Path, expected_config_hash: Optional[str] = None) -> Checkpoint:
    ckpt = from_bytes(Path(path).read_bytes())
    if expected_config_hash is not None and ckpt.meta.get("config_hash") != expected_config_hash:
        raise ModelError(
            f"checkpoint config hash {ckpt.meta.get('config_hash')} does not match expected {expected_config_hash}"
        )
    return ckpt
