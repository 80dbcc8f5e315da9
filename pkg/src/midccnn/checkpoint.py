"""Binary checkpoint format.

Layout (little-endian)::

    b"MIDC" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 | dims u32 * rank | float64 payload

The run configuration travels as the rank-1 tensor ``__config__`` whose
entries are the bytes of its JSON text.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"MIDC"
VERSION = 1
CONFIG_KEY = "__config__"
MAX_RANK = 8
MAX_ELEMENTS = 1 << 32


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class UnexpectedEndError(CheckpointError):
    pass


class DimensionOverflowError(CheckpointError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise UnexpectedEndError(f"unexpected end of file while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_tensors(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: bad magic (not a MIDC checkpoint)")
    version = r.u32("format version")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    count = r.u32("tensor count")
    out = {}
    for i in range(count):
        name = r.take(r.u32(f"name length of tensor #{i}"), f"name of tensor #{i}").decode("utf-8")
        rank = r.u32(f"rank of tensor {name!r}")
        if rank > MAX_RANK:
            raise DimensionOverflowError(f"tensor {name!r}: rank {rank} exceeds {MAX_RANK}")
        dims = [r.u32(f"dims of tensor {name!r}") for _ in range(rank)]
        n = 1
        for d in dims:
            n *= d
        if n > MAX_ELEMENTS:
            raise DimensionOverflowError(f"tensor {name!r}: dims {dims} overflow the element limit")
        payload = r.take(8 * n, f"payload of tensor {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return out


def encode_config(config: dict) -> np.ndarray:
    text = json.dumps(config, sort_keys=True).encode("utf-8")
    return np.frombuffer(text, dtype=np.uint8).astype(np.float64)


def decode_config(arr: np.ndarray) -> dict:
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8"))


def checkpoint_save(path, net, config: dict, adam_state=None) -> None:
    tensors = {CONFIG_KEY: encode_config(config)}
    tensors.update({f"model.{k}": v for k, v in net.state_dict().items()})
    if adam_state is not None:
        tensors["adam.t"] = np.array(float(adam_state.t))
        for k in adam_state.m:
            tensors[f"adam.m.{k}"] = adam_state.m[k]
            tensors[f"adam.v.{k}"] = adam_state.v[k]
    write_tensors(path, tensors)


def checkpoint_load(path, net=None):
    """Return (config, model state, Adam state or None); loads into ``net`` if given."""
    from .training import AdamState

    tensors = read_tensors(path)
    if CONFIG_KEY not in tensors:
        raise CheckpointError(f"{path}: no embedded configuration")
    config = decode_config(tensors.pop(CONFIG_KEY))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    adam: Optional[AdamState] = None
    if "adam.t" in tensors:
        adam = AdamState(t=int(tensors["adam.t"]))
        for k, v in tensors.items():
            if k.startswith("adam.m."):
                adam.m[k[len("adam.m."):]] = v.copy()
            elif k.startswith("adam.v."):
                adam.v[k[len("adam.v."):]] = v.copy()
    if net is not None:
        net.load_state_dict(state)
    return config, state, adam
