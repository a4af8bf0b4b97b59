"""Binary checkpoint format.

All integers little-endian.

    magic          4 bytes  b"CDCG"
    version        u32
    phase          u32 length + UTF-8 bytes
    step           u64
    n_tensors      u32
    n_tensors x:   name (u32 length + UTF-8), ndim u32, dims u32 * ndim,
                   payload f64 * prod(dims), row-major
    n_blobs        u32
    n_blobs x:     name (u32 length + UTF-8), u64 length, raw bytes

Tensor entries are written in sorted name order.  Blobs carry the config
snapshot and RNG state (canonical JSON) and one Adam state per optimizer
(``optim/<group>``), itself encoded as: step u64, lr/beta1/beta2/eps f64,
then a tensor table of ``m/<param>`` and ``v/<param>`` entries.
"""

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cdcgen.trainer.optim import AdamState

MAGIC = b"CDCG"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    phase: str
    step: int
    params: dict
    config: dict
    rng: dict = field(default_factory=dict)
    optimizers: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _w_str(buf, s):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _w_table(buf, table):
    buf.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.asarray(table[name], dtype="<f8", order="C")  # keeps 0-d shapes
        _w_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def string(self):
        return self.take(self.u32()).decode("utf-8")

    def table(self):
        out = {}
        for _ in range(self.u32()):
            name = self.string()
            ndim = self.u32()
            dims = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
            count = int(np.prod(dims)) if ndim else 1
            out[name] = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        return out


def encode_adam(state):
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", state.step))
    buf.write(struct.pack("<4d", state.lr, state.beta1, state.beta2, state.eps))
    table = {f"m/{k}": v for k, v in state.m.items()}
    table.update({f"v/{k}": v for k, v in state.v.items()})
    _w_table(buf, table)
    return buf.getvalue()


def decode_adam(raw):
    r = _Reader(raw)
    step = r.u64()
    lr, b1, b2, eps = (r.f64() for _ in range(4))
    state = AdamState(lr, b1, b2, eps)
    state.step = step
    for name, arr in r.table().items():
        kind, key = name.split("/", 1)
        (state.m if kind == "m" else state.v)[key] = arr.copy()
    return state


def encode_checkpoint(ckpt):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    _w_str(buf, ckpt.phase)
    buf.write(struct.pack("<Q", ckpt.step))
    _w_table(buf, ckpt.params)
    blobs = {"config": canonical_json(ckpt.config), "rng": canonical_json(ckpt.rng)}
    for name, state in ckpt.optimizers.items():
        blobs[f"optim/{name}"] = encode_adam(state)
    buf.write(struct.pack("<I", len(blobs)))
    for name in sorted(blobs):
        _w_str(buf, name)
        buf.write(struct.pack("<Q", len(blobs[name])))
        buf.write(blobs[name])
    return buf.getvalue()


def decode_checkpoint(raw):
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    phase = r.string()
    step = r.u64()
    params = r.table()
    blobs = {}
    for _ in range(r.u32()):
        name = r.string()
        blobs[name] = r.take(r.u64())
    if r.pos != len(raw):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")
    optimizers = {k[len("optim/"):]: decode_adam(v) for k, v in blobs.items() if k.startswith("optim/")}
    return Checkpoint(phase, step, params, json.loads(blobs["config"]), json.loads(blobs["rng"]),
                      optimizers, version)


def save_checkpoint(path, ckpt):
    data = encode_checkpoint(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_id(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
