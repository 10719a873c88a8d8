"""Versioned binary checkpoints.

Layout (little-endian)::

    8 bytes   magic b"XLCOCKPT"
    u32       format version
    u32 + n   config text (UTF-8, ``key = value`` lines)
    u64 x3    train step, optimizer step, key-encoder step
    f64       current momentum coefficient
    u64 x2    queue capacity, queue fill count
    u32       blob count, then per blob:
              u16 + n name, u8 ndim, u64 x ndim shape, f64 x prod(shape) values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import RunConfig
from .encoder import EncoderParams, parameter_shapes
from .autograd import Tensor
from .momentum import EncoderPair, NegativeQueue
from .optim import OptimizerState

MAGIC = b"XLCOCKPT"
VERSION = 1

# fields that may differ between a checkpoint and the run resuming it
_RESUMABLE_FIELDS = {"data_dir", "eval_dir", "log_interval", "checkpoint_interval"}


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    config: RunConfig
    pair: EncoderPair
    opt: OptimizerState
    queue: NegativeQueue | None
    step: int = 0


def _blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, state: TrainState) -> Path:
    path = Path(path)
    cfg = state.config.to_text().encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<QQQ", state.step, state.opt.step, state.pair.step)
    out += struct.pack("<d", state.pair.momentum)
    queue = state.queue
    out += struct.pack("<QQ", queue.capacity if queue else 0, queue.fill_count if queue else 0)
    blobs = []
    for name, t in state.pair.query.items():
        blobs.append(_blob("query/" + name, t.data))
    for name, t in state.pair.key.items():
        blobs.append(_blob("key/" + name, t.data))
    for name in state.pair.query:
        blobs.append(_blob("adam_m/" + name, state.opt.m[name]))
        blobs.append(_blob("adam_v/" + name, state.opt.v[name]))
    if queue is not None:
        blobs.append(_blob("queue/entries", queue.entries().reshape(-1, queue.dim)))
    out += struct.pack("<I", len(blobs))
    for b in blobs:
        out += b
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b


def config_mismatches(a: RunConfig, b: RunConfig) -> list[str]:
    return [f.name for f in fields(RunConfig)
            if f.name not in _RESUMABLE_FIELDS and getattr(a, f.name) != getattr(b, f.name)]


def load_checkpoint(path, expected_config: RunConfig | None = None) -> TrainState:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    r = _Reader(data)
    r.pos = 8
    (version,) = r.take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.take("<I")
    config = RunConfig.from_text(r.raw(n).decode("utf-8"))
    if expected_config is not None:
        diff = config_mismatches(config, expected_config)
        if diff:
            raise CheckpointError(f"{path}: config mismatch on {', '.join(diff)}")
    step, opt_step, pair_step = r.take("<QQQ")
    (momentum,) = r.take("<d")
    capacity, fill = r.take("<QQ")
    (count,) = r.take("<I")
    blobs = {}
    for _ in range(count):
        (ln,) = r.take("<H")
        name = r.raw(ln).decode("utf-8")
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.raw(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        blobs[name] = arr
    if r.pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last blob")

    enc = config.encoder_config()

    def params(prefix, trainable):
        tensors = {}
        for name in parameter_shapes(enc):
            key = prefix + name
            if key not in blobs:
                raise CheckpointError(f"{path}: missing blob {key}")
            tensors[name] = Tensor(blobs[key], requires_grad=trainable, name=name)
        return EncoderParams(enc, tensors)

    pair = EncoderPair(params("query/", True), params("key/", False), momentum, pair_step)
    opt = OptimizerState({k: blobs["adam_m/" + k] for k in pair.query},
                         {k: blobs["adam_v/" + k] for k in pair.query}, opt_step)
    queue = None
    if "queue/entries" in blobs:
        entries = blobs["queue/entries"]
        queue = NegativeQueue(capacity, enc.projection_dim)
        if fill:
            queue._write(entries)
        if queue.fill_count != fill:
            raise CheckpointError(f"{path}: queue fill mismatch")
    return TrainState(config, pair, opt, queue, step)
