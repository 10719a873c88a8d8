"""Query/key encoder pair, EMA key updates and the FIFO negative queue."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import TrainingInstance
from .encoder import EncoderParams
from .objectives import contrast_batch, key_reprs, xlco_loss

MOMENTUM_MODES = ("constant", "inverse_sqrt", "off")


class QueueNotReadyError(RuntimeError):
    pass


class NegativeQueue:
    """Fixed-capacity ring buffer of detached key vectors, oldest first."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 0 or dim <= 0:
            raise ValueError(f"invalid queue capacity {capacity} / dim {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((self.capacity, self.dim))
        self._head = 0  # index of the oldest entry once full
        self.fill_count = 0

    def __len__(self) -> int:
        return self.fill_count

    @property
    def ready(self) -> bool:
        return self.fill_count == self.capacity

    def entries(self) -> np.ndarray:
        """Copy of the stored vectors in FIFO order, shape ``(len, dim)``."""
        if self.fill_count < self.capacity:
            return self._buf[: self.fill_count].copy()
        return np.roll(self._buf, -self._head, axis=0)

    def _write(self, keys: np.ndarray) -> None:
        if self.capacity == 0:
            return
        keys = keys[-self.capacity:]
        for row in keys:
            if self.fill_count < self.capacity:
                self._buf[self.fill_count] = row
                self.fill_count += 1
            else:
                self._buf[self._head] = row
                self._head = (self._head + 1) % self.capacity

    def _check(self, keys) -> np.ndarray:
        arr = np.array(getattr(keys, "data", keys), dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ValueError(f"queue_push: key shape {arr.shape} does not match dim {self.dim}")
        return arr

    def push(self, keys) -> "NegativeQueue":
        """Append keys and evict the oldest, keeping the length at capacity."""
        if not self.ready:
            raise QueueNotReadyError("queue_push before prefill completed")
        self._write(self._check(keys))
        return self

    def state(self) -> tuple[np.ndarray, int]:
        return self.entries(), self.fill_count

    @classmethod
    def from_entries(cls, capacity: int, entries: np.ndarray) -> "NegativeQueue":
        q = cls(capacity, entries.shape[1])
        q._write(np.asarray(entries, dtype=np.float64))
        return q


def queue_push(queue: NegativeQueue, new_keys) -> NegativeQueue:
    return queue.push(new_keys)


def prefill(queue: NegativeQueue, key_params: EncoderParams, key_seqs: Sequence[Sequence[int]],
            layer: int, batch_size: int = 64) -> NegativeQueue:
    """Fill an empty queue with key-encoder vectors of the first ``capacity`` sequences."""
    if queue.fill_count:
        raise ValueError("prefill: queue is not empty")
    if len(key_seqs) < queue.capacity:
        raise ValueError(f"prefill: {len(key_seqs)} sequences available, queue capacity is {queue.capacity}")
    seqs = list(key_seqs[: queue.capacity])
    for start in range(0, len(seqs), batch_size):
        queue._write(queue._check(key_reprs(key_params, seqs[start:start + batch_size], layer)))
    return queue


def momentum_schedule(t: int, mode: str = "constant", m_const: float = 0.9999, m_cap: float = 0.9995) -> float:
    """Momentum coefficient at optimizer step ``t`` (1-based).

    ``inverse_sqrt`` is ``min(1 - t**-0.51, m_cap)``; ``off`` always returns 0,
    which keeps the key encoder equal to the query encoder.
    """
    if mode == "constant":
        return float(m_const)
    if mode == "off":
        return 0.0
    if mode == "inverse_sqrt":
        if t < 1:
            raise ValueError(f"inverse_sqrt momentum needs t >= 1, got {t}")
        return min(1.0 - float(t) ** -0.51, float(m_cap))
    raise ValueError(f"unknown momentum mode {mode!r}; expected one of {MOMENTUM_MODES}")


@dataclass
class EncoderPair:
    query: EncoderParams
    key: EncoderParams
    momentum: float = 0.9999
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.query.config != self.key.config:
            raise ValueError("query and key encoders must share one architecture")

    @classmethod
    def create(cls, query: EncoderParams, momentum: float = 0.9999) -> "EncoderPair":
        key = query.copy()
        for t in key.values():
            t.requires_grad = False
        return cls(query, key, momentum)


def momentum_update(pair: EncoderPair, momentum: float | None = None) -> EncoderParams:
    """``key <- m * key + (1 - m) * query`` for every parameter."""
    m = pair.momentum if momentum is None else float(momentum)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    for name, q in pair.query.items():
        k = pair.key[name]
        if k.shape != q.shape:
            raise ValueError(f"momentum_update: {name} shapes differ: key {k.shape}, query {q.shape}")
        k.data = m * k.data + (1.0 - m) * q.data
    pair.momentum = m
    pair.step += 1
    return pair.key


def xlco_step(pair: EncoderPair, queue: NegativeQueue, instances: Sequence[TrainingInstance],
              layer: int | None = None, temperature: float = 1.0):
    """Contrastive loss for a batch; returns ``(loss, keys, scores)``.

    The caller backpropagates ``loss``, steps the optimizer, then calls
    :func:`finish_xlco_step` so the batch never sees its own keys as negatives.
    """
    if not queue.ready:
        raise QueueNotReadyError("XLCO loss computed before prefill completed")
    lay = pair.query.config.universal_layer if layer is None else layer
    scores, keys = contrast_batch(pair.query, pair.key, instances, queue, lay, temperature)
    return xlco_loss(scores), keys, scores


def finish_xlco_step(pair: EncoderPair, queue: NegativeQueue, keys: np.ndarray | None,
                     momentum: float) -> None:
    if keys is not None:
        queue.push(keys)
    momentum_update(pair, momentum)
