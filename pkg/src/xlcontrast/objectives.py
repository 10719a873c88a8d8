"""Masked-prediction and contrastive losses, and the InfoNCE estimate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import TrainingInstance, pad_batch
from .encoder import EncoderParams, HiddenStates, encode, sequence_repr, token_logits


class NonFiniteLossError(FloatingPointError):
    pass


def mmlm_loss(hidden: HiddenStates, positions, targets, params: EncoderParams) -> Tensor:
    """Mean cross-entropy of the tied-embedding logits at the masked positions.

    Serves TLM unchanged; only the input layout differs.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size == 0:
        raise ValueError("mmlm_loss: no masked positions")
    logits = token_logits(hidden, positions, params)
    if logits.ndim == 1:
        logits = ag.reshape(logits, (1, -1))
    if logits.shape[0] != targets.size:
        raise ValueError(f"mmlm_loss: {logits.shape[0]} positions but {targets.size} targets")
    logp = ag.log_softmax(logits, axis=-1)
    picked = ag.getitem(logp, (np.arange(targets.size), targets))
    return ag.scale(ag.mean(picked), -1.0)


def xlco_scores(query_repr: Tensor, key_repr, queue, temperature: float = 1.0) -> Tensor:
    """``[q.k+, q.n_1, ..., q.n_K]`` per query; ``(K+1,)`` or ``(B, K+1)``.

    ``key_repr`` and ``queue`` are constants (arrays or detached tensors).
    """
    keys = np.asarray(key_repr.data if isinstance(key_repr, Tensor) else key_repr, dtype=np.float64)
    negs = np.asarray(queue.entries() if hasattr(queue, "entries") else queue, dtype=np.float64)
    single = query_repr.ndim == 1
    q = ag.reshape(query_repr, (1, -1)) if single else query_repr
    if single:
        keys = keys.reshape(1, -1)
    d = q.shape[-1]
    if keys.shape != q.shape:
        raise ValueError(f"xlco_scores: query shape {q.shape} and key shape {keys.shape} differ")
    if negs.size and (negs.ndim != 2 or negs.shape[1] != d):
        raise ValueError(f"xlco_scores: queue entries {negs.shape} do not match dim {d}")
    pos = ag.sum(ag.mul(q, Tensor(keys)), axis=-1, keepdims=True)
    parts = [pos]
    if negs.size:
        parts.append(ag.matmul(q, Tensor(negs.T)))
    scores = ag.concat(parts, axis=-1) if len(parts) > 1 else pos
    if temperature != 1.0:
        scores = ag.scale(scores, 1.0 / temperature)
    return ag.reshape(scores, (scores.shape[-1],)) if single else scores


def xlco_loss(scores: Tensor) -> Tensor:
    """``-log softmax(scores)[0]``, averaged over a batch of score rows."""
    if scores.size == 0:
        raise ValueError("xlco_loss: empty scores")
    s = ag.reshape(scores, (1, -1)) if scores.ndim == 1 else scores
    logp = ag.log_softmax(s, axis=-1)
    return ag.scale(ag.mean(ag.getitem(logp, (slice(None), 0))), -1.0)


def infonce_mi_estimate(scores) -> float:
    """InfoNCE lower bound in nats: ``mean(log softmax(s)[0]) + log |N|``."""
    if isinstance(scores, Tensor):
        arr = scores.data
    elif isinstance(scores, np.ndarray):
        arr = scores
    else:
        rows = [np.asarray(r.data if isinstance(r, Tensor) else r, dtype=np.float64) for r in scores]
        if len({r.shape for r in rows}) > 1:
            raise ValueError("infonce_mi_estimate: ragged candidate counts")
        arr = np.stack(rows)
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    if arr.shape[-1] == 0:
        raise ValueError("infonce_mi_estimate: no candidates")
    m = arr.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(arr - m).sum(axis=-1))
    return float(np.mean(arr[:, 0] - lse) + math.log(arr.shape[-1]))


@dataclass
class LossBreakdown:
    """Per-task losses; a disabled task is ``None`` and absent from ``total``."""

    mmlm: Tensor | None
    tlm: Tensor | None
    xlco: Tensor | None
    total: Tensor
    keys: np.ndarray | None = None
    xlco_scores: np.ndarray | None = None

    def as_floats(self) -> dict[str, float]:
        out = {"total": self.total.item()}
        for name in ("mmlm", "tlm", "xlco"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v.item()
        return out


def masked_batch_loss(params: EncoderParams, instances: Sequence[TrainingInstance]) -> Tensor:
    ids, mask = pad_batch([inst.input_ids for inst in instances])
    rows = np.concatenate([np.full(len(inst.positions), i) for i, inst in enumerate(instances)])
    cols = np.concatenate([np.asarray(inst.positions) for inst in instances])
    targets = np.concatenate([np.asarray(inst.targets) for inst in instances])
    hidden = encode(params, ids, mask)
    return mmlm_loss(hidden, (rows, cols), targets, params)


def key_reprs(key_params: EncoderParams, seqs: Sequence[Sequence[int]], layer: int) -> np.ndarray:
    """Key-encoder sequence representations, computed off-tape."""
    ids, mask = pad_batch(seqs)
    with ag.no_grad():
        return sequence_repr(encode(key_params, ids, mask), layer, key_params).numpy()


def contrast_batch(query_params: EncoderParams, key_params: EncoderParams,
                   instances: Sequence[TrainingInstance], queue, layer: int, temperature: float = 1.0):
    """Scores of a batch of XLCO instances and the key vectors to enqueue later."""
    if queue is not None and hasattr(queue, "ready") and not queue.ready:
        raise RuntimeError("XLCO loss requested before the negative queue was pre-filled")
    keys = key_reprs(key_params, [inst.key_ids for inst in instances], layer)
    ids, mask = pad_batch([inst.query_ids for inst in instances])
    q = sequence_repr(encode(query_params, ids, mask), layer, query_params)
    negs = queue if queue is not None else np.zeros((0, keys.shape[1]))
    return xlco_scores(q, keys, negs, temperature), keys


def joint_loss(mmlm_batch, tlm_batch, xlco_batch, query_params: EncoderParams,
               key_params: EncoderParams | None = None, queue=None, layer: int | None = None,
               temperature: float = 1.0) -> LossBreakdown:
    """Equal-weight sum of the enabled task losses.

    A batch passed as ``None`` disables its task (an ablation); an empty list
    is an error. XLCO uses the [CLS] representation at ``layer`` (default:
    the configured universal layer).
    """
    parts = {}
    keys = scores = None
    for name, batch in (("mmlm", mmlm_batch), ("tlm", tlm_batch), ("xlco", xlco_batch)):
        if batch is None:
            parts[name] = None
            continue
        if len(batch) == 0:
            raise ValueError(f"joint_loss: {name} batch is empty")
        if name == "xlco":
            if key_params is None:
                raise ValueError("joint_loss: XLCO needs key-encoder parameters")
            lay = query_params.config.universal_layer if layer is None else layer
            s, keys = contrast_batch(query_params, key_params, batch, queue, lay, temperature)
            scores = s.numpy()
            loss = xlco_loss(s)
        else:
            loss = masked_batch_loss(query_params, batch)
        if not np.isfinite(loss.item()):
            raise NonFiniteLossError(f"joint_loss: {name} loss is not finite")
        parts[name] = loss
    active = [v for v in parts.values() if v is not None]
    if not active:
        raise ValueError("joint_loss: every task is disabled")
    total = active[0]
    for v in active[1:]:
        total = ag.add(total, v)
    return LossBreakdown(parts["mmlm"], parts["tlm"], parts["xlco"], total, keys, scores)
