"""Cross-lingual retrieval, per-layer sweeps, transfer gap and MI probes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .corpus import ParallelCorpus, layout, mask_sequence, pad_batch
from .encoder import EncoderParams, encode, layer_mean_repr, sequence_repr, token_logits
from .objectives import infonce_mi_estimate


@dataclass
class RetrievalResult:
    direction: str
    layer: int
    top1_accuracy: float
    ranks: list[int]  # 1-based rank of the aligned target for each query


def cosine_matrix(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    for label, m in (("source", src), ("target", tgt)):
        norms = np.linalg.norm(m, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ValueError(f"retrieve: {label} vector {int(zero[0])} is zero; cosine undefined")
    a = src / np.linalg.norm(src, axis=1, keepdims=True)
    b = tgt / np.linalg.norm(tgt, axis=1, keepdims=True)
    return a @ b.T


def retrieve(src_reprs, tgt_reprs, direction: str = "src->tgt", layer: int = -1) -> RetrievalResult:
    """Rank every target by cosine similarity for each source; ties go to the lower index."""
    src = np.asarray(src_reprs, dtype=np.float64)
    tgt = np.asarray(tgt_reprs, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape != tgt.shape:
        raise ValueError(f"retrieve: need equal-length lists of equal-dim vectors, got {src.shape} and {tgt.shape}")
    if len(src) == 0:
        raise ValueError("retrieve: empty evaluation set")
    sim = cosine_matrix(src, tgt)
    n = len(src)
    truth = sim[np.arange(n), np.arange(n)]
    # candidates strictly better, or equal with a lower index, outrank the truth
    better = (sim > truth[:, None]).sum(axis=1)
    ties_before = np.array([(sim[i, :i] == truth[i]).sum() for i in range(n)])
    ranks = (1 + better + ties_before).tolist()
    acc = float(np.mean([r == 1 for r in ranks]))
    return RetrievalResult(direction, layer, acc, [int(r) for r in ranks])


def sentence_inputs(sentences: Sequence[Sequence[int]], max_positions: int):
    seqs = [layout([s[: max_positions - 2]]) for s in sentences]
    return pad_batch(seqs)


def layer_reprs(params: EncoderParams, sentences, layers: Sequence[int], batch_size: int = 256) -> dict[int, np.ndarray]:
    """Mean-pooled hidden vectors of ``[CLS] s [SEP]`` at each requested layer."""
    out = {l: [] for l in layers}
    with ag.no_grad():
        for start in range(0, len(sentences), batch_size):
            ids, mask = sentence_inputs(sentences[start:start + batch_size], params.config.max_positions)
            hidden = encode(params, ids, mask)
            for l in layers:
                out[l].append(layer_mean_repr(hidden, l).numpy())
    return {l: np.concatenate(v) for l, v in out.items()}


def layer_sweep(params: EncoderParams, eval_sets: Mapping[str, ParallelCorpus] | ParallelCorpus,
                layers: Sequence[int] | None = None, pivot: str | None = None) -> list[RetrievalResult]:
    """Retrieval accuracy at each layer, both directions, for every eval corpus.

    Directions are written ``xx->pivot`` and ``pivot->xx``. With more than one
    corpus, an ``xx->{pivot}`` / ``{pivot}->xx`` average row is appended per layer.
    """
    if isinstance(eval_sets, ParallelCorpus):
        eval_sets = {eval_sets.name: eval_sets}
    if layers is None:
        layers = list(range(1, params.config.num_layers + 1))
    for l in layers:
        if not 0 <= l <= params.config.num_layers:
            raise IndexError(f"layer_sweep: layer {l} out of range [0, {params.config.num_layers}]")
    results = []
    per_layer: dict[tuple[int, str], list[float]] = {}
    for corpus in eval_sets.values():
        piv = pivot or corpus.src_lang
        if piv == corpus.src_lang:
            pv_side, xx_side, xx = 0, 1, corpus.tgt_lang
        elif piv == corpus.tgt_lang:
            pv_side, xx_side, xx = 1, 0, corpus.src_lang
        else:
            raise ValueError(f"layer_sweep: corpus {corpus.name} does not involve pivot {piv!r}")
        pv = layer_reprs(params, [p[pv_side] for p in corpus.pairs], layers)
        xr = layer_reprs(params, [p[xx_side] for p in corpus.pairs], layers)
        for l in layers:
            for d, (a, b) in ((f"{xx}->{piv}", (xr[l], pv[l])), (f"{piv}->{xx}", (pv[l], xr[l]))):
                r = retrieve(a, b, d, l)
                results.append(r)
                per_layer.setdefault((l, "xx->" + piv if d.startswith(xx) else piv + "->xx"), []).append(r.top1_accuracy)
    if len(eval_sets) > 1:
        for (l, d), accs in sorted(per_layer.items()):
            results.append(RetrievalResult(d, l, float(np.mean(accs)), []))
    return results


def accuracy_at(results: Sequence[RetrievalResult], direction: str, layer: int) -> float:
    for r in results:
        if r.direction == direction and r.layer == layer:
            return r.top1_accuracy
    raise KeyError(f"no result for {direction} at layer {layer}")


def write_report(path, results: Sequence[RetrievalResult]) -> Path:
    path = Path(path)
    path.write_text("".join(f"{r.direction}\t{r.layer}\t{r.top1_accuracy!r}\n" for r in results),
                    encoding="utf-8")
    return path


def read_report(path) -> list[tuple[str, int, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        d, l, a = line.split("\t")
        rows.append((d, int(l), float(a)))
    return rows


def transfer_gap(scores: Mapping[str, float], pivot: str) -> float:
    """Pivot score minus the mean score of every other language."""
    if pivot not in scores:
        raise KeyError(f"transfer_gap: pivot {pivot!r} missing from scores")
    others = [v for k, v in scores.items() if k != pivot]
    if not others:
        raise ValueError("transfer_gap: need at least one non-pivot language")
    return float(scores[pivot] - np.mean(others))


def masked_token_accuracy(params: EncoderParams, sentences, rng: np.random.Generator,
                          mask_rate: float = 0.15, batch_size: int = 256) -> float:
    """Top-1 accuracy of masked-token recovery on held-out sentences."""
    hits = total = 0
    vocab_size = params.config.vocab_size
    with ag.no_grad():
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start:start + batch_size]
            inst = [mask_sequence(layout([s[: params.config.max_positions - 2]]), mask_rate, rng, vocab_size)
                    for s in chunk]
            ids, mask = pad_batch([m[0] for m in inst])
            rows = np.concatenate([np.full(len(m[1]), i) for i, m in enumerate(inst)])
            cols = np.concatenate([np.asarray(m[1]) for m in inst])
            targets = np.concatenate([np.asarray(m[2]) for m in inst])
            logits = token_logits(encode(params, ids, mask), (rows, cols), params).data
            hits += int((logits.argmax(axis=1) == targets).sum())
            total += targets.size
    return hits / total


def language_scores(params: EncoderParams, eval_sets: Mapping[str, ParallelCorpus], seed: int = 0) -> dict[str, float]:
    """Masked-token accuracy (in percent) per language over the eval sentences."""
    by_lang: dict[str, list] = {}
    for corpus in eval_sets.values():
        by_lang.setdefault(corpus.src_lang, []).extend(p[0] for p in corpus.pairs)
        by_lang.setdefault(corpus.tgt_lang, []).extend(p[1] for p in corpus.pairs)
    rng = np.random.default_rng([seed, 3])
    return {lang: 100.0 * masked_token_accuracy(params, sents, rng) for lang, sents in sorted(by_lang.items())}


def write_gap_report(path, scores: Mapping[str, float], pivot: str) -> Path:
    path = Path(path)
    lines = [f"{lang}\t{v!r}\n" for lang, v in scores.items()]
    lines.append(f"transfer_gap\t{transfer_gap(scores, pivot)!r}\n")
    path.write_text("".join(lines), encoding="utf-8")
    return path


def estimate_mi(query: EncoderParams, key: EncoderParams, corpus: ParallelCorpus, layer: int | None = None,
                max_pairs: int = 256) -> float:
    """InfoNCE estimate on a parallel set, other pairs in the set acting as negatives."""
    lay = query.config.universal_layer if layer is None else layer
    pairs = corpus.pairs[:max_pairs]
    if len(pairs) < 2:
        raise ValueError("estimate_mi: need at least two pairs")
    with ag.no_grad():
        ids, mask = sentence_inputs([p[0] for p in pairs], query.config.max_positions)
        q = sequence_repr(encode(query, ids, mask), lay, query).data
        ids, mask = sentence_inputs([p[1] for p in pairs], key.config.max_positions)
        k = sequence_repr(encode(key, ids, mask), lay, key).data
    sim = q @ k.T
    n = len(pairs)
    rows = [np.concatenate(([sim[i, i]], np.delete(sim[i], i))) for i in range(n)]
    return infonce_mi_estimate(np.stack(rows))


def chance_level(n: int) -> float:
    return 1.0 / n if n else math.nan
