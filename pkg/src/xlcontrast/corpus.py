"""Vocabulary, corpora, sampling, masking and training-instance construction."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")
CLS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(5)
NUM_SPECIAL = len(SPECIAL_TOKENS)

MMLM, TLM, XLCO = "mmlm", "tlm", "xlco"


class Vocab:
    """Token/id bijection with the five reserved specials at ids 0-4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError(f"vocab must start with {SPECIAL_TOKENS}, got {tuple(tokens[:NUM_SPECIAL])}")
        index = {}
        for i, tok in enumerate(tokens):
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f"invalid vocab token {tok!r} at line {i + 1}")
            if tok in index:
                raise ValueError(f"duplicate vocab token {tok!r} at line {i + 1}")
            index[tok] = i
        self.tokens = tokens
        self._index = index

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, sentence: str) -> tuple[int, ...]:
        return tuple(self.id(tok) for tok in sentence.split())

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    @property
    def regular_ids(self) -> np.ndarray:
        return np.arange(NUM_SPECIAL, len(self.tokens))

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class MonoCorpus:
    lang: str
    sentences: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.sentences:
            raise ValueError(f"monolingual corpus {self.lang!r} is empty")
        for i, s in enumerate(self.sentences):
            if not s:
                raise ValueError(f"monolingual corpus {self.lang!r}: sentence {i} is empty")

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class ParallelCorpus:
    src_lang: str
    tgt_lang: str
    pairs: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError(f"parallel corpus {self.name} is empty")
        for i, (s, t) in enumerate(self.pairs):
            if not s or not t:
                raise ValueError(f"parallel corpus {self.name}: pair {i} has an empty side")

    @property
    def name(self) -> str:
        return f"{self.src_lang}-{self.tgt_lang}"

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class TrainingInstance:
    """One prepared example.

    MMLM/TLM use ``input_ids``/``positions``/``targets``; XLCO uses
    ``query_ids``/``key_ids``. ``arrangement`` records the mixup layout
    (``"same"`` or ``"swapped"`` segment order, ``"plain"`` without mixup).
    """

    kind: str
    input_ids: tuple[int, ...] = ()
    positions: tuple[int, ...] = ()
    targets: tuple[int, ...] = ()
    query_ids: tuple[int, ...] = ()
    key_ids: tuple[int, ...] = ()
    langs: tuple[str, ...] = ()
    arrangement: str | None = None
    query_segments: tuple[tuple[int, ...], ...] = field(default=(), repr=False)
    key_segments: tuple[tuple[int, ...], ...] = field(default=(), repr=False)

    @property
    def attention_mask(self) -> tuple[bool, ...]:
        return (True,) * len(self.input_ids or self.query_ids)

    def unmasked(self) -> tuple[int, ...]:
        ids = list(self.input_ids)
        for p, t in zip(self.positions, self.targets):
            ids[p] = t
        return tuple(ids)


# --- file formats ----------------------------------------------------------

_MONO_RE = re.compile(r"^mono\.([^.]+)\.txt$")
_PARA_RE = re.compile(r"^para\.([^.-]+)-([^.-]+)\.tsv$")


def read_mono(path, vocab: Vocab) -> MonoCorpus:
    path = Path(path)
    m = _MONO_RE.match(path.name)
    if not m:
        raise ValueError(f"monolingual filename must be mono.<lang>.txt, got {path.name}")
    lines = path.read_text(encoding="utf-8").splitlines()
    return MonoCorpus(m.group(1), tuple(vocab.encode(line) for line in lines if line.strip()))


def read_parallel(path, vocab: Vocab) -> ParallelCorpus:
    path = Path(path)
    m = _PARA_RE.match(path.name)
    if not m:
        raise ValueError(f"parallel filename must be para.<src>-<tgt>.tsv, got {path.name}")
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path.name}:{lineno}: expected src<TAB>tgt")
        pairs.append((vocab.encode(parts[0]), vocab.encode(parts[1])))
    return ParallelCorpus(m.group(1), m.group(2), tuple(pairs))


def write_mono(directory, corpus: MonoCorpus, vocab: Vocab) -> Path:
    path = Path(directory) / f"mono.{corpus.lang}.txt"
    path.write_text("".join(vocab.decode(s) + "\n" for s in corpus.sentences), encoding="utf-8")
    return path


def write_parallel(directory, corpus: ParallelCorpus, vocab: Vocab) -> Path:
    path = Path(directory) / f"para.{corpus.name}.tsv"
    path.write_text("".join(f"{vocab.decode(s)}\t{vocab.decode(t)}\n" for s, t in corpus.pairs),
                    encoding="utf-8")
    return path


def load_corpora(directory, vocab: Vocab, pivot: str | None = None):
    """Read every ``mono.*.txt`` and ``para.*-*.tsv`` file in ``directory``.

    Returns ``(mono, parallel)`` dicts keyed by language and corpus name.
    With ``pivot`` given, every parallel corpus must involve it.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {directory}")
    mono = {}
    for path in sorted(directory.glob("mono.*.txt")):
        c = read_mono(path, vocab)
        mono[c.lang] = c
    parallel = {}
    for path in sorted(directory.glob("para.*.tsv")):
        c = read_parallel(path, vocab)
        if pivot is not None and pivot not in (c.src_lang, c.tgt_lang):
            raise ValueError(f"parallel corpus {c.name} does not involve pivot language {pivot!r}")
        parallel[c.name] = c
    return mono, parallel


# --- sampling --------------------------------------------------------------

def sampling_probabilities(counts: Mapping[str, int], alpha: float = 0.7) -> dict[str, float]:
    """``p_l`` proportional to ``(n_l / n) ** alpha``, keys in sorted order."""
    if not counts:
        raise ValueError("sample_language: empty count map")
    if any(n <= 0 for n in counts.values()):
        raise ValueError(f"sample_language: counts must be positive, got {dict(counts)}")
    total = float(sum(counts.values()))
    keys = sorted(counts)
    weights = np.array([(counts[k] / total) ** alpha for k in keys])
    weights /= weights.sum()
    return dict(zip(keys, weights.tolist()))


def sample_language(counts: Mapping[str, int], alpha: float, rng: np.random.Generator) -> str:
    probs = sampling_probabilities(counts, alpha)
    keys = list(probs)
    return keys[int(rng.choice(len(keys), p=list(probs.values())))]


# --- masking ---------------------------------------------------------------

def mask_sequence(ids: Sequence[int], mask_rate: float, rng: np.random.Generator, vocab_size: int):
    """BERT-style masking of the non-special positions of ``ids``.

    Each maskable position is selected with probability ``mask_rate``; a
    selected slot becomes [MASK] (80%), a random regular token (10%), or stays
    (10%). If nothing is selected, one maskable position is drawn uniformly.
    Returns ``(masked_ids, positions, targets)``.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    ids = np.asarray(ids, dtype=np.int64)
    maskable = np.flatnonzero(ids >= NUM_SPECIAL)
    if maskable.size == 0:
        raise ValueError("mask_sequence: no maskable (non-special) positions")
    chosen = maskable[rng.random(maskable.size) < mask_rate]
    if chosen.size == 0:
        chosen = maskable[[rng.integers(maskable.size)]]
    out = ids.copy()
    action = rng.random(chosen.size)
    random_tokens = rng.integers(NUM_SPECIAL, vocab_size, size=chosen.size)
    for pos, a, tok in zip(chosen, action, random_tokens):
        if a < 0.8:
            out[pos] = MASK_ID
        elif a < 0.9:
            out[pos] = tok
    return tuple(out.tolist()), tuple(chosen.tolist()), tuple(ids[chosen].tolist())


# --- instances -------------------------------------------------------------

def _truncate(sides: list[tuple[int, ...]], budget: int) -> list[tuple[int, ...]]:
    """Shrink segments proportionally so their total length fits ``budget``."""
    total = sum(len(s) for s in sides)
    if total <= budget:
        return sides
    if budget < len(sides):
        raise ValueError(f"cannot fit {len(sides)} segments into {budget} positions")
    keep = [max(1, math.floor(len(s) * budget / total)) for s in sides]
    # hand leftover slots to the longest segments first
    order = sorted(range(len(sides)), key=lambda i: -len(sides[i]))
    spare = budget - sum(keep)
    for i in order:
        if spare <= 0:
            break
        if keep[i] < len(sides[i]):
            keep[i] += 1
            spare -= 1
    return [s[:k] for s, k in zip(sides, keep)]


def layout(segments: Sequence[Sequence[int]]) -> tuple[int, ...]:
    """``[CLS] s1 [SEP] s2 [SEP] ...``."""
    out = [CLS_ID]
    for seg in segments:
        out.extend(seg)
        out.append(SEP_ID)
    return tuple(out)


def fit_segments(segments: Sequence[Sequence[int]], max_positions: int) -> list[tuple[int, ...]]:
    segments = [tuple(s) for s in segments]
    return _truncate(segments, max_positions - 1 - len(segments))


def make_mmlm_instance(sentence, rng, mask_rate, vocab_size, max_positions, lang="") -> TrainingInstance:
    ids = layout(fit_segments([sentence], max_positions))
    masked, positions, targets = mask_sequence(ids, mask_rate, rng, vocab_size)
    return TrainingInstance(MMLM, masked, positions, targets, langs=(lang,))


def make_tlm_instance(pair, rng, mask_rate, vocab_size, max_positions, langs=()) -> TrainingInstance:
    src, tgt = pair
    if not src or not tgt:
        raise ValueError("make_tlm_instance: both sides must be nonempty")
    ids = layout(fit_segments([src, tgt], max_positions))
    masked, positions, targets = mask_sequence(ids, mask_rate, rng, vocab_size)
    return TrainingInstance(TLM, masked, positions, targets, langs=tuple(langs))


def make_xlco_instance(pair_c, pair_d, rng, max_positions: int = 512, corpus_c: str | None = None,
                       corpus_d: str | None = None, mixup: bool = True) -> TrainingInstance:
    """Build a (possibly mixup) contrastive instance from one or two pairs.

    With mixup, ``pair_c = (c1, c2)`` and ``pair_d = (d1, d2)`` are split so
    each side holds one member of each pair; the key side lists its segments
    either in the query's order (``"same"``) or reversed (``"swapped"``).
    Query/key roles are assigned by a fair coin.
    """
    c1, c2 = pair_c
    if mixup:
        if pair_d is None:
            raise ValueError("make_xlco_instance: mixup needs a second pair")
        if corpus_c is not None and corpus_c == corpus_d:
            raise ValueError(f"make_xlco_instance: mixup partner must come from another corpus, "
                             f"both are {corpus_c!r}")
        d1, d2 = pair_d
        ca, cb = (c1, c2) if rng.random() < 0.5 else (c2, c1)
        da, db = (d1, d2) if rng.random() < 0.5 else (d2, d1)
        c_first = rng.random() < 0.5
        same = rng.random() < 0.5
        side_a = [ca, da] if c_first else [da, ca]
        side_b = [cb, db] if c_first == same else [db, cb]
        arrangement = "same" if same else "swapped"
    else:
        side_a, side_b = [c1], [c2]
        arrangement = "plain"
    if rng.random() < 0.5:
        side_a, side_b = side_b, side_a
    qa = fit_segments(side_a, max_positions)
    kb = fit_segments(side_b, max_positions)
    return TrainingInstance(XLCO, query_ids=layout(qa), key_ids=layout(kb),
                            arrangement=arrangement, query_segments=tuple(qa), key_segments=tuple(kb))


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with [PAD]; returns ``(ids, mask)`` of shape ``(B, T)``."""
    if not seqs:
        raise ValueError("pad_batch: empty batch")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# --- synthetic languages ---------------------------------------------------

@dataclass
class SyntheticData:
    vocab: Vocab
    languages: tuple[str, ...]
    pivot: str
    ciphers: dict[str, np.ndarray]
    mono: dict[str, MonoCorpus]
    parallel: dict[str, ParallelCorpus]
    heldout: dict[str, ParallelCorpus]

    def encode_base(self, lang: str, sentence: Sequence[int]) -> tuple[int, ...]:
        """Map base-language token indices (0-based) to ``lang`` vocabulary ids."""
        return tuple(int(self.ciphers[lang][t]) for t in sentence)

    def decode_base(self, lang: str, ids: Sequence[int]) -> tuple[int, ...]:
        inverse = {int(v): i for i, v in enumerate(self.ciphers[lang])}
        return tuple(inverse[i] for i in ids)


def _token_name(lang: str, j: int) -> str:
    return f"{lang}_{j:04d}"


def gen_synthetic_languages(base_vocab_size: int = 200, num_langs: int = 2, num_sentences: int = 2000,
                            len_range: tuple[int, int] = (5, 9), seed: int = 0, num_heldout: int = 0,
                            branching: int = 6, vocab_capacity: int = 65536) -> SyntheticData:
    """Generate a base language and ``num_langs`` cipher languages paired with it.

    The base language ``l0`` is a sparse first-order Markov chain over
    ``base_vocab_size`` abstract tokens with a Zipfian start distribution.
    Language ``lk`` renames every base token through a fixed random
    permutation into its own block of the vocabulary, so parallel pairs are
    ``(s, cipher_k(s))`` with identical lengths. ``l0`` is the pivot.
    """
    if base_vocab_size < 50:
        raise ValueError(f"base_vocab_size must be >= 50, got {base_vocab_size}")
    if num_langs < 1:
        raise ValueError("num_langs must be >= 1")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid len_range {len_range}")
    needed = NUM_SPECIAL + base_vocab_size * (num_langs + 1)
    if needed > vocab_capacity:
        raise ValueError(f"{num_langs} languages x {base_vocab_size} tokens need {needed} ids, "
                         f"capacity is {vocab_capacity}")
    rng = np.random.default_rng(seed)
    languages = tuple(f"l{k}" for k in range(num_langs + 1))
    pivot = languages[0]

    tokens = list(SPECIAL_TOKENS)
    ciphers = {}
    for k, lang in enumerate(languages):
        block = NUM_SPECIAL + k * base_vocab_size
        perm = np.arange(base_vocab_size) if k == 0 else rng.permutation(base_vocab_size)
        ciphers[lang] = block + perm
        tokens.extend(_token_name(lang, j) for j in range(base_vocab_size))
    vocab = Vocab(tokens)

    zipf = 1.0 / np.arange(1, base_vocab_size + 1)
    zipf /= zipf.sum()
    # uniform successor sets keep the stationary distribution close to flat,
    # so every token is seen often enough to be learnable
    succ = np.stack([rng.choice(base_vocab_size, size=branching, replace=False)
                     for _ in range(base_vocab_size)])
    succ_cdf = np.cumsum(rng.dirichlet(np.ones(branching), size=base_vocab_size), axis=1)
    start_cdf = np.cumsum(zipf)

    def sentence() -> tuple[int, ...]:
        n = int(rng.integers(lo, hi + 1))
        u = rng.random(n)
        tok = min(int(np.searchsorted(start_cdf, u[0], side="right")), base_vocab_size - 1)
        out = [tok]
        for x in u[1:]:
            j = min(int(np.searchsorted(succ_cdf[tok], x, side="right")), branching - 1)
            tok = int(succ[tok, j])
            out.append(tok)
        return tuple(out)

    def cipher(lang, s):
        return tuple(int(ciphers[lang][t]) for t in s)

    mono = {lang: MonoCorpus(lang, tuple(cipher(lang, sentence()) for _ in range(num_sentences)))
            for lang in languages}
    parallel, heldout = {}, {}
    for lang in languages[1:]:
        base = [sentence() for _ in range(num_sentences + num_heldout)]
        pairs = tuple((cipher(pivot, s), cipher(lang, s)) for s in base)
        parallel[f"{pivot}-{lang}"] = ParallelCorpus(pivot, lang, pairs[:num_sentences])
        if num_heldout:
            heldout[f"{pivot}-{lang}"] = ParallelCorpus(pivot, lang, pairs[num_sentences:])
    return SyntheticData(vocab, languages, pivot, ciphers, mono, parallel, heldout)
