"""Joint MMLM + TLM + XLCO pre-training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autograd import Tape, backward
from .checkpoint import TrainState, load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import (MonoCorpus, ParallelCorpus, SyntheticData, Vocab, load_corpora, make_mmlm_instance,
                     make_tlm_instance, make_xlco_instance, sample_language)
from .encoder import EncoderParams
from .momentum import EncoderPair, NegativeQueue, finish_xlco_step, momentum_schedule, prefill
from .objectives import infonce_mi_estimate, joint_loss
from .optim import OptimizerState, adam_step, collect_grads, lr_schedule

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.tsv"


class TrainingError(RuntimeError):
    pass


@dataclass
class Corpora:
    vocab: Vocab
    mono: dict[str, MonoCorpus]
    parallel: dict[str, ParallelCorpus]

    @classmethod
    def from_dir(cls, directory, pivot: str | None = None) -> "Corpora":
        directory = Path(directory)
        vocab = Vocab.load(directory / "vocab.txt")
        mono, parallel = load_corpora(directory, vocab, pivot)
        return cls(vocab, mono, parallel)

    @classmethod
    def from_synthetic(cls, data: SyntheticData) -> "Corpora":
        return cls(data.vocab, dict(data.mono), dict(data.parallel))


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[tuple[int, str, float]] = field(default_factory=list)
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None

    def series(self, key: str) -> list[float]:
        return [v for _, k, v in self.metrics if k == key]


def format_metric(step: int, key: str, value: float) -> str:
    return f"{step}\t{key}\t{value!r}\n"


class BatchBuilder:
    """Deterministic per-step batches: step ``t`` always draws from rng ``(seed, 1, t)``."""

    def __init__(self, config: RunConfig, corpora: Corpora, max_positions: int):
        self.config = config
        self.corpora = corpora
        self.max_positions = max_positions
        self.vocab_size = len(corpora.vocab)
        self.mono_counts = {k: len(v) for k, v in corpora.mono.items()}
        self.para_counts = {k: len(v) for k, v in corpora.parallel.items()}
        if config.mmlm and not self.mono_counts:
            raise TrainingError("MMLM enabled but no monolingual corpora were found")
        if (config.tlm or config.xlco) and not self.para_counts:
            raise TrainingError("TLM/XLCO enabled but no parallel corpora were found")
        if config.xlco and config.mixup and len(self.para_counts) < 2:
            raise TrainingError("mixup contrast needs at least two parallel corpora; set mixup = off")

    def _pair(self, rng, exclude: str | None = None):
        counts = self.para_counts
        if exclude is not None:
            counts = {k: v for k, v in counts.items() if k != exclude}
        name = sample_language(counts, self.config.sampling_alpha, rng)
        corpus = self.corpora.parallel[name]
        return name, corpus, corpus.pairs[int(rng.integers(len(corpus)))]

    def mmlm(self, rng, n: int):
        out = []
        for _ in range(n):
            lang = sample_language(self.mono_counts, self.config.sampling_alpha, rng)
            corpus = self.corpora.mono[lang]
            sent = corpus.sentences[int(rng.integers(len(corpus)))]
            out.append(make_mmlm_instance(sent, rng, self.config.mask_rate, self.vocab_size,
                                          self.max_positions, lang))
        return out

    def tlm(self, rng, n: int):
        out = []
        for _ in range(n):
            _, corpus, (src, tgt) = self._pair(rng)
            langs = (corpus.src_lang, corpus.tgt_lang)
            if rng.random() < 0.5:
                src, tgt, langs = tgt, src, langs[::-1]
            out.append(make_tlm_instance((src, tgt), rng, self.config.mask_rate, self.vocab_size,
                                         self.max_positions, langs))
        return out

    def xlco(self, rng, n: int):
        out = []
        for _ in range(n):
            name_c, _, pair_c = self._pair(rng)
            name_d = pair_d = None
            if self.config.mixup:
                name_d, _, pair_d = self._pair(rng, exclude=name_c)
            out.append(make_xlco_instance(pair_c, pair_d, rng, self.max_positions, name_c, name_d,
                                          mixup=self.config.mixup))
        return out

    def step_batches(self, t: int, xlco_active: bool):
        rng = np.random.default_rng([self.config.seed, 1, t])
        b = self.config.batch_size
        mm = self.mmlm(rng, b) if self.config.mmlm else None
        tl = self.tlm(rng, b) if self.config.tlm else None
        xl = self.xlco(rng, b) if self.config.xlco and xlco_active else None
        return mm, tl, xl

    def prefill_keys(self, n: int):
        rng = np.random.default_rng([self.config.seed, 2])
        return [inst.key_ids for inst in self.xlco(rng, n)]


def resolve_config(config: RunConfig, corpora: Corpora) -> RunConfig:
    if config.vocab_size == 0:
        config = config.replace(vocab_size=len(corpora.vocab))
    elif config.vocab_size != len(corpora.vocab):
        raise TrainingError(f"config vocab_size {config.vocab_size} != vocab file size {len(corpora.vocab)}")
    enc = config.encoder_config()
    return config.replace(universal_layer=enc.universal_layer, retrieval_layer=enc.retrieval_layer)


def initial_state(config: RunConfig) -> TrainState:
    enc = config.encoder_config()
    query = EncoderParams.init(enc, np.random.default_rng([config.seed, 0]), config.init_range)
    pair = EncoderPair.create(query, config.momentum if config.momentum_mode == "constant" else 0.0)
    queue = NegativeQueue(config.queue_capacity, enc.projection_dim) if config.xlco else None
    return TrainState(config, pair, OptimizerState.zeros_like(query), queue, 0)


def train(config: RunConfig, corpora: Corpora | None = None, out_dir=None, resume=None,
          stop_after: int | None = None,
          on_step: Callable[[int, TrainState, dict], None] | None = None) -> TrainResult:
    """Run (or resume) pre-training up to ``config.total_steps``.

    Each step builds one batch per enabled task, backpropagates their summed
    loss once, takes an Adam step, then (with XLCO) enqueues the batch keys
    and moves the key encoder. ``stop_after`` ends early at that step, which
    with ``resume`` gives split runs identical to uninterrupted ones.
    """
    if corpora is None:
        if not config.data_dir:
            raise TrainingError("no corpora given and data_dir is unset")
        corpora = Corpora.from_dir(config.data_dir, config.pivot)
    config = resolve_config(config, corpora)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = load_checkpoint(resume, expected_config=config)
        state.config = config
    else:
        state = initial_state(config)
        if out is not None:
            (out / METRICS_FILE).write_text("", encoding="utf-8")
    enc = config.encoder_config()
    builder = BatchBuilder(config, corpora, enc.max_positions)
    pair, queue = state.pair, state.queue
    result = TrainResult(state, metrics_path=(out / METRICS_FILE) if out is not None else None)
    metrics_file = open(result.metrics_path, "a", encoding="utf-8") if out is not None else None
    last = config.total_steps if stop_after is None else min(stop_after, config.total_steps)

    try:
        for t in range(state.step + 1, last + 1):
            xlco_active = config.xlco and t > config.key_warmup_steps
            if xlco_active and not queue.ready:
                prefill(queue, pair.key, builder.prefill_keys(queue.capacity), enc.universal_layer)
            mm, tl, xl = builder.step_batches(t, xlco_active)
            if mm is None and tl is None and xl is None:
                raise TrainingError(f"step {t}: no task active (XLCO still in key-encoder warmup)")
            try:
                pair.query.zero_grad()
                with Tape() as tape:
                    br = joint_loss(mm, tl, xl, pair.query, pair.key, queue, enc.universal_layer,
                                    config.temperature)
                backward(tape, br.total)
                if any(k.grad is not None for k in pair.key.values()):
                    raise TrainingError("key encoder received gradients")
                lr = lr_schedule(t, config.warmup_steps, config.peak_lr, config.total_steps)
                grad_norm = adam_step(pair.query, collect_grads(pair.query), state.opt, lr,
                                      (config.adam_beta1, config.adam_beta2), config.adam_eps,
                                      config.weight_decay, config.clip_norm)
                m = None
                if config.xlco:
                    m = momentum_schedule(t, config.momentum_mode, config.momentum, config.momentum_cap)
                    finish_xlco_step(pair, queue, br.keys, m)
            except TrainingError:
                raise
            except Exception as exc:
                raise TrainingError(f"step {t}: {exc}") from exc
            state.step = t

            info = {"lr": lr, "grad_norm": grad_norm, **{f"loss.{k}": v for k, v in br.as_floats().items()}}
            if br.xlco_scores is not None:
                info["mi.xlco"] = infonce_mi_estimate(br.xlco_scores)
            if m is not None:
                info["momentum"] = m
            if t == 1 or t % config.log_interval == 0 or t == config.total_steps:
                for key in sorted(info):
                    result.metrics.append((t, key, info[key]))
                    if metrics_file is not None:
                        metrics_file.write(format_metric(t, key, info[key]))
                log.debug("step %d total %.4f", t, info["loss.total"])
            if on_step is not None:
                on_step(t, state, info)
            if out is not None and config.checkpoint_interval and t % config.checkpoint_interval == 0:
                save_checkpoint(out / f"step{t}.ckpt", state)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out is not None:
        name = "final.ckpt" if state.step == config.total_steps else f"step{state.step}.ckpt"
        result.checkpoint_path = save_checkpoint(out / name, state)
    return result
