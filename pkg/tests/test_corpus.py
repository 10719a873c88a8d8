import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xlcontrast.corpus import (CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID, SPECIAL_TOKENS, MonoCorpus,
                               ParallelCorpus, Vocab, gen_synthetic_languages, layout, load_corpora,
                               make_mmlm_instance, make_tlm_instance, make_xlco_instance, mask_sequence,
                               pad_batch, read_parallel, sample_language, sampling_probabilities,
                               write_mono, write_parallel)


# --- vocab and files --------------------------------------------------------

def test_vocab_specials_and_unk():
    v = Vocab(list(SPECIAL_TOKENS) + ["a", "b"])
    assert [v.id(t) for t in SPECIAL_TOKENS] == [0, 1, 2, 3, 4]
    assert v.encode("a b zzz") == (5, 6, 4)
    assert v.decode((5, 6)) == "a b"


@pytest.mark.parametrize("tokens", [["a"] + list(SPECIAL_TOKENS), list(SPECIAL_TOKENS) + ["a", "a"],
                                    list(SPECIAL_TOKENS) + ["a b"]])
def test_vocab_rejects_bad_tables(tokens):
    with pytest.raises(ValueError):
        Vocab(tokens)


def test_file_round_trip(tmp_path, tiny_data):
    v = tiny_data.vocab
    v.save(tmp_path / "vocab.txt")
    for c in tiny_data.mono.values():
        write_mono(tmp_path, c, v)
    for c in tiny_data.parallel.values():
        write_parallel(tmp_path, c, v)
    v2 = Vocab.load(tmp_path / "vocab.txt")
    assert v2 == v
    mono, para = load_corpora(tmp_path, v2, pivot="l0")
    assert mono == tiny_data.mono
    assert para == tiny_data.parallel


def test_pivot_enforced(tmp_path, tiny_data):
    v = tiny_data.vocab
    pair = ((v.id("l1_0001"),), (v.id("l2_0001"),))
    write_parallel(tmp_path, ParallelCorpus("l1", "l2", (pair,)), v)
    with pytest.raises(ValueError, match="pivot"):
        load_corpora(tmp_path, v, pivot="l0")


def test_malformed_parallel_line(tmp_path, tiny_data):
    p = tmp_path / "para.l0-l1.tsv"
    p.write_text("l0_0001 l0_0002\n", encoding="utf-8")
    with pytest.raises(ValueError, match="para.l0-l1.tsv:1"):
        read_parallel(p, tiny_data.vocab)


def test_empty_corpora_rejected():
    with pytest.raises(ValueError):
        MonoCorpus("x", ())
    with pytest.raises(ValueError):
        ParallelCorpus("a", "b", (((5,), ()),))


# --- sampling law --------------------------------------------------------------

def test_sampling_symmetric_and_alpha_one():
    assert sampling_probabilities({"a": 5, "b": 5}) == {"a": 0.5, "b": 0.5}
    p = sampling_probabilities({"a": 3, "b": 1, "c": 6}, alpha=1.0)
    assert p == pytest.approx({"a": 0.3, "b": 0.1, "c": 0.6}, abs=1e-15)


def test_sampling_closed_form_nine_to_one():
    p = sampling_probabilities({"a": 9, "b": 1}, 0.7)
    assert p["a"] == pytest.approx(9 ** 0.7 / (9 ** 0.7 + 1), abs=1e-15)
    assert p["a"] == pytest.approx(0.8232, abs=5e-5)


def test_sampling_kl_five_languages():
    counts = {"a": 100, "b": 30, "c": 7, "d": 1, "e": 50}
    p = sampling_probabilities(counts, 0.7)
    rng = np.random.default_rng(0)
    keys = list(p)
    draws = rng.choice(len(keys), size=1_000_000, p=list(p.values()))
    freq = np.bincount(draws, minlength=len(keys)) / draws.size
    kl = sum(q * math.log(q / p[k]) for k, q in zip(keys, freq) if q > 0)
    assert kl < 1e-3
    # the single-draw API follows the same law
    hits = Counter(sample_language(counts, 0.7, rng) for _ in range(20_000))
    assert hits["a"] / 20_000 == pytest.approx(p["a"], abs=0.015)


@pytest.mark.parametrize("counts", [{}, {"a": 0, "b": 1}])
def test_sampling_errors(counts):
    with pytest.raises(ValueError):
        sample_language(counts, 0.7, np.random.default_rng(0))


# --- masking ------------------------------------------------------------------

def test_mask_mean_count():
    rng = np.random.default_rng(42)
    ids = layout([tuple(range(10, 30))])
    counts = [len(mask_sequence(ids, 0.15, rng, 40)[1]) for _ in range(10_000)]
    assert 2.7 <= np.mean(counts) <= 3.3


def test_mask_forced_minimum():
    ids = layout([tuple(range(10, 30))])
    for seed in range(50):
        _, pos, _ = mask_sequence(ids, 1e-9, np.random.default_rng(seed), 40)
        assert len(pos) == 1


def test_mask_replacement_split():
    rng = np.random.default_rng(1)
    ids = layout([tuple(range(10, 30))])
    kinds = Counter()
    for _ in range(5000):
        out, pos, tgt = mask_sequence(ids, 0.5, rng, 60)
        for p, t in zip(pos, tgt):
            kinds["mask" if out[p] == MASK_ID else "same" if out[p] == t else "random"] += 1
    n = sum(kinds.values())
    assert kinds["mask"] / n == pytest.approx(0.8, abs=0.01)
    # a random token can coincide with the original with chance 1/55
    assert kinds["same"] / n == pytest.approx(0.1 + 0.1 / 55, abs=0.01)


def test_mask_never_touches_specials_and_is_seeded():
    ids = layout([(7, 8, 9), (10, 11)])
    a = mask_sequence(ids, 0.6, np.random.default_rng(3), 20)
    b = mask_sequence(ids, 0.6, np.random.default_rng(3), 20)
    assert a == b
    specials = {i for i, t in enumerate(ids) if t < NUM_SPECIAL}
    assert not specials & set(a[1])


def test_mask_errors():
    with pytest.raises(ValueError):
        mask_sequence((CLS_ID, SEP_ID), 0.15, np.random.default_rng(0), 10)
    with pytest.raises(ValueError):
        mask_sequence((CLS_ID, 7, SEP_ID), 0.0, np.random.default_rng(0), 10)


@settings(max_examples=60, deadline=None)
@given(sent=st.lists(st.integers(NUM_SPECIAL, 49), min_size=1, max_size=12),
       other=st.lists(st.integers(NUM_SPECIAL, 49), min_size=1, max_size=12),
       seed=st.integers(0, 2**31), rate=st.floats(0.01, 0.9))
def test_instances_round_trip(sent, other, seed, rate):
    rng = np.random.default_rng(seed)
    mm = make_mmlm_instance(tuple(sent), rng, rate, 50, 64)
    assert mm.unmasked() == layout([sent])
    tl = make_tlm_instance((tuple(sent), tuple(other)), rng, rate, 50, 64)
    assert tl.unmasked() == layout([sent, other])
    full = layout([sent, other])
    assert tl.targets == tuple(full[p] for p in tl.positions)
    assert len(tl.positions) >= 1


# --- TLM layout -----------------------------------------------------------------

def test_tlm_single_token_layout():
    inst = make_tlm_instance(((7,), (8,)), np.random.default_rng(0), 0.15, 20, 16)
    assert inst.unmasked() == (CLS_ID, 7, SEP_ID, 8, SEP_ID)


def test_tlm_golden_instance():
    src, tgt = (10, 11, 12, 13, 14, 15), (20, 21, 22, 23, 24, 25)
    inst = make_tlm_instance((src, tgt), np.random.default_rng(7), 0.3, 30, 64)
    # selections at maskable slots 3, 6, 11 -> positions 4, 8, 13; all three draw [MASK]
    assert inst.positions == (4, 8, 13)
    assert inst.targets == (13, 20, 25)
    assert inst.input_ids == (0, 10, 11, 12, 2, 14, 15, 1, 2, 21, 22, 23, 24, 2, 1)


def test_tlm_target_side_target():
    src, tgt = (10, 11, 12), (20, 21, 22)
    for seed in range(30):
        inst = make_tlm_instance((src, tgt), np.random.default_rng(seed), 0.5, 30, 64)
        for p, t in zip(inst.positions, inst.targets):
            if p > len(src) + 1:
                assert t == tgt[p - len(src) - 2]


def test_tlm_proportional_truncation():
    src, tgt = tuple(range(10, 30)), tuple(range(30, 40))
    inst = make_tlm_instance((src, tgt), np.random.default_rng(0), 0.15, 50, 18)
    ids = inst.unmasked()
    assert len(ids) == 18
    first = ids[1:ids.index(SEP_ID)]
    second = ids[ids.index(SEP_ID) + 1:-1]
    assert (len(first), len(second)) == (10, 5)
    with pytest.raises(ValueError):
        make_tlm_instance((src, tgt), np.random.default_rng(0), 0.15, 50, 4)


# --- XLCO mixup -------------------------------------------------------------

C1, C2, D1, D2 = (11, 12), (21, 22, 23), (31,), (41, 42)


def _legal_pairs():
    """Every legal (query, key) segment list, built independently of the code."""
    legal = set()
    for cq, ck in ((C1, C2), (C2, C1)):
        for dq, dk in ((D1, D2), (D2, D1)):
            for q in ((cq, dq), (dq, cq)):
                for k in ((ck, dk), (dk, ck)):
                    legal.add((q, k))
    return legal


def test_mixup_arrangements_exhaustive():
    legal = _legal_pairs()
    seen = Counter()
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        inst = make_xlco_instance((C1, C2), (D1, D2), rng, 64, "a", "b")
        key = (inst.query_segments, inst.key_segments)
        assert key in legal
        assert inst.query_ids == layout(inst.query_segments) and inst.key_ids == layout(inst.key_segments)
        seen[key] += 1
        seen[inst.arrangement] += 1
    assert all(seen[k] > 0 for k in legal)
    assert seen["same"] / 10_000 == pytest.approx(0.5, abs=0.02)
    assert seen["swapped"] / 10_000 == pytest.approx(0.5, abs=0.02)


def test_mixup_canonical_arrangements_present():
    rng = np.random.default_rng(1)
    got = {(i.query_segments, i.key_segments)
           for i in (make_xlco_instance((C1, C2), (D1, D2), rng, 64, "a", "b") for _ in range(2000))}
    assert ((C1, D1), (C2, D2)) in got  # <c1 d1, c2 d2>
    assert ((C1, D2), (D1, C2)) in got  # <c1 d2, d1 c2>


def test_mixup_roles_each_side_mutual_translation():
    rng = np.random.default_rng(2)
    for _ in range(500):
        inst = make_xlco_instance((C1, C2), (D1, D2), rng, 64, "a", "b")
        q, k = set(inst.query_segments), set(inst.key_segments)
        assert {frozenset(q & {C1, C2}), frozenset(k & {C1, C2})} == {frozenset({C1}), frozenset({C2})}
        assert {frozenset(q & {D1, D2}), frozenset(k & {D1, D2})} == {frozenset({D1}), frozenset({D2})}


def test_mixup_single_token_pairs():
    inst = make_xlco_instance(((7,), (8,)), ((9,), (10,)), np.random.default_rng(0), 64, "a", "b")
    assert len(inst.query_ids) == len(inst.key_ids) == 5
    assert inst.query_ids[0] == inst.key_ids[0] == CLS_ID


def test_mixup_same_corpus_rejected():
    with pytest.raises(ValueError, match="another corpus"):
        make_xlco_instance((C1, C2), (D1, D2), np.random.default_rng(0), 64, "a", "a")


def test_plain_contrast_role_coin():
    rng = np.random.default_rng(3)
    queries = Counter(make_xlco_instance((C1, C2), None, rng, 64, mixup=False).query_segments
                      for _ in range(4000))
    assert set(queries) == {(C1,), (C2,)}
    assert queries[(C1,)] / 4000 == pytest.approx(0.5, abs=0.03)


def test_pad_batch():
    ids, mask = pad_batch([(0, 5, 1), (0, 1)])
    assert ids.tolist() == [[0, 5, 1], [0, 1, PAD_ID]]
    assert mask.tolist() == [[True] * 3, [True, True, False]]


# --- synthetic languages --------------------------------------------------------

def test_synthetic_cipher_properties(tiny_data):
    d = tiny_data
    assert d.languages == ("l0", "l1", "l2") and d.pivot == "l0"
    for name, corpus in d.parallel.items():
        lang = corpus.tgt_lang
        for s, t in corpus.pairs:
            assert len(s) == len(t)
            base = d.decode_base("l0", s)
            assert d.encode_base(lang, base) == t
            assert d.decode_base(lang, t) == base
    assert len(d.heldout["l0-l1"]) == 40 and len(d.parallel["l0-l1"]) == 200


def test_synthetic_unigram_matches_up_to_relabeling(tiny_data):
    d = tiny_data
    corpus = d.parallel["l0-l2"]
    src = Counter(t for s, _ in corpus.pairs for t in s)
    tgt = Counter(t for _, s in corpus.pairs for t in s)
    cipher = d.ciphers["l2"]
    for tok, n in src.items():
        assert tgt[int(cipher[tok - NUM_SPECIAL])] == n
    assert sorted(src.values()) == sorted(tgt.values())


def test_synthetic_deterministic_and_blocks():
    a = gen_synthetic_languages(50, 1, 30, (2, 4), seed=3)
    b = gen_synthetic_languages(50, 1, 30, (2, 4), seed=3)
    assert a.parallel == b.parallel and a.mono == b.mono
    assert len(a.vocab) == NUM_SPECIAL + 100
    l1_ids = {t for _, s in a.parallel["l0-l1"].pairs for t in s}
    assert min(l1_ids) >= NUM_SPECIAL + 50


def test_synthetic_errors():
    with pytest.raises(ValueError):
        gen_synthetic_languages(49)
    with pytest.raises(ValueError, match="capacity"):
        gen_synthetic_languages(200, 10, 5, vocab_capacity=1000)
