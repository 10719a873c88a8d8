import numpy as np
import pytest

from xlcontrast.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from xlcontrast.config import RunConfig
from xlcontrast.trainer import BatchBuilder, Corpora, TrainingError, train

SMALL = ["num_layers=2", "hidden_size=16", "ffn_size=32", "num_heads=2", "max_positions=32",
         "projection_dim=16", "batch_size=4", "queue_capacity=16", "warmup_steps=2", "log_interval=1"]


def cfg(*extra, steps=10):
    return RunConfig().with_overrides(SMALL + [f"total_steps={steps}"] + list(extra))


@pytest.fixture
def corpora(tiny_data):
    return Corpora.from_synthetic(tiny_data)


def test_metrics_deterministic(tmp_path, corpora):
    a = train(cfg(), corpora, tmp_path / "a")
    b = train(cfg(), corpora, tmp_path / "b")
    assert (tmp_path / "a/metrics.tsv").read_bytes() == (tmp_path / "b/metrics.tsv").read_bytes()
    assert a.metrics == b.metrics
    keys = {k for _, k, _ in a.metrics}
    assert {"loss.mmlm", "loss.tlm", "loss.xlco", "mi.xlco", "momentum", "lr", "grad_norm"} <= keys


def test_seed_changes_run(corpora):
    a = train(cfg(steps=3), corpora)
    b = train(cfg("seed=1", steps=3), corpora)
    assert a.series("loss.total") != b.series("loss.total")


def test_metrics_line_format(tmp_path, corpora):
    train(cfg(steps=2), corpora, tmp_path)
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    step, key, value = lines[0].split("\t")
    assert step == "1" and float(value) == float(value)
    assert [l.split("\t")[1] for l in lines[:8]] == sorted(l.split("\t")[1] for l in lines[:8])


def test_no_xlco_ablation_absent_from_log(tmp_path, corpora):
    r = train(cfg("xlco=off"), corpora, tmp_path)
    text = (tmp_path / "metrics.tsv").read_text()
    assert "xlco" not in text and "momentum" not in text
    assert r.state.queue is None


def test_total_equals_sum_of_parts(corpora):
    r = train(cfg(steps=3), corpora)
    for t in (1, 2, 3):
        row = {k: v for s, k, v in r.metrics if s == t}
        assert row["loss.total"] == pytest.approx(row["loss.mmlm"] + row["loss.tlm"] + row["loss.xlco"],
                                                  abs=1e-12)


def test_progress_over_200_steps(tiny_data):
    corpora = Corpora.from_synthetic(tiny_data)
    r = train(cfg("peak_lr=5e-3", "log_interval=50", steps=200), corpora)
    losses = dict((s, v) for s, k, v in r.metrics if k == "loss.total")
    assert losses[200] < losses[1]
    norm = np.sqrt(sum(float(np.sum(t.data ** 2)) for t in r.state.pair.query.values()))
    assert np.isfinite(norm)


def test_split_run_equals_straight_run(tmp_path, corpora):
    straight = train(cfg(steps=20), corpora, tmp_path / "s")
    first = train(cfg(steps=20), corpora, tmp_path / "r", stop_after=10)
    assert first.checkpoint_path.name == "step10.ckpt"
    resumed = train(cfg(steps=20), corpora, tmp_path / "r", resume=first.checkpoint_path)
    assert (tmp_path / "s/metrics.tsv").read_bytes() == (tmp_path / "r/metrics.tsv").read_bytes()
    assert straight.series("loss.total")[-1] == resumed.series("loss.total")[-1]
    for name, t in straight.state.pair.key.items():
        assert np.array_equal(t.data, resumed.state.pair.key[name].data)


def test_key_warmup_delays_contrast(corpora):
    r = train(cfg("key_warmup_steps=4", steps=6), corpora)
    xl_steps = [s for s, k, _ in r.metrics if k == "loss.xlco"]
    assert xl_steps == [5, 6]


def test_key_warmup_without_other_tasks_fails(corpora):
    with pytest.raises(TrainingError, match="step 1"):
        train(cfg("key_warmup_steps=2", "mmlm=off", "tlm=off", steps=4), corpora)


def test_mixup_partner_is_other_corpus(corpora):
    b = BatchBuilder(cfg(), corpora, 32)
    rng = np.random.default_rng(0)
    for inst in b.xlco(rng, 50):
        assert inst.arrangement in ("same", "swapped")


def test_mixup_needs_two_corpora(tiny_data):
    one = Corpora(tiny_data.vocab, dict(tiny_data.mono), {"l0-l1": tiny_data.parallel["l0-l1"]})
    with pytest.raises(TrainingError, match="mixup"):
        train(cfg(steps=2), one)
    train(cfg("mixup=off", steps=2), one)


def test_step_error_reports_index(corpora, monkeypatch):
    import xlcontrast.trainer as tr

    def boom(*a, **k):
        raise FloatingPointError("nan in tlm")

    monkeypatch.setattr(tr, "adam_step", boom)
    with pytest.raises(TrainingError, match="step 1: nan in tlm"):
        train(cfg(steps=2), corpora)


# --- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path, corpora):
    r = train(cfg(steps=4), corpora, tmp_path)
    state = load_checkpoint(r.checkpoint_path)
    s0 = r.state
    for side in ("query", "key"):
        for name, t in getattr(s0.pair, side).items():
            assert np.array_equal(t.data, getattr(state.pair, side)[name].data)
    for name in s0.opt.m:
        assert np.array_equal(s0.opt.m[name], state.opt.m[name])
        assert np.array_equal(s0.opt.v[name], state.opt.v[name])
    assert np.array_equal(s0.queue.entries(), state.queue.entries())
    assert (state.step, state.opt.step, state.pair.step, state.pair.momentum) == \
        (s0.step, s0.opt.step, s0.pair.step, s0.pair.momentum)
    assert state.config == s0.config
    again = tmp_path / "again.ckpt"
    save_checkpoint(again, state)
    assert again.read_bytes() == r.checkpoint_path.read_bytes()


def test_checkpoint_corruption(tmp_path, corpora):
    r = train(cfg(steps=2), corpora, tmp_path)
    raw = r.checkpoint_path.read_bytes()
    assert raw.startswith(MAGIC)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)


def test_resume_config_mismatch(tmp_path, corpora):
    r = train(cfg(steps=4), corpora, tmp_path, stop_after=2)
    with pytest.raises(CheckpointError, match="peak_lr"):
        train(cfg("peak_lr=0.5", steps=4), corpora, tmp_path, resume=r.checkpoint_path)


def test_periodic_checkpoints(tmp_path, corpora):
    train(cfg("checkpoint_interval=3", steps=7), corpora, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["final.ckpt", "step3.ckpt", "step6.ckpt"]
