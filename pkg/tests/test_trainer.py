import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keellab.config import ModelConfig, Topology
from keellab.errors import ConfigError
from keellab.topology import checkpoint_bytes, wire_model
from keellab.trainer import (AdamState, Batcher, StepMetrics, TrainConfig, adamw_step, clip_by_global_norm,
                             evaluate_ppl, lm_loss, load_corpus, lr_at, no_decay_names, split_corpus, train)


def small_model(kind="keel", L=4, d=16, **kw):
    return wire_model(ModelConfig(n_sublayers=L, d_model=d, d_ff=3 * d, n_heads=2, n_kv_heads=1,
                                  max_seq_len=32, topology=Topology(kind), **kw))


# -- schedule --------------------------------------------------------------------

def test_lr_examples():
    cfg = TrainConfig(peak_lr=1.0, final_lr=0.0, warmup_steps=100, total_steps=300)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == 1.0
    assert abs(lr_at(200, cfg) - 0.5) < 1e-15
    assert lr_at(300, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at(301, cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500), st.integers(0, 500), st.floats(1e-5, 1.0))
def test_lr_continuous_and_monotone_after_warmup(warm, extra, peak):
    cfg = TrainConfig(peak_lr=peak, warmup_steps=warm, total_steps=warm + extra)
    assert abs(lr_at(warm, cfg) - peak) <= 1e-12 * peak
    if extra:
        assert abs(lr_at(warm + 1, cfg) - peak) <= peak * (1 - math.cos(math.pi / extra)) + 1e-15
    vals = [lr_at(s, cfg) for s in range(warm, warm + extra + 1)]
    assert all(b <= a + 1e-18 for a, b in zip(vals, vals[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=10, total_steps=5)
    with pytest.raises(ConfigError):
        TrainConfig(adam_beta1=1.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})


# -- optimiser -------------------------------------------------------------------

def test_zero_grad_no_decay_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    cfg = TrainConfig(weight_decay=0.0)
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), 0.1, cfg)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_fixed_point_direction():
    p = {"w": np.array([0.0, 0.0])}
    cfg = TrainConfig(weight_decay=0.0, grad_clip_norm=float("inf"))
    state = AdamState()
    g = np.array([3.0, -0.5])
    prev = p["w"].copy()
    for _ in range(500):
        prev = p["w"].copy()
        adamw_step(p, {"w": g}, state, 1e-3, cfg)
    assert np.allclose(p["w"] - prev, -np.sign(g) * 1e-3, rtol=1e-6)


def test_clipping():
    g = [np.array([6.0, 8.0])]
    out, norm = clip_by_global_norm(g, 1.0)
    assert norm == 10.0 and np.allclose(out[0], [0.6, 0.8])
    out, _ = clip_by_global_norm(g, float("inf"))
    assert out[0] is g[0]
    small, _ = clip_by_global_norm([np.array([0.3, 0.4])], 1.0)
    assert np.array_equal(small[0], [0.3, 0.4])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(1e-3, 10))
def test_clipping_never_increases_norm(vals, c):
    out, norm = clip_by_global_norm([np.array(vals)], c)
    assert np.linalg.norm(out[0]) <= max(norm, 0.0) * (1 + 1e-12)
    assert np.linalg.norm(out[0]) <= c * (1 + 1e-12) or norm <= c


def test_nonfinite_grad_is_noop():
    p = {"w": np.array([1.0])}
    state = AdamState()
    norm = adamw_step(p, {"w": np.array([np.nan])}, state, 0.1, TrainConfig())
    assert not math.isfinite(norm) and p["w"][0] == 1.0 and state.step == 0


def test_weight_decay_exemptions():
    names = no_decay_names(small_model("keel_attempt3"))
    assert "embed" in names and "final_norm" in names
    assert any(n.endswith("beta") for n in names) and any(n.endswith("ln_in") for n in names)
    assert not any(n.endswith(("wq", "w_in", "head")) for n in names)


# -- data ------------------------------------------------------------------------

def test_corpus_loading_and_split(tmp_path):
    f = tmp_path / "c.txt"
    f.write_bytes(bytes(range(100)))
    data = load_corpus(f)
    tr, held = split_corpus(data)
    assert len(tr) == 90 and held[0] == 90
    with pytest.raises(FileNotFoundError, match="nope.txt"):
        load_corpus(tmp_path / "nope.txt")


def test_batcher_short_corpus():
    with pytest.raises(ConfigError):
        Batcher(np.zeros(10, dtype=np.uint8), 4, 8, 0)


def test_batcher_seeded(corpus):
    a = Batcher(corpus, 2, 16, 3).take(3)
    b = Batcher(corpus, 2, 16, 3).take(3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == (2, 17)


# -- training --------------------------------------------------------------------

def test_zero_steps_keeps_init(corpus):
    m = small_model()
    before = checkpoint_bytes(m)
    rec = train(m, corpus, TrainConfig(warmup_steps=0, total_steps=0, seq_len=16))
    assert rec.metrics == [] and checkpoint_bytes(m) == before


def test_training_is_deterministic(corpus, tmp_path):
    cfg = TrainConfig(warmup_steps=5, total_steps=12, seq_len=16, batch_size=2)
    runs = []
    for i in range(2):
        m = small_model()
        rec = train(m, corpus, cfg, metrics_path=tmp_path / f"m{i}.jsonl")
        runs.append((rec.metrics, checkpoint_bytes(m), (tmp_path / f"m{i}.jsonl").read_bytes()))
    assert runs[0] == runs[1]
    line = (tmp_path / "m0.jsonl").read_text().splitlines()[3]
    assert StepMetrics.from_json(line) == runs[0][0][3]


def test_step_uses_scheduled_lr(corpus):
    cfg = TrainConfig(peak_lr=1e-2, warmup_steps=4, total_steps=8, seq_len=16, batch_size=2)
    rec = train(small_model(), corpus, cfg)
    assert [m.lr for m in rec.metrics] == [lr_at(s, cfg) for s in range(1, 9)]


def test_hook_aborts(corpus):
    cfg = TrainConfig(warmup_steps=2, total_steps=20, seq_len=16, batch_size=2)
    rec = train(small_model(), corpus, cfg, hooks=[lambda ms: "stop" if len(ms) == 3 else None])
    assert rec.aborted and rec.abort_reason == "stop" and len(rec.metrics) == 3


def test_overflow_is_recorded_not_raised(corpus):
    m = small_model("preln")
    m.params["layers.1.w_in"].data[...] = 1e300
    m.params["layers.1.w_out"].data[...] = 1e300
    with np.errstate(all="ignore"):
        rec = train(m, corpus, TrainConfig(warmup_steps=1, total_steps=2, seq_len=16, batch_size=2))
    assert all(x.overflow for x in rec.metrics)


def test_initial_loss_near_log_vocab(corpus):
    m = small_model(zero_init_head=True)
    loss, _ = lm_loss(m, Batcher(corpus, 4, 16, 0).next())
    assert abs(loss.item() / math.log(256) - 1.0) <= 0.05


def test_short_training_reduces_loss(corpus):
    cfg = TrainConfig(peak_lr=3e-3, warmup_steps=20, total_steps=150, seq_len=32, batch_size=4)
    rec = train(small_model(L=2, d=32), corpus, cfg)
    first = np.mean([m.loss for m in rec.metrics[:10]])
    last = np.mean([m.loss for m in rec.metrics[-10:]])
    assert last < first - 1.0


# -- evaluation ------------------------------------------------------------------

def test_uniform_model_ppl_is_vocab(corpus):
    m = small_model(zero_init_head=True)
    assert abs(evaluate_ppl(m, corpus[:2000], 16, max_windows=8) - 256.0) < 1e-9


def test_ppl_needs_one_window():
    with pytest.raises(ConfigError):
        evaluate_ppl(small_model(), np.zeros(10, dtype=np.uint8), 16)
