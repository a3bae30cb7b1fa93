import csv

import numpy as np
import pytest

from keellab.config import ModelConfig, Topology
from keellab.errors import ContractError
from keellab.stability import (DetectorConfig, DivergenceVerdict, Pathology, RampProtocol, detect_degradation,
                               detect_irrecoverable, detect_stagnation, first_divergence, max_tolerable_lr,
                               rolling_slope, run_ramp, verdict_from_stream, write_verdict_csv)
from keellab.topology import wire_model
from keellab.trainer import StepMetrics, TrainConfig, lr_at, train

N = 2000


def healthy(n=N, seed=0, noise=0.05):
    t = np.arange(n)
    rng = np.random.default_rng(seed)
    return 2.0 + 3.5 * np.exp(-t / 300.0) + noise * rng.standard_normal(n)


def as_metrics(losses, protocol=RampProtocol()):
    tc = protocol.train_config(TrainConfig())
    return [StepMetrics(i + 1, lr_at(i + 1, tc), float(v), 1.0, not np.isfinite(v))
            for i, v in enumerate(losses)]


def plateau(start=500, n=N):
    x = healthy(n, seed=1)
    x[start:] = 2.0 + 3.5 * np.exp(-start / 300.0) + 0.05 * np.random.default_rng(2).standard_normal(n - start)
    return x


# -- detectors -------------------------------------------------------------------

def test_rolling_slope_matches_polyfit():
    x = np.random.default_rng(0).standard_normal(50)
    s = rolling_slope(x, 10)
    for end in (9, 25, 49):
        assert abs(s[end - 9] - np.polyfit(np.arange(10), x[end - 9:end + 1], 1)[0]) < 1e-12


def test_stagnation_examples():
    ref = np.full(100, 2.0)
    assert not detect_stagnation(5.0 - 0.01 * np.arange(100), ref)
    assert detect_stagnation(np.full(100, 3.0), ref)
    assert not detect_stagnation(np.full(100, 2.1), ref)


def test_stagnation_fires_soon_after_plateau():
    ref, x = healthy(), plateau(500)
    hit = first_divergence(as_metrics(x), as_metrics(ref))
    assert hit is not None and hit[0] is Pathology.STAGNATION
    assert 500 <= hit[2] <= 500 + 2 * 100


def test_irrecoverable_examples():
    cfg = DetectorConfig(recovery_steps=200)
    x = healthy()
    assert not detect_irrecoverable(x, cfg, final=True)
    spike = x.copy()
    spike[800:810] += 3.0
    assert not detect_irrecoverable(spike, cfg, final=True)
    jump = x.copy()
    jump[800:] += 3.0
    assert detect_irrecoverable(jump, cfg)
    hit = first_divergence(jump, None, cfg)
    assert hit[0] is Pathology.IRRECOVERABLE and 800 <= hit[1] <= 810 and hit[2] == hit[1] + 200


def test_nan_routes_to_overflow():
    x = healthy()
    x[700] = np.nan
    assert not detect_irrecoverable(x, DetectorConfig(), final=True)
    hit = first_divergence(as_metrics(x[:701]), None)
    assert hit == (Pathology.OVERFLOW, 701, 701)


def test_degradation_examples():
    ref = 5.0 - 1e-3 * np.arange(N)
    assert not detect_degradation(ref, ref)
    assert detect_degradation(ref + 0.5, ref, DetectorConfig(margin_deg=0.3))
    crossing = ref + np.linspace(0.5, -0.5, N)
    assert detect_degradation(crossing[:400], ref)
    assert not any(detect_degradation(crossing[:n], ref) for n in range(1200, N + 1, 50))
    assert detect_degradation(ref, None) is None


def test_healthy_stream_is_silent():
    ref = healthy(seed=0)
    run = healthy(seed=5) - 0.2  # a stress run that learns faster than the reference
    assert first_divergence(as_metrics(run), as_metrics(ref), final=True) is None


@pytest.mark.parametrize("make,kind", [
    (lambda: plateau(500), Pathology.STAGNATION),
    (lambda: np.concatenate([healthy()[:900], healthy()[900:] + 3.0]), Pathology.IRRECOVERABLE),
    (lambda: healthy(seed=3) + 0.5, Pathology.DEGRADATION),
])
def test_verdict_lr_is_previous_step(make, kind):
    prot = RampProtocol()
    # A jump that stays up is also flat-and-high, so stagnation would win the
    # race with a reference present; judge it on the spike detector alone.
    ref = None if kind is Pathology.IRRECOVERABLE else as_metrics(healthy())
    v = verdict_from_stream(as_metrics(make()), prot, ref)
    assert v.diverged and v.pathology is kind
    assert v.max_lr == lr_at(v.step - 1, prot.train_config(TrainConfig()))
    assert v.max_lr < prot.eta_peak


def test_no_divergence_verdict():
    prot = RampProtocol()
    v = verdict_from_stream(as_metrics(healthy()), prot, as_metrics(healthy(seed=9)))
    assert not v.diverged and v.pathology is Pathology.NONE and v.max_lr == prot.eta_peak


def test_missing_reference_disables_detectors():
    v = verdict_from_stream(as_metrics(healthy()), RampProtocol())
    assert set(v.disabled) == {"Stagnation", "OptimizationDegradation"}


def test_replay_is_prefix_consistent():
    """Evaluating every prefix gives the same first firing as the full replay."""
    prot = RampProtocol()
    x = np.concatenate([healthy()[:900], healthy()[900:] + 3.0])
    ref = as_metrics(healthy())
    ms = as_metrics(x)
    live = next(verdict_from_stream(ms[:n], prot, ref) for n in range(1, N + 1)
                if verdict_from_stream(ms[:n], prot, ref).diverged)
    stop = live.fired_at
    assert verdict_from_stream(ms[:stop], prot, ref) == live
    assert verdict_from_stream(ms, prot, ref) == live


def test_protocol_invariants():
    with pytest.raises(ContractError):
        RampProtocol(monitor_window=2000, warmup_steps=2000)
    with pytest.raises(ContractError):
        RampProtocol(eta_peak=0.0)


def test_verdict_csv(tmp_path):
    rows = [DivergenceVerdict(True, Pathology.IRRECOVERABLE, 12, 1.5e-3).row("postln"),
            DivergenceVerdict(False, Pathology.NONE, 100, 5e-2).row("keel")]
    write_verdict_csv(rows, tmp_path / "v.csv")
    got = list(csv.reader(open(tmp_path / "v.csv")))
    assert got[0] == ["topology", "pathology", "step", "max_lr", "diverged"]
    assert got[1] == ["postln", "IrrecoverableInstability", "12", "0.0015", "true"]


# -- live harness ----------------------------------------------------------------

def tiny(kind="keel"):
    return ModelConfig(n_sublayers=2, d_model=16, d_ff=48, n_heads=2, n_kv_heads=1, max_seq_len=16,
                       topology=Topology(kind))


def test_tiny_peak_does_not_diverge(corpus):
    prot = RampProtocol(eta_peak=1e-6, warmup_steps=60, monitor_window=20)
    v = max_tolerable_lr(tiny("preln"), prot, corpus, TrainConfig(seq_len=16, batch_size=2))
    assert not v.diverged and v.max_lr == 1e-6


def test_verdict_monotone_in_ramp_extension(corpus):
    base = TrainConfig(seq_len=16, batch_size=2)
    det = DetectorConfig(recovery_steps=30, smooth_window=5)
    short = RampProtocol(eta_peak=40.0, warmup_steps=200, monitor_window=20)
    long = RampProtocol(eta_peak=80.0, warmup_steps=400, monitor_window=20)
    v1, m1, _ = run_ramp(tiny("postln"), short, corpus, base, det)
    assert v1.diverged
    v2, m2, _ = run_ramp(tiny("postln"), long, corpus, base, det)
    assert (v2.pathology, v2.step, v2.max_lr) == (v1.pathology, v1.step, v1.max_lr)
    assert [m.loss for m in m1] == [m.loss for m in m2[:len(m1)]]


def test_lockstep_reference_matches_separate_run(corpus):
    base = TrainConfig(seq_len=16, batch_size=2)
    prot = RampProtocol(eta_peak=1e-3, warmup_steps=40, monitor_window=10)
    v, m, ref = run_ramp(tiny("keel"), prot, corpus, base, with_reference=True)
    alone = train(wire_model(tiny("keel")), corpus, prot.train_config(base, peak=prot.reference_peak)).metrics
    assert ref == alone[:len(ref)] and len(ref) == len(m)
    assert verdict_from_stream(m, prot, ref) == v
