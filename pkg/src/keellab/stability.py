"""Maximum tolerable learning rate under a linear warm-up ramp.

Three divergence pathologies are detected on loss streams, plus numeric
overflow:

* stagnation: the loss is flat over a window while sitting above a healthy
  reference run;
* irrecoverable instability: the smoothed loss jumps well above its best
  value so far and does not come back within ``recovery_steps``;
* optimisation degradation: the loss still falls but trails the reference
  by a margin.

All detectors are pure functions of metric streams. A verdict is the
detection that *fires* first in time; its ``step`` is where the pathology
began (spike onset, or the first step of the offending window).
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .errors import ContractError
from .topology import wire_model
from .trainer import StepMetrics, TrainConfig, TrainSession, lr_at, train

log = logging.getLogger(__name__)


class Pathology(str, enum.Enum):
    NONE = "None"
    STAGNATION = "Stagnation"
    IRRECOVERABLE = "IrrecoverableInstability"
    DEGRADATION = "OptimizationDegradation"
    OVERFLOW = "Overflow"


@dataclass
class DetectorConfig:
    slope_floor: float = 1e-4
    margin_stag: float = 0.2
    spike_delta: float = 1.0
    recovery_steps: int = 200
    recovery_margin: float = 0.1
    margin_deg: float = 0.3
    monitor_window: int = 100
    smooth_window: int = 10


@dataclass
class RampProtocol:
    eta_peak: float = 5e-2
    warmup_steps: int = 2000
    monitor_window: int = 100
    reference_run: Optional[list] = None
    reference_peak: float = 1e-4

    def __post_init__(self):
        if not self.eta_peak > 0:
            raise ContractError("eta_peak must be positive")
        if not 0 < self.monitor_window < self.warmup_steps:
            raise ContractError("monitor_window must be positive and shorter than warmup_steps")

    def lr(self, step: int) -> float:
        return self.eta_peak * step / self.warmup_steps

    def train_config(self, base: TrainConfig, peak: Optional[float] = None) -> TrainConfig:
        return replace(base, peak_lr=self.eta_peak if peak is None else peak,
                       warmup_steps=self.warmup_steps, total_steps=self.warmup_steps)


@dataclass
class DivergenceVerdict:
    diverged: bool
    pathology: Pathology
    step: int
    max_lr: float
    fired_at: int = 0
    disabled: tuple = ()

    def row(self, topology: str) -> dict:
        return {"topology": topology, "pathology": self.pathology.value, "step": self.step,
                "max_lr": self.max_lr, "diverged": self.diverged}


# -- stream helpers --------------------------------------------------------------

def _losses(stream) -> np.ndarray:
    if len(stream) and isinstance(stream[0], StepMetrics):
        return np.array([m.loss for m in stream], dtype=np.float64)
    return np.asarray(stream, dtype=np.float64)


def rolling_mean(x: np.ndarray, k: int) -> np.ndarray:
    """Trailing mean over up to ``k`` samples (fewer at the start)."""
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - k, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def rolling_slope(x: np.ndarray, w: int) -> np.ndarray:
    """OLS slope of each length-``w`` window, indexed by window end (``w-1 .. n-1``)."""
    n = x.size
    if n < w:
        return np.zeros(0)
    t = np.arange(n, dtype=np.float64)
    cx = np.concatenate([[0.0], np.cumsum(x)])
    ctx = np.concatenate([[0.0], np.cumsum(t * x)])
    ends = np.arange(w, n + 1)
    sx = cx[ends] - cx[ends - w]
    stx = ctx[ends] - ctx[ends - w]
    t0 = ends - w
    st = w * t0 + w * (w - 1) / 2.0
    stt = w * t0 ** 2 + t0 * w * (w - 1) + (w - 1) * w * (2 * w - 1) / 6.0
    return (w * stx - st * sx) / (w * stt - st * st)


def _window_excess(x: np.ndarray, ref: np.ndarray, w: int) -> np.ndarray:
    n = min(x.size, ref.size)
    if n < w:
        return np.zeros(0)
    d = x[:n] - ref[:n]
    c = np.concatenate([[0.0], np.cumsum(d)])
    return (c[w:] - c[:-w]) / w


# -- detectors -------------------------------------------------------------------

def stagnation_events(losses, reference, cfg: DetectorConfig) -> list:
    """Window-end indices where the loss is flat and above the reference."""
    x, r = _losses(losses), _losses(reference)
    w = cfg.monitor_window
    excess = _window_excess(x, r, w)
    slope = rolling_slope(x[:r.size], w)[:excess.size]
    hits = np.nonzero((slope > -cfg.slope_floor) & (excess >= cfg.margin_stag))[0]
    return [int(i + w - 1) for i in hits]


def degradation_events(losses, reference, cfg: DetectorConfig) -> list:
    x, r = _losses(losses), _losses(reference)
    w = cfg.monitor_window
    excess = _window_excess(x, r, w)
    slope = rolling_slope(x[:r.size], w)[:excess.size]
    hits = np.nonzero((slope < -cfg.slope_floor) & (excess >= cfg.margin_deg))[0]
    return [int(i + w - 1) for i in hits]


def irrecoverable_events(losses, cfg: DetectorConfig, final: bool = False) -> list:
    """``(onset, fire)`` index pairs of spikes that never recover.

    A spike starts where the smoothed loss rises ``spike_delta`` above the
    minimum of all earlier smoothed values. It is irrecoverable when none of
    the next ``recovery_steps`` smoothed values returns to within
    ``recovery_margin`` of that minimum. When ``final`` is set a spike still
    unresolved at the end of the stream counts as irrecoverable.
    """
    x = _losses(losses)
    n = x.size
    if n < 2:
        return []
    s = rolling_mean(x, cfg.smooth_window)
    base = np.minimum.accumulate(s)
    prior = np.concatenate([[np.inf], base[:-1]])
    events = []
    t = 1
    while t < n:
        cand = np.nonzero(s[t:] >= prior[t:] + cfg.spike_delta)[0]
        if cand.size == 0:
            break
        onset = t + int(cand[0])
        level = prior[onset] + cfg.recovery_margin
        end = min(n, onset + 1 + cfg.recovery_steps)
        back = np.nonzero(s[onset + 1:end] <= level)[0]
        if back.size:
            t = onset + 1 + int(back[0])
            continue
        if onset + cfg.recovery_steps < n:
            events.append((onset, onset + cfg.recovery_steps))
        elif final:
            events.append((onset, n - 1))
        break
    return events


def detect_stagnation(window, reference_window, cfg: Optional[DetectorConfig] = None) -> bool:
    """True when the window's OLS slope exceeds ``-slope_floor`` and its mean
    exceeds the reference mean over the same steps by ``margin_stag``."""
    cfg = cfg or DetectorConfig()
    x, r = _losses(window), _losses(reference_window)
    if r.size < x.size or x.size < 2:
        return False
    w = replace(cfg, monitor_window=x.size)
    return bool(stagnation_events(x, r[:x.size], w))


def detect_irrecoverable(stream, cfg: Optional[DetectorConfig] = None, final: bool = False) -> bool:
    cfg = cfg or DetectorConfig()
    x = _losses(stream)
    finite = np.isfinite(x)
    if not finite.all():
        x = x[:int(np.argmin(finite))]
    return bool(irrecoverable_events(x, cfg, final=final))


def detect_degradation(stream, reference, cfg: Optional[DetectorConfig] = None) -> Optional[bool]:
    """True when the trailing window trails the reference by ``margin_deg`` while
    still decreasing. Returns ``None`` (disabled) without a reference."""
    cfg = cfg or DetectorConfig()
    if reference is None or len(reference) == 0:
        return None
    x, r = _losses(stream), _losses(reference)
    w = cfg.monitor_window
    n = min(x.size, r.size)
    if n < w:
        return False
    return bool(degradation_events(x[n - w:n], r[n - w:n], cfg))


def first_divergence(stream: Sequence[StepMetrics], reference=None,
                     cfg: Optional[DetectorConfig] = None, final: bool = False):
    """Earliest-firing detection over a metric stream.

    Returns ``(pathology, onset_step, fire_step)`` with 1-based steps, or
    ``None``. Ties in firing time resolve in the order overflow, irrecoverable,
    stagnation, degradation.
    """
    cfg = cfg or DetectorConfig()
    x = _losses(stream)
    steps = [m.step for m in stream] if len(stream) and isinstance(stream[0], StepMetrics) \
        else list(range(1, x.size + 1))
    flags = [getattr(m, "overflow", False) for m in stream] if len(steps) else []
    bad = [i for i in range(x.size) if not math.isfinite(x[i]) or (flags and flags[i])]
    cut = bad[0] if bad else x.size
    cands = []
    if bad:
        cands.append((cut, 0, Pathology.OVERFLOW, cut))
    xs = x[:cut]
    for onset, fire in irrecoverable_events(xs, cfg, final=final and not bad):
        cands.append((fire, 1, Pathology.IRRECOVERABLE, onset))
    if reference is not None and len(reference):
        r = _losses(reference)
        w = cfg.monitor_window
        for end in stagnation_events(xs, r, cfg)[:1]:
            cands.append((end, 2, Pathology.STAGNATION, end - w + 1))
        for end in degradation_events(xs, r, cfg)[:1]:
            cands.append((end, 3, Pathology.DEGRADATION, end - w + 1))
    if not cands:
        return None
    fire, _, kind, onset = min(cands, key=lambda c: (c[0], c[1]))
    return kind, steps[onset], steps[fire]


# -- protocol --------------------------------------------------------------------

def reference_stream(cfg: ModelConfig, protocol: RampProtocol, corpus, base: TrainConfig) -> list:
    """Healthy baseline: the same model and data under a ramp to ``reference_peak``."""
    model = wire_model(cfg)
    tc = protocol.train_config(base, peak=protocol.reference_peak)
    return train(model, corpus, tc).metrics


def verdict_from_stream(metrics, protocol: RampProtocol, reference=None,
                        detectors: Optional[DetectorConfig] = None) -> DivergenceVerdict:
    """Replay the detectors over a recorded ramp stream.

    Spikes still unresolved at the end only count once the stream covers
    the whole ramp. This is the same rule the live harness applies, so a
    recorded stream reproduces the live verdict.
    """
    detectors = replace(detectors or DetectorConfig(), monitor_window=protocol.monitor_window)
    disabled = () if reference is not None and len(reference) else ("Stagnation", "OptimizationDegradation")
    final = len(metrics) >= protocol.warmup_steps
    hit = first_divergence(metrics, reference, detectors, final=final)
    if hit is None:
        return DivergenceVerdict(False, Pathology.NONE, len(metrics), protocol.eta_peak, 0, disabled)
    kind, onset, fire = hit
    tc = protocol.train_config(TrainConfig())
    return DivergenceVerdict(True, kind, onset, lr_at(onset - 1, tc), fire, disabled)


def run_ramp(cfg: ModelConfig, protocol: RampProtocol, corpus, base: Optional[TrainConfig] = None,
             detectors: Optional[DetectorConfig] = None, reference=None, with_reference: bool = False):
    """Train under the ramp, evaluating every detector after each step.

    Training stops at the first firing. Returns ``(verdict, metrics,
    reference_metrics)``. A supplied ``reference`` (or the protocol's
    ``reference_run``) enables the reference-based detectors. Otherwise, when
    ``with_reference`` is set, the reference ramp is trained in lockstep
    with the stress run and stops with it; without either the two
    reference-based detectors are reported as disabled.
    """
    base = base or TrainConfig()
    reference = reference if reference is not None else protocol.reference_run
    stress = TrainSession(wire_model(cfg), corpus, protocol.train_config(base))
    ref_session = None
    if reference is None and with_reference:
        ref_session = TrainSession(wire_model(cfg), corpus,
                                   protocol.train_config(base, peak=protocol.reference_peak))
        reference = ref_session.metrics
    verdict = None
    while not stress.done:
        stress.step()
        if ref_session is not None:
            ref_session.step()
        verdict = verdict_from_stream(stress.metrics, protocol, reference, detectors)
        if verdict.diverged:
            break
    if verdict is None:
        verdict = verdict_from_stream(stress.metrics, protocol, reference, detectors)
    return verdict, stress.metrics, reference


def max_tolerable_lr(cfg: ModelConfig, protocol: RampProtocol, corpus, base: Optional[TrainConfig] = None,
                     detectors: Optional[DetectorConfig] = None, with_reference: bool = True):
    """Verdict for one topology under ``protocol``.

    Unless the protocol carries a reference stream, a healthy reference ramp
    to ``reference_peak`` is trained alongside (``with_reference=False``
    waives the reference-based detectors instead).
    """
    return run_ramp(cfg, protocol, corpus, base, detectors, with_reference=with_reference)[0]


def write_verdict_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["topology", "pathology", "step", "max_lr", "diverged"])
        for r in rows:
            w.writerow([r["topology"], r["pathology"], r["step"], repr(float(r["max_lr"])),
                        str(bool(r["diverged"])).lower()])
