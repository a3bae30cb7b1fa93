"""Layer-removal redundancy profiles of trained models."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import no_grad
from .topology import Model, forward_lm, skip_sublayer
from .trainer import evaluate_ppl

log = logging.getLogger(__name__)


@dataclass
class RedundancyProfile:
    """``per_layer_delta_ppl[i]`` is PPL with sub-layer ``i`` skipped minus the full PPL."""

    topology: str
    per_layer_delta_ppl: list
    full_ppl: float
    untrained_warning: bool = False
    restored: bool = True
    n_windows: int = 0
    seq_len: int = 0
    negative_layers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.full_ppl > 0:
            raise ContractError(f"full_ppl must be positive, got {self.full_ppl}")

    @property
    def L(self) -> int:
        return len(self.per_layer_delta_ppl)

    @property
    def argmax_layer(self) -> int:
        return int(np.argmax(self.per_layer_delta_ppl))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["L"] = self.L
        d["argmax_layer"] = self.argmax_layer
        return d


def _fingerprint(model: Model, tokens: np.ndarray) -> bytes:
    with no_grad():
        logits, _ = forward_lm(model, tokens)
    return logits.data.tobytes()


def layer_redundancy(model: Model, eval_data, seq_len: int = 64, n_windows: int = 64,
                     tolerance: float = 1e-9) -> RedundancyProfile:
    """Skip each sub-layer in turn and record the perplexity increase.

    Evaluation uses the first ``n_windows`` non-overlapping windows of
    ``eval_data``. Skipping works on views, so the model is never modified;
    this is checked by comparing logits on one window before and after.
    """
    if model.skipped:
        raise ContractError("redundancy is profiled on the full model")
    data = np.asarray(eval_data)
    available = (len(data) - 1) // seq_len
    if available < n_windows:
        raise ContractError(f"eval slice holds {available} windows of {seq_len}, need {n_windows}")
    probe = data[:seq_len].astype(np.int64)
    before = _fingerprint(model, probe)

    full = evaluate_ppl(model, data, seq_len, max_windows=n_windows)
    deltas = []
    for i in range(model.cfg.n_sublayers):
        ppl = evaluate_ppl(skip_sublayer(model, i), data, seq_len, max_windows=n_windows)
        deltas.append(ppl - full if math.isfinite(ppl) else float("inf"))
    restored = _fingerprint(model, probe) == before

    warn = not full < 0.9 * model.cfg.vocab_size
    if warn:
        log.warning("full-model perplexity %.1f is near chance; deltas are uninformative", full)
    negative = [i for i, d in enumerate(deltas) if d < -tolerance]
    if negative:
        log.info("removing sub-layers %s lowered perplexity", negative)
    return RedundancyProfile(model.cfg.topology.kind.value, deltas, full, warn, restored,
                             n_windows, seq_len, negative)


def terciles(L: int) -> list:
    """Index ranges of the shallow, middle and deep thirds of ``L`` sub-layers."""
    edges = [round(k * L / 3) for k in range(4)]
    return [range(edges[k], edges[k + 1]) for k in range(3)]


def monotonicity(deltas: Sequence[float], skip_first: int = 2) -> float:
    """Fraction of adjacent pairs with ``delta[i+1] >= delta[i]``, ignoring the first layers."""
    d = np.asarray(deltas, dtype=np.float64)[skip_first:]
    if d.size < 2:
        return float("nan")
    return float(np.mean(d[1:] >= d[:-1]))


def redundancy_summary(profiles: Sequence[RedundancyProfile], skip_first: int = 2) -> dict:
    """Tercile means and monotonicity per topology.

    Tercile means exclude the first ``skip_first`` sub-layers so that the
    critical input layers do not dominate the shallow third. The raw means
    including them are reported alongside.
    """
    if not profiles:
        raise ContractError("need at least one profile")
    L = profiles[0].L
    if any(p.L != L for p in profiles):
        raise ContractError(f"profiles disagree on depth: {[p.L for p in profiles]}")
    if any((p.n_windows, p.seq_len) != (profiles[0].n_windows, profiles[0].seq_len) for p in profiles):
        raise ContractError("profiles were measured on different eval slices")
    rows = []
    for p in profiles:
        d = np.asarray(p.per_layer_delta_ppl, dtype=np.float64)
        means, raw = [], []
        for r in terciles(L):
            idx = [i for i in r if i >= skip_first]
            means.append(float(d[idx].mean()) if idx else float("nan"))
            raw.append(float(d[list(r)].mean()) if len(r) else float("nan"))
        rows.append({"topology": p.topology, "full_ppl": p.full_ppl,
                     "tercile_means": means, "tercile_means_all_layers": raw,
                     "monotonicity": monotonicity(d, skip_first),
                     "argmax_layer": p.argmax_layer,
                     "untrained_warning": p.untrained_warning})
    return {"L": L, "skip_first": skip_first, "profiles": rows}


def write_profile_csv(profiles: Sequence[RedundancyProfile], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["topology", "layer_index", "delta_ppl"])
        for p in profiles:
            for i, d in enumerate(p.per_layer_delta_ppl):
                w.writerow([p.topology, i, repr(float(d))])


def write_summary_json(profiles: Sequence[RedundancyProfile], path) -> None:
    out = redundancy_summary(profiles)
    out["profiles_full"] = [p.to_dict() for p in profiles]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
