"""Backward-signal measurements through depth and their closed-form comparators."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .config import KEEL_FAMILY, Kind, sublayer_kinds
from .errors import ContractError, NumericOverflow
from .topology import Model, lm_loss


def postln_theoretical_product(L: int) -> float:
    """Cumulative shortcut-path gain of plain Post-LN: ``2**(-L/2)``."""
    if L < 0:
        raise ValueError("L must be non-negative")
    return 2.0 ** (-L / 2.0)


def keel_theoretical_product(L: int, alpha: float) -> float:
    """``(alpha / sqrt(alpha**2 + 1))**L``, computed in log space."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return math.exp(-0.5 * L * math.log1p(1.0 / (alpha * alpha)))


def theoretical_product(model_or_cfg) -> float:
    cfg = getattr(model_or_cfg, "cfg", model_or_cfg)
    L = cfg.n_sublayers
    kind = cfg.topology.kind
    if kind is Kind.PRELN:
        return 1.0
    if kind is Kind.POSTLN:
        return postln_theoretical_product(L)
    if kind in KEEL_FAMILY or kind is Kind.DEEPNORM:
        return keel_theoretical_product(L, cfg.topology.resolve_alpha(L))
    n_post = sum(k is Kind.POSTLN for k in sublayer_kinds(cfg))
    return postln_theoretical_product(n_post)


def analysis_start(model_or_cfg) -> int:
    """First sub-layer covered by fits: 2 for the KEEL family, else 0."""
    cfg = getattr(model_or_cfg, "cfg", model_or_cfg)
    return 2 if cfg.topology.kind in KEEL_FAMILY else 0


@dataclass
class GradFlowReport:
    """Per-sub-layer input-gradient norms, ``per_layer_input_grad[i] = ||dL/dx_i||``.

    Index ``i`` is the input of sub-layer ``i`` (0 = embedding output).
    ``per_layer_ratio[i]`` is ``norm[i] / norm[i + 1]``, the gain of one
    backward step. ``empirical_product`` is ``norm[0] / norm[L-1]``.
    ``fitted_decay_rate`` is the OLS slope of log-norm against the number of
    sub-layers traversed backwards, over sub-layers ``start..L-1``; it is
    negative when the signal shrinks towards the input.
    """

    topology: str
    L: int
    alpha: float
    per_layer_input_grad: list
    per_layer_ratio: list
    fitted_decay_rate: float
    theoretical_product: float
    empirical_product: float
    start: int = 0
    window_product: float = float("nan")
    ln_jacobian_product: float = float("nan")
    probes: int = 1
    overflow: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=True)

    def write_jsonl(self, path, append: bool = True) -> None:
        with open(path, "a" if append else "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "grad_norm", "ratio"])
            for i, g in enumerate(self.per_layer_input_grad):
                r = self.per_layer_ratio[i] if i < len(self.per_layer_ratio) else ""
                w.writerow([i, repr(float(g)), "" if r == "" else repr(float(r))])


def _ols_slope(y: np.ndarray) -> float:
    if y.size < 2:
        return 0.0
    x = np.arange(y.size, dtype=np.float64)
    x -= x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def fit_decay_rate(norms, start: int = 0) -> float:
    """Slope of ``ln norm`` per sub-layer moving from the output towards the input."""
    n = np.asarray(norms, dtype=np.float64)[start:]
    return _ols_slope(np.log(n[::-1]))


def _overflow_report(model: Model, probes: int) -> GradFlowReport:
    L = model.cfg.n_sublayers
    nan = float("nan")
    return GradFlowReport(model.cfg.topology.kind.value, L, model.alpha, [nan] * L, [nan] * (L - 1),
                          nan, theoretical_product(model), nan, analysis_start(model), nan, nan,
                          probes, overflow=True)


def measure_gradflow(model: Model, batches, probes: Optional[int] = None) -> GradFlowReport:
    """Average input-gradient norms of the LM loss over probe batches.

    ``batches`` is a sequence of ``(B, T+1)`` token arrays; the first
    ``probes`` are used. Per-batch norms are position means; batches are
    combined by geometric mean. Parameter gradients are cleared afterwards.
    """
    batches = list(batches)
    probes = len(batches) if probes is None else probes
    if probes < 1 or probes > len(batches):
        raise ContractError(f"need 1 <= probes <= {len(batches)}, got {probes}")
    if model.skipped:
        raise ContractError("gradient flow is measured on the full model")
    L = model.cfg.n_sublayers
    logs = np.zeros(L)
    jac_logs = 0.0
    c = math.sqrt(model.cfg.d_model) if model.cfg.norm_root_dim else 1.0
    for b in batches[:probes]:
        model.zero_grad()
        try:
            loss, traces = lm_loss(model, b, instrument=True)
        except NumericOverflow:
            model.zero_grad()
            return _overflow_report(model, probes)
        loss.backward()
        norms = np.array([t.input_grad_norm for t in traces])
        if not np.all(np.isfinite(norms)) or np.any(norms <= 0):
            model.zero_grad()
            return _overflow_report(model, probes)
        logs += np.log(norms)
        # Operator-norm gain of each outer LN, c * max|gamma| / ||z||.
        for t in traces:
            key = f"layers.{t.layer_index}.ln_out"
            if key in model.params:
                gmax = float(np.max(np.abs(model.params[key].data)))
                jac_logs += math.log(c * gmax / t.pre_residual_norm)
    model.zero_grad()
    norms = np.exp(logs / probes)
    ratios = norms[:-1] / norms[1:]
    start = analysis_start(model)
    return GradFlowReport(
        topology=model.cfg.topology.kind.value,
        L=L,
        alpha=model.alpha,
        per_layer_input_grad=[float(v) for v in norms],
        per_layer_ratio=[float(v) for v in ratios],
        fitted_decay_rate=fit_decay_rate(norms, start),
        theoretical_product=theoretical_product(model),
        empirical_product=float(norms[0] / norms[-1]),
        start=start,
        window_product=float(norms[start] / norms[-1]),
        ln_jacobian_product=float(math.exp(jac_logs / probes)),
        probes=probes,
    )


def branch_grad_ratio(model: Model, batch) -> list:
    """Per sub-layer ``||dL/dx_l along the block path|| / ||dL/d(block input)||``.

    This is the gain the block's input side (``beta``, the inner LN, or
    nothing) applies to the gradient leaving the block on its way back to
    the stream. A zero block gradient yields 0.
    """
    if model.cfg.topology.kind not in (Kind.KEEL_ATTEMPT2, Kind.KEEL_ATTEMPT3, Kind.KEEL):
        raise ContractError("branch_grad_ratio applies to keel_attempt2, keel_attempt3 and keel")
    model.zero_grad()
    loss, traces = lm_loss(model, batch, instrument=True)
    loss.backward()
    out = []
    for t in traces:
        gx = t.branch_grad()
        gh = t.block_input_grad()
        nx = 0.0 if gx is None else float(np.linalg.norm(gx))
        nh = 0.0 if gh is None else float(np.linalg.norm(gh))
        if not (math.isfinite(nx) and math.isfinite(nh)):
            raise NumericOverflow(t.layer_index, "non-finite branch gradient")
        out.append(nx / nh if nh > 0 else 0.0)
    model.zero_grad()
    return out


def orthogonal_ln_construction(d: int = 64, seed: int = 0, eps: float = 0.0):
    """Measured LN gains for ``z = x + f`` with ``||f|| = ||x||`` and ``f ⟂ x``.

    Returns ``(||z|| / ||x||, gain)`` where ``gain`` is the norm of the
    gradient reaching ``z`` through ``LN(z)`` divided by the norm reaching
    ``x`` through ``LN(x)``, for one random upstream gradient. Since the LN
    Jacobian scales as ``1/||input||``, the gain is close to ``||x||/||z||``.
    """
    from . import tensor as T
    from .nn import NormParams, rmsnorm

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(d)
    f = rng.standard_normal(d)
    f -= (f @ x) / (x @ x) * x
    f *= np.linalg.norm(x) / np.linalg.norm(f)
    g = T.Tensor(rng.standard_normal(d))
    p = NormParams(T.Tensor(np.ones(d)), eps)

    def grad_through_ln(v):
        t = T.Tensor(v, requires_grad=True)
        (rmsnorm(t, p) * g).sum().backward()
        return float(np.linalg.norm(t.grad))

    z = x + f
    return float(np.linalg.norm(z) / np.linalg.norm(x)), grad_through_ln(z) / grad_through_ln(x)
