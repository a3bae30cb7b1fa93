"""Residual/normalisation wiring of full language models.

Sub-layer ``i`` is attention for even ``i`` and FFN for odd ``i``. Each
topology decides how the block output ``F`` is combined with the incoming
stream ``x``:

============  =============================================
PostLN        ``LN(x + F(x))``
PreLN         ``x + F(LN(x))``
DeepNorm      ``LN(a*x + F(x))``
Attempt1      ``LN(a*x + F(x))``
Attempt2      ``LN(a*x + F(beta*x))``
Attempt3      ``LN(a*x + F(beta*LN(x)))``
Keel          ``LN(a*x + F(LN(x)))``
============  =============================================

For the KEEL family the first attention sub-layer drops its outer LN and
``a``, and the first FFN sub-layer drops ``a``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import KEEL_FAMILY, Kind, ModelConfig, has_final_norm, sublayer_kinds
from .errors import ConfigError, ContractError, IntegrityError, NumericOverflow
from .nn import AttentionParams, FfnParams, NormParams, attention, ffn, init_weights, rmsnorm
from .tensor import Tensor


def sublayer_step(kind: Kind, x: Tensor, F: Callable[[Tensor], Tensor], norms: dict,
                  alpha, layer_index: int, taps: Optional[dict] = None) -> Tensor:
    """One residual unit, returning ``x_{l+1}``.

    ``norms`` maps ``ln_in``/``ln_out`` to :class:`NormParams` and ``beta`` to
    a tensor, as the kind requires. When ``taps`` is a dict it receives the
    branch-side copy of ``x`` (``branch_x``), the block input (``block_in``)
    and the pre-normalisation sum (``z``) so their gradients can be read
    after backward.
    """
    kind = Kind.parse(kind)
    if isinstance(alpha, str):
        raise ConfigError(f"alpha {alpha!r} must be resolved before stepping")
    xb = x
    if taps is not None:
        xb = T.identity(x)
        taps["branch_x"] = xb

    def block(h):
        if taps is not None:
            h = T.identity(h)
            taps["block_in"] = h
        return F(h)

    def record(z):
        if taps is not None:
            taps["z"] = z
        return z

    if kind is Kind.PRELN:
        return record(x + block(rmsnorm(xb, norms["ln_in"])))
    if kind is Kind.POSTLN:
        return rmsnorm(record(x + block(xb)), norms["ln_out"])
    if kind is Kind.DEEPNORM:
        return rmsnorm(record(x * alpha + block(xb)), norms["ln_out"])
    if kind not in KEEL_FAMILY:
        raise ConfigError(f"{kind.value} is a composite topology; step its resolved kinds")

    h = xb
    if kind in (Kind.KEEL_ATTEMPT3, Kind.KEEL):
        h = rmsnorm(h, norms["ln_in"])
    if kind in (Kind.KEEL_ATTEMPT2, Kind.KEEL_ATTEMPT3):
        h = h * norms["beta"]
    elif kind is Kind.KEEL_ATTEMPT1:
        # a separate node makes gradient accumulation order match Attempt2,
        # so Attempt2 with beta=1 reproduces Attempt1 bit for bit
        h = T.identity(h)
    y = block(h)
    if layer_index < 2:
        z = record(x + y)
    else:
        z = record(x * alpha + y)
    if layer_index == 0:
        return z
    return rmsnorm(z, norms["ln_out"])


@dataclass
class SublayerTrace:
    """Instrumentation for one sub-layer of one forward pass.

    Norms are means over positions of per-position Euclidean norms. Gradient
    norms are NaN until backward has run.
    """

    layer_index: int
    kind: Kind
    _x: Tensor = field(repr=False)
    _taps: dict = field(repr=False)

    @staticmethod
    def _mean_norm(arr) -> float:
        if arr is None:
            return float("nan")
        return float(np.mean(np.linalg.norm(arr.reshape(-1, arr.shape[-1]), axis=-1)))

    @property
    def pre_residual_norm(self) -> float:
        return self._mean_norm(self._taps["z"].data)

    @property
    def input_grad_norm(self) -> float:
        return self._mean_norm(self._x.grad)

    @property
    def branch_grad_norm(self) -> float:
        """Norm of the gradient reaching ``x_l`` through the block's input path."""
        return self._mean_norm(self._taps["branch_x"].grad)

    @property
    def block_input_grad_norm(self) -> float:
        return self._mean_norm(self._taps["block_in"].grad)

    def input_grad(self):
        return self._x.grad

    def branch_grad(self):
        return self._taps["branch_x"].grad

    def block_input_grad(self):
        return self._taps["block_in"].grad


class Model:
    """A wired model: configuration, parameters and a set of skipped sub-layers.

    Views created by :func:`skip_sublayer` share the parameter tensors.
    """

    def __init__(self, cfg: ModelConfig, params: dict, skipped: frozenset = frozenset()):
        self.cfg = cfg
        self.params = params
        self.skipped = frozenset(skipped)
        self.kinds = sublayer_kinds(cfg)
        self.alpha = cfg.topology.resolve_alpha(cfg.n_sublayers)
        self.final_norm = has_final_norm(cfg)

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def clone(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.cfg, params, self.skipped)

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def _norm(self, name: str) -> NormParams:
        return NormParams(self.params[name], self.cfg.eps, self.cfg.norm_root_dim)

    def block(self, i: int) -> Callable[[Tensor], Tensor]:
        p, cfg = self.params, self.cfg
        if i % 2 == 0:
            ap = AttentionParams(p[f"layers.{i}.wq"], p[f"layers.{i}.wk"], p[f"layers.{i}.wv"],
                                 p[f"layers.{i}.wo"], cfg.n_heads, cfg.n_kv_heads, cfg.rope_theta)
            return lambda h: attention(h, ap, causal=True)
        fp = FfnParams(p[f"layers.{i}.w_in"], p[f"layers.{i}.w_out"], cfg.activation)
        return lambda h: ffn(h, fp)

    def norms(self, i: int) -> dict:
        out = {}
        for name in ("ln_in", "ln_out"):
            key = f"layers.{i}.{name}"
            if key in self.params:
                out[name] = self._norm(key)
        if f"layers.{i}.beta" in self.params:
            out["beta"] = self.params[f"layers.{i}.beta"]
        return out


def wire_model(cfg: ModelConfig, params: Optional[dict] = None, scheme: Optional[str] = None) -> Model:
    """Build a model for ``cfg``; fresh parameters are drawn when none are given."""
    if isinstance(cfg.topology.alpha, str) and cfg.topology.alpha != "auto":
        raise ConfigError(f"unresolvable alpha {cfg.topology.alpha!r}")
    if params is None:
        params = init_weights(cfg, scheme)
    return Model(cfg, params)


def skip_sublayer(model: Model, i: int) -> Model:
    """A view of ``model`` with sub-layer ``i`` replaced by the identity."""
    L = model.cfg.n_sublayers
    if not 0 <= i < L:
        raise IndexError(f"sub-layer index {i} outside [0, {L})")
    return Model(model.cfg, model.params, model.skipped | {i})


def unskip_sublayer(model: Model, i: int) -> Model:
    return Model(model.cfg, model.params, model.skipped - {i})


def _check_finite(t: Tensor, layer: int) -> None:
    if not np.isfinite(t.data).all():
        raise NumericOverflow(layer)


def forward_lm(model: Model, tokens, instrument: bool = False):
    """Causal next-token logits for ``tokens`` of shape ``(T,)`` or ``(B, T)``.

    Returns ``(logits, traces)``; ``traces`` is empty unless ``instrument``.
    Raises :class:`NumericOverflow` naming the first non-finite sub-layer.
    """
    cfg = model.cfg
    ids = np.asarray(tokens, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ContractError(f"tokens must be (T,) or (B, T), got shape {ids.shape}")
    if ids.shape[1] > cfg.max_seq_len:
        raise ContractError(f"sequence of {ids.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractError(f"token ids must lie in [0, {cfg.vocab_size})")

    x = T.embedding(model.params["embed"], ids)
    traces = []
    for i, kind in enumerate(model.kinds):
        if i in model.skipped:
            continue
        taps = None
        if instrument:
            x = T.identity(x)
            taps = {}
        x_in = x
        x = sublayer_step(kind, x, model.block(i), model.norms(i), model.alpha, i, taps)
        _check_finite(x, i)
        if instrument:
            traces.append(SublayerTrace(i, kind, x_in, taps))
    if model.final_norm:
        x = rmsnorm(x, model._norm("final_norm"))
    logits = x @ model.params["head"]
    _check_finite(logits, -1)
    if squeeze:
        logits = logits.reshape(logits.shape[1], logits.shape[2])
    return logits, traces


def lm_loss(model: Model, batch, instrument: bool = False):
    """Mean next-token cross-entropy of ``batch`` with shape ``(B, T+1)``."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim == 1:
        batch = batch[None, :]
    logits, traces = forward_lm(model, batch[:, :-1], instrument=instrument)
    loss = T.cross_entropy(logits, batch[:, 1:])
    return loss, traces


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"KEELCKPT"
FORMAT_VERSION = 1


def checkpoint_bytes(model: Model, meta: Optional[dict] = None) -> bytes:
    """Serialise config and parameters; identical inputs give identical bytes.

    Layout: magic, u32 version, u32 header length, UTF-8 JSON header, raw
    little-endian float64 arrays in header order, 32-byte SHA-256 of all
    preceding bytes.
    """
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "params": [[name, list(t.shape)] for name, t in model.params.items()],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for t in model.params.values():
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: Model, path, meta: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, meta))


def parse_checkpoint(raw: bytes):
    if len(raw) < len(MAGIC) + 8 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise IntegrityError("not a keellab checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint digest mismatch")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", body, off)
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    cfg = ModelConfig.from_dict(header["config"])
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
        params[name] = Tensor(arr, requires_grad=True)
    if off != len(body):
        raise IntegrityError("trailing bytes after parameter arrays")
    return Model(cfg, params), header.get("meta", {})


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
