"""Shared transformer blocks: RMS normalisation, rotary attention, feed-forward."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tensor as T
from .config import Kind, ModelConfig, sublayer_kinds, sublayer_norms, has_final_norm
from .errors import DimensionError
from .tensor import Tensor

ATTN_WEIGHTS = ("wq", "wk", "wv", "wo")
FFN_WEIGHTS = ("w_in", "w_out")


@dataclass
class NormParams:
    gamma: Tensor
    eps: float = 1e-5
    root_dim: bool = True  # divide ||x|| by sqrt(d); False gives the plain L2 form


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int
    n_kv_heads: int
    rope_theta: float = 10000.0


@dataclass
class FfnParams:
    w_in: Tensor
    w_out: Tensor
    activation: str = "gelu"


def rmsnorm(x: Tensor, p: NormParams) -> Tensor:
    return T.rms_normalize(x, p.gamma, p.eps, p.root_dim)


@lru_cache(maxsize=32)
def rope_tables(seq_len: int, head_dim: int, theta: float):
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    cos, sin = np.cos(angles), np.sin(angles)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def attention(x: Tensor, p: AttentionParams, causal: bool = True) -> Tensor:
    """Multi-head attention over ``(T, d)`` or ``(B, T, d)`` with grouped KV heads."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, S, d = x.shape
    H, Hkv = p.n_heads, p.n_kv_heads
    if d % H or H % Hkv:
        raise DimensionError(f"d={d}, heads={H}, kv_heads={Hkv} do not tile")
    hd = d // H
    cos, sin = rope_tables(S, hd, float(p.rope_theta))

    q = (x @ p.wq).reshape(B, S, H, hd).transpose(0, 2, 1, 3)
    k = (x @ p.wk).reshape(B, S, Hkv, hd).transpose(0, 2, 1, 3)
    v = (x @ p.wv).reshape(B, S, Hkv, hd).transpose(0, 2, 1, 3)
    q = T.rope(q, cos, sin)
    k = T.rope(k, cos, sin)
    k = T.repeat_heads(k, H // Hkv)
    v = T.repeat_heads(v, H // Hkv)
    ctx = T.attention_core(q, k, v, causal=causal)
    out = ctx.transpose(0, 2, 1, 3).reshape(B, S, d) @ p.wo
    return out.reshape(S, d) if squeeze else out


def ffn(x: Tensor, p: FfnParams) -> Tensor:
    h = x @ p.w_in
    h = T.gelu(h) if p.activation == "gelu" else T.silu(h)
    return h @ p.w_out


def param_shapes(cfg: ModelConfig) -> list:
    """``(name, shape, init)`` for every parameter in checkpoint order."""
    d, V = cfg.d_model, cfg.vocab_size
    kv = cfg.n_kv_heads * cfg.head_dim
    out = [("embed", (V, d), "normal")]
    for i, kind in enumerate(sublayer_kinds(cfg)):
        if i % 2 == 0:
            weights = [("wq", (d, d)), ("wk", (d, kv)), ("wv", (d, kv)), ("wo", (d, d))]
        else:
            weights = [("w_in", (d, cfg.d_ff)), ("w_out", (cfg.d_ff, d))]
        for name, shape in weights:
            out.append((f"layers.{i}.{name}", shape, "normal"))
        for name in sublayer_norms(kind, i):
            out.append((f"layers.{i}.{name}", (d,), "ones"))
    if has_final_norm(cfg):
        out.append(("final_norm", (d,), "ones"))
    out.append(("head", (d, V), "zeros" if cfg.zero_init_head else "normal"))
    return out


def init_weights(cfg: ModelConfig, scheme: Optional[str] = None, seed: Optional[int] = None) -> dict:
    """Draw a fresh parameter set.

    ``standard`` draws every matrix from N(0, init_std^2). ``deepnorm_beta``
    additionally multiplies the weights named in ``cfg.deepnorm_scaled`` by
    L**-0.25. Norm gains and input-scaling vectors start at one. The default
    scheme follows the topology.
    """
    if scheme is None:
        scheme = "deepnorm_beta" if cfg.topology.kind is Kind.DEEPNORM else "standard"
    if scheme not in ("standard", "deepnorm_beta"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    beta = float(cfg.n_sublayers) ** -0.25
    params = {}
    for name, shape, kind in param_shapes(cfg):
        if kind == "ones":
            arr = np.ones(shape)
        elif kind == "zeros":
            arr = np.zeros(shape)
        else:
            arr = rng.standard_normal(shape) * cfg.init_std
            if scheme == "deepnorm_beta" and name.rsplit(".", 1)[-1] in cfg.deepnorm_scaled:
                arr *= beta
        params[name] = Tensor(arr, requires_grad=True)
    return params
