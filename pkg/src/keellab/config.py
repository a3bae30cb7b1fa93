"""Model and topology configuration."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields
from typing import Union

from .errors import ConfigError


class Kind(str, enum.Enum):
    POSTLN = "postln"
    PRELN = "preln"
    DEEPNORM = "deepnorm"
    HYBRIDNORM = "hybridnorm"
    MIXLN = "mixln"
    KEEL_ATTEMPT1 = "keel_attempt1"
    KEEL_ATTEMPT2 = "keel_attempt2"
    KEEL_ATTEMPT3 = "keel_attempt3"
    KEEL = "keel"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace(" ", "")
        aliases = {"post": "postln", "pre": "preln", "hybrid": "hybridnorm",
                   "attempt1": "keel_attempt1", "attempt2": "keel_attempt2",
                   "attempt3": "keel_attempt3", "keelattempt1": "keel_attempt1",
                   "keelattempt2": "keel_attempt2", "keelattempt3": "keel_attempt3"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown topology {value!r}; expected one of {names}") from None


KEEL_FAMILY = frozenset({Kind.KEEL_ATTEMPT1, Kind.KEEL_ATTEMPT2, Kind.KEEL_ATTEMPT3, Kind.KEEL})


@dataclass
class Topology:
    kind: Kind = Kind.KEEL
    alpha: Union[float, str] = "auto"
    mixln_post_fraction: float = 0.25
    hybrid_pattern: str = "alternate-pairs"

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        if isinstance(self.alpha, str):
            if self.alpha != "auto":
                try:
                    self.alpha = float(self.alpha)
                except ValueError:
                    raise ConfigError(f"alpha must be a number or 'auto', got {self.alpha!r}") from None
        if not isinstance(self.alpha, str):
            self.alpha = float(self.alpha)
            if self.alpha <= 0:
                raise ConfigError(f"alpha must be positive, got {self.alpha}")
            if self.kind is Kind.KEEL and self.alpha <= 1:
                raise ConfigError(f"keel alpha must exceed 1, got {self.alpha}")
        if self.kind is Kind.MIXLN and not 0.0 < self.mixln_post_fraction < 1.0:
            raise ConfigError(f"mixln_post_fraction must lie in (0, 1), got {self.mixln_post_fraction}")
        if self.hybrid_pattern not in ("alternate-pairs", "alternate-sublayers"):
            raise ConfigError(f"unknown hybrid_pattern {self.hybrid_pattern!r}")

    def resolve_alpha(self, n_sublayers: int) -> float:
        """The shortcut weight; ``auto`` is L for the KEEL family and L**0.25 for DeepNorm."""
        if not isinstance(self.alpha, str):
            return self.alpha
        if self.kind in KEEL_FAMILY:
            return float(n_sublayers)
        if self.kind is Kind.DEEPNORM:
            return float(n_sublayers) ** 0.25
        return 1.0

    @property
    def is_keel_family(self) -> bool:
        return self.kind in KEEL_FAMILY


@dataclass
class ModelConfig:
    n_sublayers: int = 8
    d_model: int = 64
    d_ff: int = 192
    n_heads: int = 4
    n_kv_heads: int = 2
    vocab_size: int = 256
    max_seq_len: int = 64
    topology: Topology = field(default_factory=Topology)
    rope_theta: float = 10000.0
    eps: float = 1e-5
    init_std: float = 0.02
    activation: str = "gelu"
    norm_root_dim: bool = True
    deepnorm_scaled: tuple = ("wv", "wo", "w_in", "w_out")
    zero_init_head: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if isinstance(self.topology, dict):
            self.topology = Topology(**self.topology)
        elif isinstance(self.topology, (str, Kind)):
            self.topology = Topology(kind=self.topology)
        self.deepnorm_scaled = tuple(self.deepnorm_scaled)
        self.validate()

    def validate(self) -> None:
        for name in ("n_sublayers", "d_model", "d_ff", "n_heads", "n_kv_heads",
                     "vocab_size", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.n_sublayers % 2:
            raise ConfigError(f"n_sublayers counts attention+FFN pairs and must be even, got {self.n_sublayers}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.n_kv_heads > self.n_heads or self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_kv_heads={self.n_kv_heads} must divide n_heads={self.n_heads}")
        for name in ("rope_theta", "eps", "init_std"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.activation not in ("gelu", "silu"):
            raise ConfigError(f"activation must be gelu or silu, got {self.activation!r}")
        unknown = set(self.deepnorm_scaled) - {"wq", "wk", "wv", "wo", "w_in", "w_out"}
        if unknown:
            raise ConfigError(f"deepnorm_scaled names unknown weights: {sorted(unknown)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def alpha(self) -> float:
        return self.topology.resolve_alpha(self.n_sublayers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topology"]["kind"] = self.topology.kind.value
        d["deepnorm_scaled"] = list(self.deepnorm_scaled)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config fields: {sorted(extra)}")
        return cls(**d)


def sublayer_kinds(cfg: ModelConfig) -> list:
    """Effective wiring of each sub-layer; hybrids resolve to PostLN/PreLN."""
    L = cfg.n_sublayers
    topo = cfg.topology
    if topo.kind is Kind.MIXLN:
        n_post = int(topo.mixln_post_fraction * L)
        return [Kind.POSTLN if i < n_post else Kind.PRELN for i in range(L)]
    if topo.kind is Kind.HYBRIDNORM:
        if topo.hybrid_pattern == "alternate-pairs":
            return [Kind.POSTLN if (i // 2) % 2 == 0 else Kind.PRELN for i in range(L)]
        return [Kind.POSTLN if i % 2 == 0 else Kind.PRELN for i in range(L)]
    return [topo.kind] * L


def sublayer_norms(kind: Kind, index: int) -> tuple:
    """Names of the normalisation parameters a sub-layer owns, in storage order."""
    if kind is Kind.PRELN:
        return ("ln_in",)
    if kind in (Kind.POSTLN, Kind.DEEPNORM):
        return ("ln_out",)
    names = []
    if kind in (Kind.KEEL_ATTEMPT3, Kind.KEEL):
        names.append("ln_in")
    if kind in (Kind.KEEL_ATTEMPT2, Kind.KEEL_ATTEMPT3):
        names.append("beta")
    if index != 0:
        names.append("ln_out")
    return tuple(names)


def has_final_norm(cfg: ModelConfig) -> bool:
    if cfg.topology.kind in KEEL_FAMILY:
        return True
    return sublayer_kinds(cfg)[-1] is Kind.PRELN
