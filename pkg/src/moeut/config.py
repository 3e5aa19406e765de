"""Model configuration, JSON round-tripping and the published model presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

PATTERNS = ("cyclic", "blocked")
NORM_SCHEMES = ("peri", "pre", "post")
BLOCKS = ("moe", "dense")
DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    group_size: int = 2
    pattern: str = "cyclic"
    n_heads: int = 2
    d_head: int = 32
    n_att_experts: int = 4
    att_k: int = 2
    d_expert: int = 32
    n_experts: int = 16
    expert_k: int = 4
    vocab_size: int = 256
    context_length: int = 256
    norm_scheme: str = "peri"
    gamma: float = 0.01
    delta: float = 0.001
    block: str = "moe"
    d_ff: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "n_layers", "group_size", "n_heads", "d_head",
                     "vocab_size", "context_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.norm_scheme not in NORM_SCHEMES:
            raise ConfigError(f"norm_scheme must be one of {NORM_SCHEMES}, got {self.norm_scheme!r}")
        if self.block not in BLOCKS:
            raise ConfigError(f"block must be one of {BLOCKS}, got {self.block!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if not 1 <= self.group_size <= self.n_layers:
            raise ConfigError(f"group_size {self.group_size} must be in [1, n_layers={self.n_layers}]")
        if self.n_layers % self.group_size:
            raise ConfigError(f"n_layers={self.n_layers} is not divisible by group_size={self.group_size}")
        if self.block == "moe":
            if not 1 <= self.expert_k <= self.n_experts:
                raise ConfigError(f"expert_k={self.expert_k} must be in [1, n_experts={self.n_experts}]")
            if not 1 <= self.att_k <= self.n_att_experts:
                raise ConfigError(f"att_k={self.att_k} must be in [1, n_att_experts={self.n_att_experts}]")
            if self.d_expert < 1:
                raise ConfigError("d_expert must be positive")
        elif self.d_ff < 1:
            raise ConfigError("dense blocks need d_ff >= 1")

    @property
    def n_repeats(self) -> int:
        return self.n_layers // self.group_size

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def field_types(cls=ModelConfig) -> dict:
    return {f.name: type(f.default) for f in fields(cls)}


def coerce(cls, key: str, value: str):
    """Parse a command-line string into the declared type of ``cls.key``."""
    types = field_types(cls)
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    t = types[key]
    try:
        if t is bool:
            return value.lower() in ("1", "true", "yes", "on")
        if t is int:
            return int(float(value)) if "e" in value.lower() else int(value)
        if t is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={value!r} as {t.__name__}") from None
    return value


def load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


def load_config(path) -> ModelConfig:
    return ModelConfig.from_dict(load_json(path))


def save_config(cfg: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")


def _moeut(n_layers, group_size, d_model, n_heads, n_att, d_head, n_experts, k, **kw):
    att_k = 2 if n_att >= 2 else 1
    return ModelConfig(d_model=d_model, n_layers=n_layers, group_size=group_size, n_heads=n_heads,
                       d_head=d_head, n_att_experts=n_att, att_k=att_k, d_expert=128,
                       n_experts=n_experts, expert_k=k, vocab_size=8000, context_length=1024, **kw)


def _dense(n_layers, d_model, d_ff, n_heads, d_head):
    return ModelConfig(d_model=d_model, n_layers=n_layers, group_size=n_layers, n_heads=n_heads,
                       d_head=d_head, block="dense", d_ff=d_ff, vocab_size=8000,
                       context_length=1024, norm_scheme="pre", n_att_experts=1, att_k=1,
                       n_experts=1, expert_k=1)


# name -> (reported parameter count, config); vocabulary of 8000 tokens.
TABLE3 = {
    "dense_45M": (45e6, _dense(16, 412, 2053, 10, 41)),
    "moeut_44M": (44e6, _moeut(16, 2, 412, 4, 8, 82, 155, 12)),
    "sigma_moe_44M": (44e6, _moeut(16, 16, 412, 4, 1, 82, 17, 12)),
    "dense_126M": (126e6, _dense(16, 768, 3072, 16, 48)),
    "moeut_126M": (126e6, _moeut(18, 2, 768, 4, 10, 96, 254, 12)),
    "sigma_moe_126M": (126e6, _moeut(18, 18, 768, 4, 1, 96, 26, 12)),
    "dense_244M": (244e6, _dense(18, 1024, 4110, 16, 64)),
    "moeut_243M": (243e6, _moeut(18, 2, 1024, 4, 10, 128, 387, 16)),
    "sigma_moe_244M": (244e6, _moeut(18, 18, 1024, 4, 1, 128, 40, 16)),
    "dense_319M": (319e6, _dense(24, 1024, 4110, 16, 64)),
    "moeut_318M": (318e6, _moeut(24, 3, 1024, 4, 10, 128, 338, 16)),
    "sigma_moe_320M": (320e6, _moeut(24, 24, 1024, 4, 1, 128, 40, 16)),
    "dense_729M": (729e6, _dense(36, 1280, 5120, 20, 64)),
    "moeut_727M": (727e6, _moeut(36, 4, 1280, 5, 13, 128, 467, 20)),
    "sigma_moe_731M": (731e6, _moeut(36, 36, 1280, 5, 1, 128, 50, 20)),
    "dense_1044M": (1044e6, _dense(36, 1536, 6144, 24, 64)),
    "moeut_1040M": (1040e6, _moeut(36, 4, 1536, 6, 12, 128, 565, 24)),
}

# dense baseline preset -> the MoEUT preset built from it
TABLE3_PAIRS = {
    "dense_45M": "moeut_44M",
    "dense_126M": "moeut_126M",
    "dense_244M": "moeut_243M",
    "dense_319M": "moeut_318M",
    "dense_729M": "moeut_727M",
    "dense_1044M": "moeut_1040M",
}


def preset(name: str) -> ModelConfig:
    try:
        return TABLE3[name][1]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(TABLE3)}") from None
