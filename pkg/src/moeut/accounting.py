"""Closed-form parameter and multiply-accumulate counts, and MoEUT sizing from a dense baseline.

Counts follow the parameter layout built by :mod:`moeut.model`: untied
embedding and classifier (with bias), per-site layernorm gain and bias, and
one set of block weights per group member.  MACs count only multiply-adds of
the forward pass; nonlinearities and normalization are free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import TABLE3, TABLE3_PAIRS, ConfigError, ModelConfig

ATTENTION_SHARE = (0.10, 0.15)


def norm_sites(cfg: ModelConfig) -> tuple[list[str], bool]:
    """Layernorm sites inside one block and whether a final pre-classifier norm exists."""
    if cfg.norm_scheme == "peri":
        sites = ["q", "k"] + (["sel_v", "sel_o", "sel_ffn"] if cfg.block == "moe" else [])
        return sites, True
    if cfg.norm_scheme == "pre":
        return ["att", "ffn"], True
    return ["att", "ffn"], False


def attention_params(cfg: ModelConfig) -> int:
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    if cfg.block == "dense":
        return 4 * h * d * dh
    n_a = cfg.n_att_experts
    return h * (2 * d * dh + 2 * n_a * d * dh + 2 * d * n_a)


def ffn_params(cfg: ModelConfig) -> int:
    d = cfg.d_model
    if cfg.block == "dense":
        return 2 * d * cfg.d_ff
    return cfg.n_experts * cfg.d_expert * d * 2 + d * cfg.n_experts


def param_breakdown(cfg: ModelConfig) -> dict:
    sites, final = norm_sites(cfg)
    d, g = cfg.d_model, cfg.group_size
    parts = {
        "embedding": cfg.vocab_size * d,
        "classifier": d * cfg.vocab_size + cfg.vocab_size,
        "final_norm": 2 * d if final else 0,
        "attention": g * attention_params(cfg),
        "ffn": g * ffn_params(cfg),
        "block_norms": g * len(sites) * 2 * d,
    }
    parts["total"] = sum(parts.values())
    return parts


def count_params(cfg: ModelConfig) -> int:
    return param_breakdown(cfg)["total"]


def non_embedding_params(cfg: ModelConfig) -> int:
    b = param_breakdown(cfg)
    return b["total"] - b["embedding"] - b["classifier"]


def attention_share(cfg: ModelConfig) -> float:
    """Fraction of non-embedding parameters spent on attention."""
    b = param_breakdown(cfg)
    return b["attention"] / (b["attention"] + b["ffn"])


def mac_breakdown(cfg: ModelConfig, seq_len: int) -> dict:
    """Forward MACs for one sequence of ``seq_len`` tokens, split by component.

    Attention scores and the weighted value sum each cost ``seq_len * d_head``
    per head and token.  MoE layers count only active experts plus selectors.
    """
    if seq_len < 0:
        raise ValueError("seq_len must be non-negative")
    d, h, dh, t, n = cfg.d_model, cfg.n_heads, cfg.d_head, seq_len, cfg.n_layers
    per_token = {
        "attn_query_key": 2 * h * d * dh,
        "attention_matrix": 2 * h * t * dh,
    }
    if cfg.block == "dense":
        per_token["attn_value_output"] = 2 * h * d * dh
        per_token["attn_selectors"] = 0
        per_token["ffn"] = 2 * d * cfg.d_ff
        per_token["ffn_selector"] = 0
    else:
        per_token["attn_value_output"] = 2 * h * cfg.att_k * d * dh
        per_token["attn_selectors"] = 2 * h * d * cfg.n_att_experts
        per_token["ffn"] = 2 * cfg.expert_k * cfg.d_expert * d
        per_token["ffn_selector"] = d * cfg.n_experts
    out = {k: v * n * t for k, v in per_token.items()}
    out["classifier"] = d * cfg.vocab_size * t
    out["total"] = sum(out.values())
    return out


def count_macs(cfg: ModelConfig, seq_len: int) -> int:
    return mac_breakdown(cfg, seq_len)["total"]


@dataclass(frozen=True)
class DenseSpec:
    d_model: int
    n_layers: int
    n_heads: int
    d_head: int
    d_ff: int = 0
    vocab_size: int = 8000
    context_length: int = 1024

    def config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers, group_size=self.n_layers,
                           n_heads=self.n_heads, d_head=self.d_head, block="dense",
                           d_ff=self.d_ff or 4 * self.d_model, vocab_size=self.vocab_size,
                           context_length=self.context_length, norm_scheme="pre",
                           n_att_experts=1, att_k=1, n_experts=1, expert_k=1)


def group_size_for(n_params: float) -> int:
    if n_params < 300e6:
        return 2
    if n_params < 500e6:
        return 3
    return 4


def solve_experts(base: ModelConfig, target_params: float, n_att_experts: int | None = None) -> ModelConfig:
    """Choose feedforward and attention expert counts that hit ``target_params``.

    Without an explicit ``n_att_experts`` the smallest count whose attention
    share reaches the lower end of the allowed band is used.
    """
    per_expert = 2 * base.d_expert * base.d_model + base.d_model
    candidates = [n_att_experts] if n_att_experts else range(base.att_k, 257)
    for n_a in candidates:
        probe = base.with_(n_att_experts=n_a, n_experts=max(base.expert_k, 1))
        fixed = count_params(probe) - base.group_size * ffn_params(probe)
        n_e = round((target_params - fixed) / (base.group_size * per_expert))
        if n_e < max(base.expert_k, 1):
            raise ConfigError(f"target of {target_params:.4g} parameters leaves no room for "
                              f"{base.expert_k} experts with {n_a} attention experts")
        cfg = base.with_(n_att_experts=n_a, n_experts=n_e)
        if n_att_experts or attention_share(cfg) >= ATTENTION_SHARE[0]:
            return cfg
    raise ConfigError("no attention expert count reaches the required attention share")


def _table_match(dense: DenseSpec) -> str | None:
    for dense_name, moeut_name in TABLE3_PAIRS.items():
        ref = TABLE3[dense_name][1]
        if (ref.d_model, ref.n_layers, ref.n_heads, ref.d_head) == (
                dense.d_model, dense.n_layers, dense.n_heads, dense.d_head):
            return moeut_name
    return None


def build_config_from_dense(dense: DenseSpec, target_params: float | None = None,
                            prefer_table: bool = True, d_expert: int = 128) -> ModelConfig:
    """MoEUT configuration parameter-matched to a dense baseline.

    Heads drop to a quarter and double in width, two attention experts are
    active, experts are 128 wide with ``K = 2 d_model / d_expert``.  When the
    dense dimensions match a published baseline and ``prefer_table`` is set,
    the published expert counts are returned as-is.
    """
    if min(dense.d_model, dense.n_layers, dense.n_heads, dense.d_head) < 1:
        raise ConfigError("dense dimensions must be positive")
    if target_params is None:
        target_params = count_params(dense.config())
    if prefer_table:
        name = _table_match(dense)
        if name is not None:
            return TABLE3[name][1].with_(vocab_size=dense.vocab_size,
                                         context_length=dense.context_length)
    n_heads = max(1, round(dense.n_heads / 4))
    k = max(1, round(2 * dense.d_model / d_expert))
    group = group_size_for(target_params)
    while dense.n_layers % group:
        group -= 1
    base = ModelConfig(d_model=dense.d_model, n_layers=dense.n_layers, group_size=group,
                       n_heads=n_heads, d_head=2 * dense.d_head, n_att_experts=2, att_k=2,
                       d_expert=d_expert, n_experts=k, expert_k=k, vocab_size=dense.vocab_size,
                       context_length=dense.context_length, norm_scheme="peri")
    return solve_experts(base, target_params)


def relative_error(got: float, want: float) -> float:
    return abs(got - want) / abs(want) if want else math.inf
