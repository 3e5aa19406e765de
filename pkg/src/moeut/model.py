"""Shared-layer MoE transformer assembled from a group of blocks applied recurrently.

The group holds ``group_size`` blocks with distinct parameters.  A schedule
maps each of the ``n_layers`` layer steps to a group member, so members
are reused (the same tensors, not copies) at every step they appear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .accounting import norm_sites
from .analysis import SelectionTrace
from .attention import (AttentionHeadBank, DenseAttentionBank, attention_entropy_reg,
                        dense_attention, switchhead)
from .config import ConfigError, ModelConfig
from .moe_ffn import FfnExpertBank, balancing_loss, ffn_forward, trunc_normal
from .tensor import Tensor


def build_schedule(n_layers: int, group_size: int, pattern: str = "cyclic") -> list[int]:
    """Group member used at each layer step.

    ``cyclic`` repeats the whole group (ABAB); ``blocked`` repeats each member
    for consecutive steps (AABB).
    """
    if group_size < 1 or n_layers < 1:
        raise ConfigError("n_layers and group_size must be positive")
    if n_layers % group_size:
        raise ConfigError(f"n_layers={n_layers} is not divisible by group_size={group_size}")
    reps = n_layers // group_size
    if pattern == "cyclic":
        return list(range(group_size)) * reps
    if pattern == "blocked":
        return [m for m in range(group_size) for _ in range(reps)]
    raise ConfigError(f"unknown pattern {pattern!r}")


@dataclass
class DenseFfn:
    w1: Tensor
    w2: Tensor


@dataclass
class GroupMember:
    attn: object
    ffn: object
    norms: dict  # site -> (gain, bias)

    def tensors(self) -> list[Tensor]:
        out = list(vars(self.attn).values()) + list(vars(self.ffn).values())
        for g, b in self.norms.values():
            out += [g, b]
        return out


@dataclass
class BlockAux:
    l_ffn: Optional[Tensor] = None
    l_att: Optional[Tensor] = None
    ffn_experts: Optional[np.ndarray] = None
    routing: list = field(default_factory=list)


@dataclass
class ForwardOutput:
    logits: Tensor
    l_ffn: Optional[Tensor]
    l_att: Optional[Tensor]
    trace: Optional[SelectionTrace] = None
    routing: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)


def _norm(rng_dtype, d, prefix):
    return (Tensor(np.ones(d, dtype=rng_dtype), requires_grad=True, name=f"{prefix}.gain"),
            Tensor(np.zeros(d, dtype=rng_dtype), requires_grad=True, name=f"{prefix}.bias"))


def _ln(x: Tensor, norms: dict, site: str) -> Tensor:
    gain, bias = norms[site]
    return T.layer_norm(x, gain, bias, site=site)


def block_forward(x: Tensor, member: GroupMember, cfg: ModelConfig) -> tuple[Tensor, BlockAux]:
    """One attention + feedforward block under ``cfg.norm_scheme``.

    peri: norms only on the inputs of the query/key projections and of every
    expert selector; the residual and the value/expert inputs stay raw.
    pre: one norm at the entry of each sublayer.  post: the sum of residual
    and sublayer output is normalized.
    """
    scheme, moe = cfg.norm_scheme, cfg.block == "moe"
    n = member.norms
    aux = BlockAux()

    if scheme == "peri":
        q_in, k_in = _ln(x, n, "q"), _ln(x, n, "k")
        sv_in = _ln(x, n, "sel_v") if moe else None
        so_in = _ln(x, n, "sel_o") if moe else None
        v_in = x
    elif scheme == "pre":
        v_in = _ln(x, n, "att")
        q_in = k_in = sv_in = so_in = v_in
    elif scheme == "post":
        v_in = q_in = k_in = sv_in = so_in = x
    else:
        raise ConfigError(f"unknown norm scheme {scheme!r}")

    if moe:
        att = switchhead(v_in, member.attn, cfg.att_k, q_in=q_in, k_in=k_in, sv_in=sv_in, so_in=so_in)
        aux.l_att = attention_entropy_reg(att.selector_logits)
        for h in att.heads:
            aux.routing += [h.value.indices, h.output.indices]
    else:
        att = dense_attention(v_in, member.attn, q_in=q_in, k_in=k_in)
    x = T.add(x, att.y, tag="residual")
    if scheme == "post":
        x = _ln(x, n, "att")

    if scheme == "peri":
        f_in, s_in = x, (_ln(x, n, "sel_ffn") if moe else None)
    elif scheme == "pre":
        f_in = _ln(x, n, "ffn")
        s_in = f_in
    else:
        f_in = s_in = x

    if moe:
        y, sel, logits = ffn_forward(f_in, member.ffn, cfg.expert_k, selector_input=s_in,
                                     return_selection=True)
        aux.l_ffn = balancing_loss(logits)
        aux.ffn_experts = sel.indices
        aux.routing.append(sel.indices)
    else:
        y = T.matmul(T.relu(T.matmul(f_in, member.ffn.w1)), member.ffn.w2)
    x = T.add(x, y, tag="residual")
    if scheme == "post":
        x = _ln(x, n, "ffn")
    return x, aux


class MoEUT:
    """Parameters and forward pass of a (possibly layer-shared) MoE transformer."""

    def __init__(self, cfg: ModelConfig, seed: int | np.random.Generator = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        d, dt = cfg.d_model, self.dtype
        self.schedule = build_schedule(cfg.n_layers, cfg.group_size, cfg.pattern)
        self.embedding = Tensor(trunc_normal(rng, (cfg.vocab_size, d), d ** -0.5, dt),
                                requires_grad=True, name="embedding")
        sites, final = norm_sites(cfg)
        self.members: list[GroupMember] = []
        for m in range(cfg.group_size):
            pre = f"group.{m}"
            if cfg.block == "moe":
                attn = AttentionHeadBank.init(rng, d, cfg.n_heads, cfg.d_head, cfg.n_att_experts,
                                              dt, prefix=f"{pre}.attn")
                ffn = FfnExpertBank.init(rng, d, cfg.d_expert, cfg.n_experts, dt, prefix=f"{pre}.ffn")
            else:
                attn = DenseAttentionBank.init(rng, d, cfg.n_heads, cfg.d_head, dt, prefix=f"{pre}.attn")
                ffn = DenseFfn(
                    Tensor(trunc_normal(rng, (d, cfg.d_ff), d ** -0.5, dt), requires_grad=True,
                           name=f"{pre}.ffn.w1"),
                    Tensor(trunc_normal(rng, (cfg.d_ff, d), cfg.d_ff ** -0.5, dt), requires_grad=True,
                           name=f"{pre}.ffn.w2"))
            norms = {s: _norm(dt, d, f"{pre}.norm_{s}") for s in sites}
            self.members.append(GroupMember(attn, ffn, norms))
        self.final_norm = _norm(dt, d, "final_norm") if final else None
        self.classifier_w = Tensor(trunc_normal(rng, (d, cfg.vocab_size), d ** -0.5, dt),
                                   requires_grad=True, name="classifier.w")
        self.classifier_b = Tensor(np.zeros(cfg.vocab_size, dtype=dt), requires_grad=True,
                                   name="classifier.b")

    def parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for m in self.members:
            for t in m.tensors():
                out[t.name] = t
        if self.final_norm is not None:
            out["final_norm.gain"], out["final_norm.bias"] = self.final_norm
        out["classifier.w"] = self.classifier_w
        out["classifier.b"] = self.classifier_b
        return out

    def n_params(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def load_arrays(self, arrays: dict) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            raise ValueError("parameter names do not match the model")
        for name, t in params.items():
            a = np.asarray(arrays[name])
            if a.shape != t.shape:
                raise T.ShapeError(f"{name}: shape {a.shape} vs {t.shape}")
            t.data = np.array(a, dtype=t.dtype)

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def forward(self, tokens, *, trace: bool = False, trace_members: Sequence[int] = (0,),
                seq_offset: int = 0, record_residuals: bool = False) -> ForwardOutput:
        """Logits for (T,) or (B, T) token ids plus averaged auxiliary losses.

        With ``trace`` the feedforward selections of ``trace_members`` are
        recorded; ``record_residuals`` stores each block's mean update norm.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        if tokens.shape[1] > cfg.context_length:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds context {cfg.context_length}")
        x = T.embedding(self.embedding, tokens)
        rec = SelectionTrace(cfg.expert_k) if trace else None
        out = ForwardOutput(None, None, None, rec)
        l_ffn, l_att = [], []
        for step, m in enumerate(self.schedule):
            x_prev = x
            where = f"layer-step {step} (group member {m})"
            try:
                x, aux = block_forward(x, self.members[m], cfg)
            except T.NumericError as e:
                raise T.NumericError(f"{where}: {e}") from None
            T.check_finite(x, where)
            if aux.l_ffn is not None:
                l_ffn.append(aux.l_ffn)
            if aux.l_att is not None:
                l_att.append(aux.l_att)
            out.routing += aux.routing
            if rec is not None and aux.ffn_experts is not None and m in trace_members:
                rec.add(layer_step=step, member=m, tokens=tokens, experts=aux.ffn_experts,
                        seq_offset=seq_offset)
            if record_residuals:
                diff = x.data.astype(np.float64) - x_prev.data
                out.residual_norms.append(float(np.linalg.norm(diff, axis=-1).mean()))
        h = T.layer_norm(x, *self.final_norm, site="final") if self.final_norm is not None else x
        logits = T.add(T.matmul(h, self.classifier_w), self.classifier_b)
        if single:
            logits = logits.reshape(logits.shape[1:])
        out.logits = logits
        out.l_ffn = _average(l_ffn)
        out.l_att = _average(l_att)
        return out

    __call__ = forward


def _average(terms: list) -> Optional[Tensor]:
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def model_forward(tokens, model: MoEUT, **kw) -> ForwardOutput:
    return model.forward(tokens, **kw)


@dataclass
class LossTerms:
    total: Tensor
    ce: Tensor
    l_ffn: Optional[Tensor]
    l_att: Optional[Tensor]


def lm_loss(model: MoEUT, inputs: np.ndarray, targets: np.ndarray, **kw) -> tuple[LossTerms, ForwardOutput]:
    """Cross entropy plus ``gamma``- and ``delta``-weighted balancing losses."""
    out = model.forward(inputs, **kw)
    ce = T.cross_entropy(out.logits.reshape(-1, model.cfg.vocab_size), np.asarray(targets).reshape(-1))
    total = ce
    if out.l_ffn is not None:
        total = total + out.l_ffn * model.cfg.gamma
    if out.l_att is not None:
        total = total + out.l_att * model.cfg.delta
    return LossTerms(total, ce, out.l_ffn, out.l_att), out
