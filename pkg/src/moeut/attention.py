"""SwitchHead attention: dense query/key per head, routed value and output projections.

Queries and keys are ordinary per-head projections with rotary position
encoding.  Each head owns ``N_A`` value experts and ``N_A`` output experts;
the value and output selections are made independently from the block input
with sigmoid scores and top-``K_A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .moe_ffn import ExpertSelection, balancing_loss, routed_sum, select_experts, trunc_normal
from .tensor import Tensor

ROPE_BASE = 10000.0


@dataclass
class AttentionHeadBank:
    """Stacked per-head weights.

    w_q, w_k: (H, d_model, d_head); w_v: (H, N_A, d_model, d_head);
    w_o: (H, N_A, d_head, d_model); w_sv, w_so: (H, d_model, N_A).
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_sv: Tensor
    w_so: Tensor

    def __post_init__(self):
        h, d, dh = self.w_q.shape
        n_a = self.w_v.shape[1]
        expected = {
            "w_k": (h, d, dh), "w_v": (h, n_a, d, dh), "w_o": (h, n_a, dh, d),
            "w_sv": (h, d, n_a), "w_so": (h, d, n_a),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise T.ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[2]

    @property
    def n_experts(self) -> int:
        return self.w_v.shape[1]

    @classmethod
    def init(cls, rng, d_model, n_heads, d_head, n_experts, dtype=np.float32, prefix="attn"):
        def p(name, shape, std):
            return Tensor(trunc_normal(rng, shape, std, dtype), requires_grad=True,
                          name=f"{prefix}.{name}")

        sd, sh = d_model ** -0.5, d_head ** -0.5
        return cls(
            w_q=p("w_q", (n_heads, d_model, d_head), sd),
            w_k=p("w_k", (n_heads, d_model, d_head), sd),
            w_v=p("w_v", (n_heads, n_experts, d_model, d_head), sd),
            w_o=p("w_o", (n_heads, n_experts, d_head, d_model), sh),
            w_sv=p("w_sv", (n_heads, d_model, n_experts), sd),
            w_so=p("w_so", (n_heads, d_model, n_experts), sd),
        )


@dataclass
class HeadRouting:
    """Selections and selector logits for one head."""

    value: ExpertSelection
    output: ExpertSelection
    value_logits: Tensor
    output_logits: Tensor


@dataclass
class AttentionResult:
    y: Tensor
    heads: list = field(default_factory=list)

    @property
    def selector_logits(self) -> list:
        out = []
        for h in self.heads:
            out += [h.value_logits, h.output_logits]
        return out


def positions_for(x: Tensor) -> np.ndarray:
    return np.arange(x.shape[-2])


def project_qk(xq: Tensor, xk: Tensor, bank, head: int) -> tuple[Tensor, Tensor]:
    """Rotary-encoded query and key of one head; positions count from 0 along the time axis."""
    pos = positions_for(xq)
    q = T.rope(T.matmul(xq, bank.w_q[head]), pos, ROPE_BASE)
    k = T.rope(T.matmul(xk, bank.w_k[head]), pos, ROPE_BASE)
    return q, k


def value_moe(x: Tensor, bank: AttentionHeadBank, head: int, k_a: int,
              selector_input: Tensor | None = None):
    """Routed value projection of one head; returns ``(v, selection, logits)``."""
    logits = T.matmul(selector_input if selector_input is not None else x, bank.w_sv[head])
    sel = select_experts(T.sigmoid(logits), k_a)
    w_v = bank.w_v[head]
    v = routed_sum(x, sel, lambda rows, groups: T.grouped_matmul(rows, w_v, groups))
    return v, sel, logits


def output_moe(a: Tensor, x: Tensor, bank: AttentionHeadBank, head: int, k_a: int,
               selector_input: Tensor | None = None):
    """Routed output projection of one head's attended values.

    The selection is computed from the block input ``x`` (or its normalized
    ``selector_input``), never from ``a``.  Returns ``(y, selection, logits)``.
    """
    logits = T.matmul(selector_input if selector_input is not None else x, bank.w_so[head])
    sel = select_experts(T.sigmoid(logits), k_a)
    w_o = bank.w_o[head]
    y = routed_sum(a, sel, lambda rows, groups: T.grouped_matmul(rows, w_o, groups))
    return y, sel, logits


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def attention_core(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """Scaled dot-product attention over (..., T, d_head) inputs."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"attention_core: q {q.shape}, k {k.shape}, v {v.shape}")
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = T.matmul(q, kt) * (1.0 / math.sqrt(q.shape[-1]))
    mask = causal_mask(q.shape[-2]) if causal else None
    return T.matmul(T.softmax_lastdim(scores, mask), v)


def switchhead(x: Tensor, bank: AttentionHeadBank, k_a: int, *, q_in: Tensor, k_in: Tensor,
               sv_in: Tensor, so_in: Tensor) -> AttentionResult:
    """Full SwitchHead layer; head outputs are summed in head order."""
    y = None
    heads = []
    for h in range(bank.n_heads):
        q, k = project_qk(q_in, k_in, bank, h)
        v, vsel, vlog = value_moe(x, bank, h, k_a, selector_input=sv_in)
        a = attention_core(q, k, v)
        o, osel, olog = output_moe(a, x, bank, h, k_a, selector_input=so_in)
        y = o if y is None else y + o
        heads.append(HeadRouting(vsel, osel, vlog, olog))
    return AttentionResult(y, heads)


def attention_entropy_reg(selector_logits) -> Tensor:
    """Sum of per-sequence balancing losses over every value and output selector."""
    total = None
    for logits in selector_logits:
        term = balancing_loss(logits)
        total = term if total is None else total + term
    return total


@dataclass
class DenseAttentionBank:
    """Standard multi-head attention weights for the dense baseline."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, rng, d_model, n_heads, d_head, dtype=np.float32, prefix="attn"):
        def p(name, shape, std):
            return Tensor(trunc_normal(rng, shape, std, dtype), requires_grad=True,
                          name=f"{prefix}.{name}")

        sd = d_model ** -0.5
        return cls(p("w_q", (n_heads, d_model, d_head), sd), p("w_k", (n_heads, d_model, d_head), sd),
                   p("w_v", (n_heads, d_model, d_head), sd),
                   p("w_o", (n_heads, d_head, d_model), d_head ** -0.5))


def dense_attention(x: Tensor, bank: DenseAttentionBank, *, q_in: Tensor, k_in: Tensor) -> AttentionResult:
    y = None
    for h in range(bank.n_heads):
        q, k = project_qk(q_in, k_in, bank, h)
        a = attention_core(q, k, T.matmul(x, bank.w_v[h]))
        o = T.matmul(a, bank.w_o[h])
        y = o if y is None else y + o
    return AttentionResult(y, [])
