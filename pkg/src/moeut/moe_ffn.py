"""Sigmoid-gated mixture-of-experts feedforward block.

Each token scores every expert with an independent sigmoid, keeps the top-K
and sums their two-layer ReLU outputs weighted by the raw (unnormalized)
scores.  A per-sequence entropy penalty on the mean softmax routing
distribution keeps expert usage spread out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class FfnExpertBank:
    """Weights of one MoE feedforward layer.

    w1: (N_E, d_model, d_expert), w2: (N_E, d_expert, d_model),
    w_s: (d_model, N_E).
    """

    w1: Tensor
    w2: Tensor
    w_s: Tensor

    def __post_init__(self):
        n_e, d_model, d_expert = self.w1.shape
        if self.w2.shape != (n_e, d_expert, d_model) or self.w_s.shape != (d_model, n_e):
            raise T.ShapeError(f"inconsistent expert bank: w1 {self.w1.shape}, "
                               f"w2 {self.w2.shape}, w_s {self.w_s.shape}")

    @property
    def n_experts(self) -> int:
        return self.w1.shape[0]

    @property
    def d_model(self) -> int:
        return self.w1.shape[1]

    @property
    def d_expert(self) -> int:
        return self.w1.shape[2]

    def n_params(self) -> int:
        return self.w1.data.size + self.w2.data.size + self.w_s.data.size

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, d_expert: int, n_experts: int,
             dtype=np.float32, prefix: str = "ffn") -> "FfnExpertBank":
        return cls(
            w1=Tensor(trunc_normal(rng, (n_experts, d_model, d_expert), d_model ** -0.5, dtype),
                      requires_grad=True, name=f"{prefix}.w1"),
            w2=Tensor(trunc_normal(rng, (n_experts, d_expert, d_model), d_expert ** -0.5, dtype),
                      requires_grad=True, name=f"{prefix}.w2"),
            w_s=Tensor(trunc_normal(rng, (d_model, n_experts), d_model ** -0.5, dtype),
                       requires_grad=True, name=f"{prefix}.w_s"),
        )


@dataclass
class ExpertSelection:
    """Chosen experts per token.

    ``indices`` is (..., K) in descending-score order; ``scores`` holds the
    sigmoid values at those indices as a differentiable tensor.
    """

    indices: np.ndarray
    scores: Tensor

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal samples resampled until they fall within two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(dtype)


def expert_scores(x: Tensor, w_s: Tensor) -> Tensor:
    """Independent sigmoid score for every expert, shape (..., N_E)."""
    return T.sigmoid(T.matmul(x, w_s))


def select_experts(s: Tensor, k: int) -> ExpertSelection:
    """Keep the ``k`` highest-scoring experts per row of ``s``."""
    idx, _ = T.topk(s, k)
    flat = s if s.ndim == 2 else s.reshape(-1, s.shape[-1])
    flat_idx = idx.reshape(-1, k)
    rows = np.repeat(np.arange(flat_idx.shape[0]), k)
    gates = T.pick(flat, rows, flat_idx.reshape(-1)).reshape(idx.shape)
    return ExpertSelection(idx, gates)


def routed_sum(x: Tensor, sel: ExpertSelection, expert_fn) -> Tensor:
    """Sum of gate-weighted expert outputs over the selected experts of each row.

    ``expert_fn(rows, groups)`` maps the (P, d_in) gathered inputs and their
    expert ids to (P, d_out) outputs; only referenced experts are evaluated.
    """
    lead = x.shape[:-1]
    xf = x.reshape(-1, x.shape[-1])
    n = xf.shape[0]
    k = sel.k
    groups = sel.indices.reshape(-1)
    token_of = np.repeat(np.arange(n), k)
    out = expert_fn(T.take_rows(xf, token_of), groups)
    out = out * sel.scores.reshape(-1, 1)
    y = T.scatter_add_rows(out, token_of, n)
    return y.reshape(lead + (y.shape[-1],))


def ffn_forward(x: Tensor, bank: FfnExpertBank, k: int, selector_input: Tensor | None = None,
                return_selection: bool = False):
    """MoE feedforward output for rows of ``x``.

    ``selector_input`` feeds the expert scores when it differs from the
    expert input (the peri-norm scheme normalizes only the selector input).
    """
    if x.shape[-1] != bank.d_model:
        raise T.ShapeError(f"ffn_forward: input {x.shape} vs d_model {bank.d_model}")
    if not 1 <= k <= bank.n_experts:
        raise ValueError(f"K={k} must be in [1, {bank.n_experts}]")
    logits = T.matmul(selector_input if selector_input is not None else x, bank.w_s)
    sel = select_experts(T.sigmoid(logits), k)

    def experts(rows, groups):
        h = T.relu(T.grouped_matmul(rows, bank.w1, groups))
        return T.grouped_matmul(h, bank.w2, groups)

    y = routed_sum(x, sel, experts)
    T.check_finite(y, "moe feedforward output")
    if return_selection:
        return y, sel, logits
    return y


def balancing_loss(x: Tensor, w_s: Tensor | None = None) -> Tensor:
    """Negative entropy of the sequence-mean softmax routing distribution.

    With ``w_s`` the routing logits are ``x @ w_s``; otherwise ``x`` already
    holds them.  Shapes are (T, N_E) for one sequence or (B, T, N_E) for a
    batch, whose per-sequence values are averaged.  The result lies in
    [-log N_E, 0].
    """
    logits = T.matmul(x, w_s) if w_s is not None else x
    if logits.ndim == 2:
        logits = logits.reshape((1,) + logits.shape)
    p = T.softmax_lastdim(logits).mean(axis=1)
    return T.xlogx(p).sum(axis=-1).mean()


def routing_distribution(logits) -> np.ndarray:
    """Sequence-mean softmax routing distribution (numpy, no graph)."""
    ld = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    e = np.exp(ld - ld.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).mean(axis=-2)
