"""
Sparse expert layers
====================

A walk through the two routed layers: the sigmoid-gated expert feedforward
and the head-wise expert attention.  Each is compared against a dense
evaluation that runs every expert and masks the unselected ones.
"""

# %%
import numpy as np

from moeut.attention import AttentionHeadBank, attention_entropy_reg, switchhead
from moeut.moe_ffn import FfnExpertBank, balancing_loss, ffn_forward, select_experts, expert_scores
from moeut.tensor import Tensor

rng = np.random.default_rng(0)
d_model, d_expert, n_experts, k = 32, 8, 16, 4
bank = FfnExpertBank.init(rng, d_model, d_expert, n_experts, np.float64)
x = rng.standard_normal((10, d_model))

# %% [markdown]
# Every token scores all experts with a sigmoid and keeps the top k.

# %%
sel = select_experts(expert_scores(Tensor(x), bank.w_s), k)
print("experts for token 0:", sel.indices[0], "gates:", np.round(sel.scores.data[0], 4))

# %% [markdown]
# The sparse output equals the gate-weighted sum over the chosen experts.

# %%
y = ffn_forward(Tensor(x), bank, k).data
w1, w2, ws = bank.w1.data, bank.w2.data, bank.w_s.data
gates = 1 / (1 + np.exp(-(x @ ws)))
keep = np.zeros_like(gates, dtype=bool)
np.put_along_axis(keep, np.argsort(-gates, axis=1)[:, :k], True, axis=1)
dense = np.einsum("te,ted->td", gates * keep,
                  np.einsum("tef,efd->ted", np.maximum(np.einsum("td,edf->tef", x, w1), 0), w2))
print("max abs difference vs dense:", np.abs(y - dense).max())

# %% [markdown]
# The balancing loss is the negative entropy of the sequence-mean routing
# softmax.  Uniform routing reaches the lower bound -log N.

# %%
print("uniform:", balancing_loss(Tensor(np.zeros((10, n_experts)))).item(), -np.log(n_experts))
print("random :", balancing_loss(Tensor(x), bank.w_s).item())

# %% [markdown]
# Expert attention: each head picks k of its value and output projections.

# %%
heads = AttentionHeadBank.init(rng, d_model, 2, 16, 5, np.float64)
xt = Tensor(x)
res = switchhead(xt, heads, 2, q_in=xt, k_in=xt, sv_in=xt, so_in=xt)
print("attention output", res.y.shape)
for h, r in enumerate(res.heads):
    print(f"head {h}: value experts {r.value.indices[0]}, output experts {r.output.indices[0]}")
print("selector regularizer:", attention_entropy_reg(res.selector_logits).item())
