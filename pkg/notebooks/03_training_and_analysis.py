"""
Training and routing analysis
=============================

Train a small shared-layer model on a synthetic byte corpus, then inspect
which experts it routes to across depth.
"""

# %%
import numpy as np

from moeut.analysis import (column_selection_iou, expert_layer_histogram, expert_order,
                            residual_update_norms, token_expert_diversity, trace_corpus)
from moeut.config import ModelConfig
from moeut.training import (TrainConfig, TrainState, Vocabulary, evaluate_perplexity,
                            regular_grammar_corpus, train, unigram_entropy)

vocab = Vocabulary.bytes()
data = vocab.encode(regular_grammar_corpus(200_000, seed=0))
train_data, held_out = data[:180_000], data[180_000:]

cfg = ModelConfig(d_model=64, n_layers=4, group_size=2, n_heads=2, d_head=16, n_att_experts=4,
                  att_k=2, d_expert=16, n_experts=16, expert_k=4, vocab_size=len(vocab),
                  context_length=64)
tcfg = TrainConfig(batch_size=8, context_length=64, steps=150, lr_peak=2e-3, warmup_steps=10)
state = TrainState.create(cfg, tcfg)

# %%
history = train(state, train_data, log_every=0)
for i in range(0, len(history), 30):
    print("step", history[i]["step"], "loss", round(history[i]["loss"], 3))
print("held-out perplexity:", evaluate_perplexity(state.model, held_out))
print("unigram bound:", np.exp(unigram_entropy(train_data)))

# %% [markdown]
# Record the feedforward selections of every group member.

# %%
trace = trace_corpus(state.model, held_out, members=(0, 1), max_tokens=4096)
hist = expert_layer_histogram(trace, cfg.n_experts)
print("experts ordered by mean layer:", expert_order(hist))
iou, steps = column_selection_iou(trace, cfg.n_experts)
print("layer steps", steps)
print(np.round(iou, 3))

# %%
div = token_expert_diversity(trace, 0, token_cap=10)
print("unique experts per frequent token at layer 0:", div)
print("mean residual update per layer:", residual_update_norms(state.model, held_out[:64]))
