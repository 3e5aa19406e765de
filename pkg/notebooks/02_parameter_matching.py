"""
Parameter and compute matching
==============================

Closed-form parameter and multiply-accumulate counts, and deriving a
shared-layer expert model that matches a dense baseline.
"""

# %%
from moeut.accounting import (DenseSpec, attention_share, build_config_from_dense, count_params,
                              mac_breakdown, param_breakdown)
from moeut.config import TABLE3

for name, (reported, cfg) in TABLE3.items():
    got = count_params(cfg)
    print(f"{name:18s} reported {reported / 1e6:8.1f}M  counted {got / 1e6:8.2f}M  "
          f"rel err {abs(got - reported) / reported:.4f}")

# %% [markdown]
# Per-component breakdown of the 244M shared-layer model.

# %%
cfg = TABLE3["moeut_243M"][1]
for part, n in param_breakdown(cfg).items():
    print(f"{part:12s} {n:>12,d}")
print("attention share of non-embedding params:", round(attention_share(cfg), 3))

# %% [markdown]
# Quartering the heads, doubling their width and picking two attention
# experts keeps the value/output cost of the dense model.  The feedforward
# cost drops to 2 d_model / d_ff of the dense one.

# %%
dense = TABLE3["dense_244M"][1]
md, mm = mac_breakdown(dense, 1024), mac_breakdown(cfg, 1024)
for part in md:
    print(f"{part:18s} dense {md[part]:>14,d}  moe {mm[part]:>14,d}")

# %% [markdown]
# Deriving a configuration from a dense description.  Known baselines come
# from the size table; others are solved for the expert count.

# %%
print(build_config_from_dense(DenseSpec(1024, 18, 16, 64), 243e6))
solved = build_config_from_dense(DenseSpec(512, 8, 8, 64), 60e6)
print(solved, count_params(solved))
