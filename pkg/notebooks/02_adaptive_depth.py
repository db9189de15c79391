# %% [markdown]
# # Adaptive-depth LISTA at desk scale
#
# Train a fixed-depth LISTA, extend it with a halting branch, and compare the
# two at the same average number of executed layers.  The desk preset trains
# on 5,000 batches of 256 and takes a few minutes.  Much shorter budgets leave
# the halting branch undertrained: scores stay flat and nothing exits early.

# %%
import numpy as np
from adunfold import experiment as ex

cfg = ex.preset("synthetic", "desk")
print("\n".join(ex.plan(cfg)))

# %%
fixed, adaptive, hp, fixed_hist, adaptive_hist = ex.train_pair(cfg, log=print)
print(f"fixed loss {fixed_hist.losses[0]:.3f} -> {fixed_hist.losses[-1]:.3f}")
print(f"adaptive loss {adaptive_hist.losses[0]:.3f} -> {adaptive_hist.losses[-1]:.3f}")

# %% [markdown]
# ## Matched average depth
# Epsilons are calibrated on a validation batch, then evaluated on the test batch.

# %%
test, val = ex.held_out(cfg, "test"), ex.held_out(cfg, "val")
cmp = ex.compare_fixed_vs_adaptive(cfg, fixed, adaptive, hp, test, val)
print(" eps       layers  adaptive  fixed")
for r in cmp.matched_rows:
    ref = "   n/a" if r.nmse_fixed is None else f"{r.nmse_fixed:6.2f}"
    print(f" {r.epsilon:.2e}  {r.avg_layers_adaptive:5.2f}  {r.nmse_adaptive:7.2f}  {ref}")
print(f"adaptive at least as good on {cmp.win_fraction:.0%} of comparable points")

# %% [markdown]
# ## What the halting branch learned
# Scores shrink with depth, and sparser signals leave earlier.

# %%
beh = ex.behavior_report(cfg, adaptive, hp, test)
print("mean score per layer:", np.round(beh.mean_scores, 3))
for s, layers in beh.cohort_exit.items():
    print(f"s={s}: average exit layer {layers:.2f} at eps={cfg.eval.cohort_epsilon}")
print("tiny epsilon reproduces the full network:", beh.epsilon_zero_exact)

# %%
for q, ref, value, note in ex.anchor_table(cfg, fixed, adaptive, hp, cmp, test):
    print(f"{q:28s} reference {ref:26s} desk {value if isinstance(value, str) else round(value, 2)}  ({note})")
