# %% [markdown]
# # Classic solvers and the PGD convergence regimes
#
# ISTA and projected gradient descent on small Gaussian problems, then the
# three checks behind the learned-network story: perfect radius, too-small
# radius, and the oracle that switches radius per signal.

# %%
import numpy as np

from adunfold.analysis import random_instance, theorem1_trials, theorem2_harness, theorem3_experiment
from adunfold.solvers import Constraint, ista_solve, pgd_solve, sparsity_measure, theoretical_step_size

# %% [markdown]
# ## ISTA
# With beta = 1/||A||^2 the lasso objective never goes up.  The lasso bias
# leaves an error that scales with lambda.

# %%
inst = random_instance(100, 200, 5, seed=0)
beta = 1 / np.linalg.norm(inst.A, 2) ** 2
trace = ista_solve(inst, lam=0.1, beta=beta, max_iters=3000)
obj = np.array(trace.objective_values)
print(f"iterations {len(obj) - 1}, objective {obj[0]:.4f} -> {obj[-1]:.6f}")
print("largest objective increase:", np.max(np.diff(obj)))
print(f"final error {trace.errors_vs_truth[-1]:.3e}")

# %% [markdown]
# ## PGD with the right and the wrong radius

# %%
step = 0.5 * theoretical_step_size(100)
f = sparsity_measure(inst.x, "l1_ball")
for scale in (1.0, 0.5):
    errs = pgd_solve(inst, Constraint("l1_ball", scale * f), step, 200).errors_vs_truth
    print(f"R = {scale:.1f} f(x): error after 50/100/200 iterations "
          f"{errs[50]:.2e} {errs[100]:.2e} {errs[200]:.2e}")

# %%
r = theorem1_trials(seeds=range(20))
print(f"perfect radius below 1e-6 on {r.reached.sum()}/20 seeds, "
      f"median iterations {np.median(r.iterations_to_target):.0f}")
print(f"smallest mismatch/perfect ratio {np.min(r.mismatch_final / r.perfect_final):.3g}")

# %% [markdown]
# ## Learned PGD bound
# B = A^T / n on an unnormalized Gaussian A; rho and xi are sampled from the
# descent cone, so they are lower bounds of the true suprema.

# %%
rows, reports = theorem2_harness(seeds=range(3), n_pairs=20_000)
for row in rows:
    print(f"seed {row.seed}: rho_hat {row.rho_hat:.3f}, pairs {row.pairs}, "
          f"violations {row.violations}, status {row.status}")

# %% [markdown]
# ## Oracle adaptive depth
# One run, three signals sorted by f(x_i); each leaves after its own phase.

# %%
rep = theorem3_experiment()
for s, fo, o, fx in zip(rep.sparsities, rep.f_values, rep.oracle_errors, rep.fixed_errors):
    print(f"s={s:2d} f={fo:.3f}  oracle {o:.2e}  fixed R={rep.fixed_radius:.3f}  {fx:.2e}")
print(f"totals: oracle {rep.oracle_total:.2e}, fixed {rep.fixed_total:.2e}")
