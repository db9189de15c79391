# %% [markdown]
# # One network or two?
#
# Half the signals have s=2 and half s=4.  One LISTA of depth L sees both;
# alternatively a depth L-2 network handles s=2 and a depth L+2 network s=4,
# so the average depth is L either way.

# %%
import csv
from pathlib import Path
import tempfile

from adunfold import experiment as ex

out = Path(tempfile.mkdtemp())
cfg = ex.preset("mixed_sparsity_fig1", "desk", out_dir=str(out))
ex.run_fig1(cfg, log=print)

# %%
with open(out / "fig1.csv") as fh:
    rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
for r in rows:
    print(f"L={r['avg_layers']:>4}  {r['arm']:6s}  {float(r['nmse_db']):7.2f} dB  std {float(r['error_std']):.4f}")

# %% [markdown]
# At desk scale (1,500 training batches per network) the single shared network
# matched or slightly beat the specialized pair at L = 3, 4, 5 on the shipped
# seed, the opposite of the reported full-scale result.  The depth L-2 network
# for the easy signals is only one to three layers deep here, and none of the
# networks is trained to convergence.
