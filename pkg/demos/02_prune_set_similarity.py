"""
Do pruning criteria agree?
==========================

Runs the small MLP densely up to its first topology update, then asks each
criterion which half of the weights it would drop from that shared state.
The Jaccard index of two prune sets, averaged over layers and seeds,
says how similar the criteria really are. A random baseline J_r is printed
for scale.
"""

from dstlab.analysis import first_update_similarity, random_baseline_jr
from dstlab.config import ExperimentConfig
from dstlab.schedule import prune_fraction_at
from dstlab.trainer import Trainer, prepare_data

cfg = ExperimentConfig(density=1.0, epochs=20, lr=0.05, update_period=220)
criteria = ["magnitude", "set", "mest", "mest:0", "sensitivity", "rsensitivity", "snip"]
seeds = [0, 1, 2]

splits = prepare_data(cfg)
m = first_update_similarity(cfg, criteria, seeds, splits)

# %% the matrix
width = max(map(len, criteria)) + 2
print(" " * width + "".join(c.rjust(width) for c in criteria))
for i, c in enumerate(criteria):
    print(c.ljust(width) + "".join(f"{v:{width}.3f}" for v in m.values[i]))

# %% what random selection would give
tr = Trainer(cfg, splits)
rho = prune_fraction_at(tr.prune_schedule, cfg.update_period)
shapes = {n: tr.net.params[n].shape for n in tr.net.maskable}
print(f"\nprune fraction at the first update: {rho:.4f}")
print(f"random baseline J_r: {random_baseline_jr(tr.plan, seeds, shapes, prune_fraction=rho):.3f}")

# mest:0 is magnitude exactly, so that entry must be 1
assert m.values[criteria.index("magnitude"), criteria.index("mest:0")] == 1.0
