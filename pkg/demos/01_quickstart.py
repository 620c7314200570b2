"""
Quickstart: dynamic versus static sparse training
=================================================

Trains the small MLP on the synthetic tabular task at 5% density, once with
a fixed random mask and once with magnitude pruning plus random regrowth.
Takes about twenty seconds on a laptop CPU.
"""

import numpy as np

from dstlab.config import ExperimentConfig
from dstlab.topology import global_density
from dstlab.trainer import Trainer, prepare_data

# %% one config, two update periods
base = ExperimentConfig(density=0.05, epochs=20, lr=0.05, update_period=220, seed=0)
splits = prepare_data(base)
print(f"train/valid/test sizes: {len(splits.train)}/{len(splits.valid)}/{len(splits.test)}")

static = Trainer(base.with_updates(update_period=None), splits)
dynamic = Trainer(base, splits)

# the plan is the per-layer ER density; the head is small enough to stay dense
for name, d, c in zip(dynamic.plan.names, dynamic.plan.densities, dynamic.plan.counts):
    print(f"  {name:10s} density {d:.4f}  active {c}")
print(f"global density {global_density(dynamic.mask):.4f}")

# %% train both
results = {}
for label, tr in (("static", static), ("dynamic", dynamic)):
    res = tr.run()
    results[label] = res
    print(f"{label:8s} test acc {res.record.test_acc:.4f}  updates {len(res.updates)}")

# %% how far did the topology travel?
itop = results["dynamic"].record.itop
print("ITOP ratio at each update:", " ".join(f"{r:.3f}" for _, r in itop))
first, last = results["dynamic"].snapshots[0].mask, results["dynamic"].snapshots[-1].mask
kept = np.mean([
    np.intersect1d(first.active_indices(n), last.active_indices(n)).size / first.active_count(n)
    for n in first.names()
])
print(f"share of the initial connections still active at the end: {kept:.3f}")
