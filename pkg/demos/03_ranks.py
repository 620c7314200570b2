"""
Ranking methods across settings
===============================

Average ranks with the Nemenyi critical distance. Methods whose average
ranks differ by less than the CD are not distinguishable at alpha = 0.05.
The scores come from a small sweep run in-process: three criteria on four
settings (two densities by two update periods), one seed each. About two
minutes on a laptop CPU.
"""

from dstlab.analysis import average_ranks
from dstlab.config import ExperimentConfig
from dstlab.trainer import Trainer, prepare_data

base = ExperimentConfig(epochs=20, lr=0.05, update_period=220)
splits = prepare_data(base)

results = {}
for density in (0.05, 0.2):
    for update_period in (220, 440):
        setting = f"D={density},dt={update_period}"
        results[setting] = {}
        for crit in ("magnitude", "snip", "sensitivity"):
            cfg = base.with_updates(density=density, update_period=update_period, criterion=crit)
            results[setting][crit] = Trainer(cfg, splits).run().record.test_acc
        print(setting, {k: round(v, 4) for k, v in results[setting].items()})

# %%
table = average_ranks(results)
print()
print(table.to_csv())
print(f"critical distance: {table.cd:.3f}")
print("groups not separated by the CD:", table.groups)
