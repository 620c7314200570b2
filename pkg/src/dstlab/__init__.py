"""Dynamic sparse training on small dense-numpy networks.

Modules: ``autograd`` (layers and exact gradients), ``topology`` (masks,
ER/ERK allocation, snapshots), ``criteria`` (prune scores and selection),
``schedule``, ``trainer`` (masked SGD and the update loop), ``data``,
``analysis`` (Jaccard, ITOP, ranks) and ``cli``.
"""

from .config import ExperimentConfig, load_config, parse_config
from .trainer import Trainer, run_experiment

__all__ = ["ExperimentConfig", "Trainer", "load_config", "parse_config", "run_experiment"]
__version__ = "0.1.0"
