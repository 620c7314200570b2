"""Masked SGD and the prune-and-regrow training loop."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Network, build_preset, default_loss_kind, loss_and_grad, loss_from_logits
from .config import ExperimentConfig
from .criteria import (
    GrowthCriterion,
    PruneCriterion,
    prune_count,
    select_grow_gradient,
    select_grow_random,
    select_prune_global,
    select_prune_local,
)
from .data import Dataset, SplitSpec, Splits, load_named, make_splits, standardize
from .schedule import LrSchedule, PruneSchedule, UpdateCadence, is_update_step, lr_at, prune_fraction_at
from .topology import ExplorationLedger, Mask, MaskSnapshot, allocate, global_density, sample_mask

# independent RNG streams derived from (seed, stream id)
STREAM_INIT, STREAM_DATA, STREAM_GROWTH, STREAM_DST_BATCH = 0, 1, 2, 3

RECORD_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "lr", "itop", "density")


class DivergenceError(FloatingPointError):
    pass


def stream(seed: int, stream_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream_id)])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    nesterov: bool = True
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_network(cls, net: Network, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        state.buffers = {k: np.zeros_like(v) for k, v in net.params.items()}
        return state


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], mask: Mask | None,
             opt: OptimizerState, lr: float) -> None:
    """In-place SGD with momentum, Nesterov and L2 decay on active weights only."""
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name}")
        d = g + opt.weight_decay * p if opt.weight_decay else g.copy()
        bits = mask.layers.get(name) if mask is not None else None
        if bits is not None:
            d *= bits
        if opt.momentum:
            buf = opt.buffers[name]
            buf *= opt.momentum
            buf += d
            if opt.nesterov:
                d += opt.momentum * buf
            else:
                d = buf.copy()
        d *= lr
        p -= d


# ---------------------------------------------------------------------------
# topology update
# ---------------------------------------------------------------------------


@dataclass
class UpdateStats:
    step: int
    rho: float
    pruned: dict[str, np.ndarray]
    grown: dict[str, np.ndarray]

    @property
    def n_pruned(self) -> int:
        return int(sum(v.size for v in self.pruned.values()))


def dst_update(net: Network, mask: Mask, opt: OptimizerState, grads: dict[str, np.ndarray],
               criterion: PruneCriterion, growth: GrowthCriterion, rho_t: float, scope: str,
               rng: np.random.Generator, step: int = 0) -> tuple[Mask, UpdateStats]:
    """Prune by ``criterion``, regrow as many by ``growth``; returns the new mask.

    Grow candidates are positions inactive before the update, so a weight
    pruned here is never regrown in the same call. The prune count is capped
    by the number of such candidates (a fully dense layer is left alone).
    Pruned and regrown weights, and their momentum, are set to zero.
    """
    new = mask.copy()
    pruned: dict[str, np.ndarray] = {}
    grown: dict[str, np.ndarray] = {}
    if scope == "local":
        for name in mask.names():
            bits = mask[name]
            active, n = int(bits.sum()), bits.size
            k = min(prune_count(rho_t, active), n - active)
            pruned[name] = select_prune_local(criterion, net.params[name], grads[name], bits, k, rng=rng)
            candidates = mask.inactive_indices(name)
            if growth.name == "random":
                grown[name] = select_grow_random(candidates, k, rng)
            else:
                grown[name] = select_grow_gradient(grads[name], candidates, k)
    elif scope == "global":
        names = mask.names()
        total_active, total = mask.active_count(), mask.size()
        k = min(prune_count(rho_t, total_active), total - total_active, total_active - len(names))
        pruned = select_prune_global(criterion, {n: net.params[n] for n in names}, grads, mask, max(k, 0), rng=rng)
        k = sum(v.size for v in pruned.values())
        offsets = np.cumsum([0] + [mask.size(n) for n in names])
        candidates = np.concatenate([mask.inactive_indices(n) + offsets[i] for i, n in enumerate(names)])
        if growth.name == "random":
            picked = select_grow_random(candidates, k, rng)
        else:
            flat_g = np.concatenate([grads[n].reshape(-1) for n in names])
            picked = select_grow_gradient(flat_g, candidates, k)
        for i, n in enumerate(names):
            grown[n] = picked[(picked >= offsets[i]) & (picked < offsets[i + 1])] - offsets[i]
    else:
        raise ValueError(f"unknown pruning scope {scope!r}")

    for name in mask.names():
        flat_bits = new.layers[name].reshape(-1)
        flat_bits[pruned[name]] = False
        flat_bits[grown[name]] = True
        touched = np.concatenate([pruned[name], grown[name]])
        net.params[name].reshape(-1)[touched] = 0.0
        if name in opt.buffers:
            opt.buffers[name].reshape(-1)[touched] = 0.0
    return new, UpdateStats(step, rho_t, pruned, grown)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(logits: np.ndarray) -> np.ndarray:
    """Class predictions; ties resolve to the lowest class index (class 0 for a zero logit)."""
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)


def evaluate(net: Network, ds: Dataset, loss_kind: str | None = None, batch_size: int = 1024) -> tuple[float, float]:
    """Mean loss and top-1 accuracy over ``ds``; parameters are left untouched."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty split")
    loss_kind = loss_kind or default_loss_kind(net)
    total_loss, correct = 0.0, 0
    for start in range(0, len(ds), batch_size):
        x = ds.features[start:start + batch_size]
        y = ds.labels[start:start + batch_size]
        logits = net.forward(x)
        loss, _ = loss_from_logits(logits, y, loss_kind)
        total_loss += loss * len(y)
        correct += int((predict(logits) == y).sum())
    net._caches = None
    return total_loss / len(ds), correct / len(ds)


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    test_loss: float = float("nan")
    test_acc: float = float("nan")
    itop: list[tuple[int, float]] = field(default_factory=list)  # (step, ratio) at init and each update
    wall_clock: float = 0.0
    status: str = "ok"
    config: ExperimentConfig | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for row in self.rows:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in RECORD_COLUMNS[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "status": self.status,
            "test_loss": self.test_loss,
            "test_acc": self.test_acc,
            "final_itop": self.itop[-1][1] if self.itop else None,
            "epochs_recorded": len(self.rows),
            "config": self.config.to_text().splitlines() if self.config else None,
        }


@dataclass
class RunResult:
    record: RunRecord
    snapshots: list[MaskSnapshot]
    updates: list[UpdateStats]


def prepare_data(config: ExperimentConfig) -> Splits:
    data, fixed_test = load_named(
        config.dataset, seed=config.data_seed, samples=config.data_samples,
        features=config.data_features, cells=config.data_cells, label_column=config.label_column,
    )
    if fixed_test is None:
        spec = SplitSpec(*config.split, seed=config.data_seed)
        splits = make_splits(data, spec)
    else:
        # valid carved from train; the published test split is kept as is
        frac = config.split[1] / (config.split[0] + config.split[1])
        perm = np.random.default_rng([config.data_seed, 0x5B17]).permutation(len(data))
        n_valid = max(1, int(round(frac * len(data))))
        va, tr = np.sort(perm[:n_valid]), np.sort(perm[n_valid:])
        splits = Splits(*standardize(data.subset(tr), data.subset(va), fixed_test))
    if config.max_train_samples is not None and config.max_train_samples < len(splits.train):
        splits.train = splits.train.subset(np.arange(config.max_train_samples))
    return splits


class Trainer:
    """One experiment: network, mask, optimizer and the update loop state."""

    def __init__(self, config: ExperimentConfig, splits: Splits | None = None):
        self.config = config
        self.splits = splits if splits is not None else prepare_data(config)
        self.init_rng = stream(config.seed, STREAM_INIT)
        self.data_rng = stream(config.seed, STREAM_DATA)
        self.growth_rng = stream(config.seed, STREAM_GROWTH)
        self.dst_batch_rng = stream(config.seed, STREAM_DST_BATCH)

        self.net = build_preset(config.architecture, self.init_rng)
        self.loss_kind = default_loss_kind(self.net)
        self.plan = allocate(self.net, config.density, config.init)
        self.mask = sample_mask(self.plan, {k: self.net.params[k].shape for k in self.net.maskable}, self.init_rng)
        self.mask.apply(self.net)
        self.opt = OptimizerState.for_network(
            self.net, momentum=config.momentum, weight_decay=config.weight_decay, nesterov=config.nesterov
        )
        self.ledger = ExplorationLedger(self.mask)
        self.criterion = PruneCriterion(config.criterion, mest_lambda=config.mest_lambda)
        self.growth = GrowthCriterion(config.growth)

        self.steps_per_epoch = -(-len(self.splits.train) // config.batch_size)
        self.total_steps = self.steps_per_epoch * config.epochs
        stop = max(1, int(round(config.update_stop_fraction * self.total_steps)))
        self.cadence = UpdateCadence(config.update_period, stop)
        self.prune_schedule = PruneSchedule(
            config.prune_schedule, config.prune_fraction, stop, config.linear_factor, config.linear_every
        )
        self.lr_schedule = LrSchedule(config.lr, config.milestones, config.lr_decay)
        self.t = 0
        self.snapshots: list[MaskSnapshot] = []
        self.updates: list[UpdateStats] = []
        self.itop: list[tuple[int, float]] = [(0, self.ledger.ratio())]
        self._snapshot("init")

    # -- pieces --------------------------------------------------------------------
    def _snapshot(self, kind: str) -> MaskSnapshot:
        snap = MaskSnapshot(
            self.mask.copy(), self.t, self.criterion.label, self.growth.name,
            self.config.seed, self.config.density, meta={"kind": kind},
        )
        self.snapshots.append(snap)
        return snap

    def _sgd_and_grads(self, x: np.ndarray, y: np.ndarray, lr: float, update: bool):
        """SGD step on ``(x, y)``; on update steps also returns the dense
        gradients for the topology update, taken at the pre-step parameters.

        Those are the step's own gradients unless ``dst_update_batch_size``
        asks for a separately drawn larger batch.
        """
        dense = None
        size = self.config.dst_update_batch_size
        if update and size is not None:
            train = self.splits.train
            idx = self.dst_batch_rng.choice(len(train), size=min(size, len(train)), replace=False)
            _, dense = loss_and_grad(self.net, train.features[idx], train.labels[idx], self.loss_kind)
        loss, grads = loss_and_grad(self.net, x, y, self.loss_kind)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {self.t}")
        sgd_step(self.net.params, grads, self.mask, self.opt, lr)
        if update and dense is None:
            dense = grads
        return loss, dense

    def train_step(self, x: np.ndarray, y: np.ndarray, lr: float) -> float:
        """One optimizer step; on update steps the topology update follows it."""
        self.t += 1
        update = is_update_step(self.cadence, self.t)
        loss, dense = self._sgd_and_grads(x, y, lr, update)
        if update:
            self.topology_update(dense)
        return loss

    def topology_update(self, dense_grads) -> UpdateStats:
        rho_t = prune_fraction_at(self.prune_schedule, self.t)
        self.mask, stats = dst_update(
            self.net, self.mask, self.opt, dense_grads, self.criterion, self.growth, rho_t,
            self.config.pruning_scope, self.growth_rng, step=self.t,
        )
        self.ledger.update(self.mask)
        self.updates.append(stats)
        self.itop.append((self.t, self.ledger.ratio()))
        self._snapshot("update")
        return stats

    def first_update_state(self):
        """Train through the SGD part of the first update step, then stop.

        Returns ``(net copy, mask copy, dense grads, rho_t)`` so several
        criteria can be compared on one shared network state.
        """
        period = self.config.update_period
        if period is None or period > self.cadence.stop:
            raise ValueError("this run never performs a topology update")
        for epoch in range(self.config.epochs):
            lr = lr_at(self.lr_schedule, epoch, self.config.epochs)
            for x, y in self._batches():
                self.t += 1
                _, dense = self._sgd_and_grads(x, y, lr, self.t == period)
                if dense is not None:
                    return self.net.copy(), self.mask.copy(), dense, prune_fraction_at(self.prune_schedule, self.t)
        raise AssertionError("unreachable")

    def _batches(self):
        train = self.splits.train
        order = self.data_rng.permutation(len(train))
        bs = self.config.batch_size
        for start in range(0, len(train), bs):
            idx = order[start:start + bs]
            yield train.features[idx], train.labels[idx]

    # -- full run --------------------------------------------------------------------
    def run(self, on_epoch=None) -> RunResult:
        cfg = self.config
        record = RunRecord(config=cfg)
        started = time.perf_counter()
        try:
            for epoch in range(cfg.epochs):
                lr = lr_at(self.lr_schedule, epoch, cfg.epochs)
                losses = [self.train_step(x, y, lr) for x, y in self._batches()]
                val_loss, val_acc = evaluate(self.net, self.splits.valid, self.loss_kind)
                record.rows.append({
                    "epoch": epoch + 1,
                    "train_loss": float(np.mean(losses)),
                    "val_loss": val_loss,
                    "val_acc": val_acc,
                    "lr": lr,
                    "itop": self.ledger.ratio(),
                    "density": global_density(self.mask),
                })
                if on_epoch is not None:
                    on_epoch(self, record.rows[-1])
            record.test_loss, record.test_acc = evaluate(self.net, self.splits.test, self.loss_kind)
        except DivergenceError as exc:
            record.status = f"diverged: {exc}"
        self._snapshot("final")
        record.itop = list(self.itop)
        record.wall_clock = time.perf_counter() - started
        return RunResult(record, self.snapshots, self.updates)


def run_experiment(config: ExperimentConfig, out_dir=None, splits: Splits | None = None) -> RunResult:
    result = Trainer(config, splits).run()
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_run(result: RunResult, out_dir) -> Path:
    """Run directory layout: ``record.csv``, ``summary.json``, ``config.txt``,
    ``timing.json`` (the only non-deterministic file) and ``snapshots/``."""
    out = Path(out_dir)
    snaps = out / "snapshots"
    snaps.mkdir(parents=True, exist_ok=True)
    rec = result.record
    (out / "record.csv").write_text(rec.to_csv(), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(rec.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if rec.config is not None:
        (out / "config.txt").write_text(rec.config.to_text(), encoding="utf-8")
    (out / "timing.json").write_text(json.dumps({"wall_clock_s": rec.wall_clock}) + "\n", encoding="utf-8")
    for snap in result.snapshots:
        snap.save(snaps / f"{snap.step:08d}_{snap.meta.get('kind', 'update')}.dstm")
    with (out / "itop.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "itop"))
        for step, ratio in rec.itop:
            writer.writerow((step, repr(float(ratio))))
    return out
