"""Structural comparisons of masks and rank statistics over result grids.

Everything here is a pure function of masks, snapshot files or result
tables, except :func:`first_update_similarity`, which replays training up to
the first topology update to obtain a shared network state.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .config import ExperimentConfig
from .criteria import PruneCriterion, prune_count, select_prune_global, select_prune_local
from .data import Splits
from .topology import Mask, MaskSnapshot, SparsityPlan, sample_mask


class AnalysisError(ValueError):
    pass


class HarnessError(RuntimeError):
    """Runs that should share a network state did not."""


def _index_set(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == bool:
        return np.flatnonzero(arr.reshape(-1))
    return np.unique(arr.astype(np.int64).reshape(-1))


def jaccard(a, b) -> float:
    """|A & B| / |A | B| for index sets or boolean arrays; 1 for two empty sets."""
    a, b = _index_set(a), _index_set(b)
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return 1.0 if union == 0 else inter / union


def _layers(m) -> dict:
    return m.layers if isinstance(m, Mask) else dict(m)


def layer_jaccards(masks_a, masks_b) -> dict[str, float]:
    la, lb = _layers(masks_a), _layers(masks_b)
    if list(la) != list(lb):
        raise AnalysisError(f"layer mismatch: {list(la)} vs {list(lb)}")
    return {name: jaccard(la[name], lb[name]) for name in la}


def mean_jaccard(masks_a, masks_b) -> float:
    """Unweighted mean of per-layer Jaccard indices."""
    per = layer_jaccards(masks_a, masks_b)
    if not per:
        raise AnalysisError("no layers to compare")
    return float(np.mean(list(per.values())))


# ---------------------------------------------------------------------------
# similarity matrices
# ---------------------------------------------------------------------------


@dataclass
class SimilarityMatrix:
    labels: list[str]
    values: np.ndarray  # (k, k)
    layer_names: list[str]
    per_layer: np.ndarray  # (k, k, L)
    n_seeds: int
    baseline: float | None = None

    def get(self, a: str, b: str) -> float:
        return float(self.values[self.labels.index(a), self.labels.index(b)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["criterion", *self.labels])
        for label, row in zip(self.labels, self.values):
            w.writerow([label, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def per_layer_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a", "b", "layer", "jaccard"])
        for i, j in itertools.product(range(len(self.labels)), repeat=2):
            for li, name in enumerate(self.layer_names):
                w.writerow([self.labels[i], self.labels[j], name, repr(float(self.per_layer[i, j, li]))])
        return buf.getvalue()


def _matrix(labels, sets_per_seed) -> SimilarityMatrix:
    """``sets_per_seed[s][label]`` maps layer name -> index set.

    Per-layer values are seed means; the matrix entry is their layer mean
    (the same number as averaging per-seed layer means, since both are linear).
    """
    k, n_seeds = len(labels), len(sets_per_seed)
    names = list(sets_per_seed[0][labels[0]])
    per = np.zeros((k, k, len(names)))
    for sets in sets_per_seed:
        for i, j in itertools.product(range(k), repeat=2):
            if j < i:
                continue
            js = layer_jaccards(sets[labels[i]], sets[labels[j]])
            per[i, j] += [js[n] for n in names]
    per /= n_seeds
    iu = np.triu_indices(k, 1)
    per[iu[1], iu[0]] = per[iu]
    values = per.mean(axis=2)
    np.fill_diagonal(values, 1.0)
    return SimilarityMatrix(list(labels), values, names, per, n_seeds)


def random_baseline_jr(plan: SparsityPlan, seeds, shapes: dict | None = None,
                       prune_fraction: float | None = None) -> float:
    """Mean pairwise layer-averaged Jaccard of independently drawn random sets.

    Without ``prune_fraction`` the sets are masks sampled from ``plan``;
    with it, each seed also draws a uniformly random prune set of
    ``floor(prune_fraction * active)`` weights per layer from its mask, which
    is what a random pruning criterion would select.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise AnalysisError("random baseline needs at least two seeds")
    if len(set(seeds)) != len(seeds):
        raise AnalysisError("random baseline seeds must be distinct")
    shapes = shapes or {n: (s,) for n, s in zip(plan.names, plan.sizes)}
    draws = []
    for seed in seeds:
        rng = np.random.default_rng([int(seed), 0x7A11])
        mask = sample_mask(plan, shapes, rng)
        if prune_fraction is None:
            draws.append({n: mask.active_indices(n) for n in mask.names()})
        else:
            draws.append({
                n: np.sort(rng.choice(act, size=prune_count(prune_fraction, act.size), replace=False))
                for n in mask.names() for act in [mask.active_indices(n)]
            })
    pairs = [mean_jaccard(a, b) for a, b in itertools.combinations(draws, 2)]
    return float(np.mean(pairs))


def _state_hash(net, mask: Mask) -> str:
    h = hashlib.sha256(net.param_hash().encode("ascii"))
    for name in mask.names():
        h.update(name.encode("utf-8"))
        h.update(mask.active_indices(name).astype("<i8").tobytes())
    return h.hexdigest()


def prune_sets(criterion: PruneCriterion, net, mask: Mask, grads: dict, rho: float, scope: str = "local",
               rng=None) -> dict[str, np.ndarray]:
    """What ``criterion`` would remove from this state (nothing is modified)."""
    names = mask.names()
    if scope == "local":
        return {
            n: select_prune_local(criterion, net.params[n], grads[n], mask[n],
                                  prune_count(rho, mask.active_count(n)), rng=rng)
            for n in names
        }
    k = min(prune_count(rho, mask.active_count()), mask.active_count() - len(names))
    return select_prune_global(criterion, {n: net.params[n] for n in names}, grads, mask, max(k, 0), rng=rng)


def first_update_similarity(config: ExperimentConfig, criteria, seeds, splits: Splits | None = None
                            ) -> SimilarityMatrix:
    """Jaccard matrix of the prune sets chosen at the first topology update.

    For every seed each criterion gets its own run of ``config`` up to the
    first update step; their states must agree bit for bit, which is checked
    by hashing parameters and mask. Each criterion then selects on that
    state. ``criteria`` entries use the ``name[:lambda]`` syntax.
    """
    from .trainer import Trainer, prepare_data, stream, STREAM_GROWTH

    crits = [c if isinstance(c, PruneCriterion) else PruneCriterion.parse(c, config.mest_lambda) for c in criteria]
    labels = [c.label for c in crits]
    if len(set(labels)) != len(labels):
        raise AnalysisError(f"duplicate criteria: {labels}")
    seeds = list(seeds)
    if not seeds:
        raise AnalysisError("need at least one seed")
    splits = splits if splits is not None else prepare_data(config)
    per_seed = []
    for seed in seeds:
        sets, ref = {}, None
        for crit in crits:
            cfg = config.with_updates(seed=seed, criterion=crit.name, mest_lambda=crit.mest_lambda)
            net, mask, grads, rho = Trainer(cfg, splits).first_update_state()
            digest = _state_hash(net, mask)
            if ref is None:
                ref = digest
            elif digest != ref:
                raise HarnessError(f"seed {seed}: state before the first update diverged for {crit.label}")
            rng = stream(seed, STREAM_GROWTH) if crit.needs_rng else None
            sets[crit.label] = prune_sets(crit, net, mask, grads, rho, config.pruning_scope, rng)
        per_seed.append(sets)
    return _matrix(labels, per_seed)


def _check_same_structure(snaps: list[MaskSnapshot]) -> None:
    first = snaps[0]
    for s in snaps[1:]:
        if s.mask.shapes() != first.mask.shapes():
            raise AnalysisError("snapshots have different layer structure")
        if [s.mask.active_count(n) for n in s.mask.names()] != [first.mask.active_count(n) for n in first.mask.names()]:
            raise AnalysisError(
                f"density mismatch between snapshots ({first.criterion}, density {first.density}, seed {first.seed}"
                f" vs {s.criterion}, density {s.density}, seed {s.seed})"
            )


def end_mask_similarity(groups: dict[str, list[MaskSnapshot]]) -> SimilarityMatrix:
    """Pairwise similarity of end masks; ``groups[label]`` holds one snapshot per seed, aligned by position."""
    labels = list(groups)
    if not labels:
        raise AnalysisError("no runs given")
    n = {len(v) for v in groups.values()}
    if len(n) != 1 or 0 in n:
        raise AnalysisError("every label needs the same, nonzero number of snapshots")
    flat = [s for v in groups.values() for s in v]
    _check_same_structure(flat)
    per_seed = []
    for i in range(n.pop()):
        per_seed.append({label: {name: groups[label][i].mask.active_indices(name)
                                 for name in groups[label][i].mask.names()} for label in labels})
    return _matrix(labels, per_seed)


def init_vs_end(snapshots: list[MaskSnapshot]) -> float:
    """Layer-averaged Jaccard between the first and last snapshot of one run."""
    if not snapshots:
        raise AnalysisError("no snapshots")
    ordered = sorted(snapshots, key=lambda s: s.step)
    _check_same_structure([ordered[0], ordered[-1]])
    return mean_jaccard(ordered[0].mask, ordered[-1].mask)


def always_kept_fraction(masks: list) -> tuple[float, float]:
    """Share of active (inactive) weights that are active (inactive) in every mask."""
    if not masks:
        raise AnalysisError("no masks")
    layers = [_layers(m.mask if isinstance(m, MaskSnapshot) else m) for m in masks]
    names = list(layers[0])
    if any(list(l) != names for l in layers):
        raise AnalysisError("masks have different layer structure")
    kept = removed = 0
    n_active = sum(int(layers[0][n].sum()) for n in names)
    n_total = sum(layers[0][n].size for n in names)
    for lay in layers[1:]:
        if sum(int(lay[n].sum()) for n in names) != n_active:
            raise AnalysisError("masks differ in density")
    for n in names:
        stack = np.stack([np.asarray(l[n], dtype=bool) for l in layers])
        kept += int(stack.all(axis=0).sum())
        removed += int((~stack).all(axis=0).sum())
    n_inactive = n_total - n_active
    return (kept / n_active if n_active else 1.0, removed / n_inactive if n_inactive else 1.0)


# ---------------------------------------------------------------------------
# ITOP
# ---------------------------------------------------------------------------


def itop_curve(snapshots: list[MaskSnapshot], include_final: bool = False) -> list[tuple[int, float]]:
    """Running exploration ratio at the initial snapshot and every update.

    Snapshot kinds come from ``meta["kind"]``; the "final" snapshot repeats
    the last mask and is skipped unless asked for.
    """
    ordered = sorted(snapshots, key=lambda s: (s.step, s.meta.get("kind") == "final"))
    if not include_final:
        ordered = [s for s in ordered if s.meta.get("kind") != "final"]
    if not ordered:
        raise AnalysisError("no snapshots")
    _check_same_structure(ordered)
    seen = {n: b.copy() for n, b in ordered[0].mask.layers.items()}
    total = sum(b.size for b in seen.values())
    curve = []
    for s in ordered:
        for n, b in s.mask.layers.items():
            seen[n] |= b
        curve.append((int(s.step), sum(int(b.sum()) for b in seen.values()) / total))
    return curve


def is_monotone(curve) -> bool:
    vals = [v for _, v in curve]
    return all(b >= a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# ranks and critical distance
# ---------------------------------------------------------------------------

# Two-tailed Nemenyi critical values at alpha = 0.05 for k = 2..10 methods:
# the studentized range quantile q(0.95, k, inf) divided by sqrt(2), as
# tabulated by Demsar (2006, JMLR 7, Table 5a).
NEMENYI_Q_05 = {2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850, 7: 2.949, 8: 3.031, 9: 3.102, 10: 3.164}


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    if alpha != 0.05:
        raise AnalysisError(f"only alpha = 0.05 is tabulated, got {alpha}")
    if k not in NEMENYI_Q_05:
        raise AnalysisError(f"q table covers 2..10 methods, got {k}")
    if n < 1:
        raise AnalysisError("need at least one setting")
    return NEMENYI_Q_05[k] * math.sqrt(k * (k + 1) / (6.0 * n))


@dataclass
class RankTable:
    methods: list[str]
    settings: list[str]
    ranks: np.ndarray  # (N settings, k methods), 1 = best
    cd: float | None = None
    groups: list[list[str]] = field(default_factory=list)

    @property
    def average(self) -> dict[str, float]:
        return {m: float(r) for m, r in zip(self.methods, self.ranks.mean(axis=0))}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", *self.methods])
        for s, row in zip(self.settings, self.ranks):
            w.writerow([s, *(repr(float(v)) for v in row)])
        w.writerow(["average", *(repr(v) for v in self.average.values())])
        return buf.getvalue()

    def report(self) -> dict:
        return {
            "methods": self.methods,
            "n_settings": len(self.settings),
            "average_ranks": self.average,
            "critical_distance": self.cd,
            "alpha": 0.05,
            "groups": self.groups,
        }


def average_ranks(results: dict[str, dict[str, float]], methods: list[str] | None = None,
                  higher_is_better: bool = True) -> RankTable:
    """Rank methods within each setting (1 = best, ties share the mean rank).

    ``results[setting][method]`` is the score. Every setting must have every
    method; missing cells are listed in the error.
    """
    settings = list(results)
    if not settings:
        raise AnalysisError("empty results table")
    if methods is None:
        methods = sorted({m for row in results.values() for m in row})
    missing = [f"{s}/{m}" for s in settings for m in methods if m not in results[s]]
    if missing:
        raise AnalysisError(f"missing cells: {', '.join(missing)}")
    scores = np.array([[float(results[s][m]) for m in methods] for s in settings])
    if not np.isfinite(scores).all():
        raise AnalysisError("results contain non-finite scores")
    ranks = np.vstack([rankdata(-row if higher_is_better else row, method="average") for row in scores])
    table = RankTable(list(methods), settings, ranks)
    if 2 <= len(methods) <= 10:
        table.cd = nemenyi_cd(len(methods), len(settings))
        table.groups = cd_groups(table.average, table.cd)
    return table


def cd_groups(avg: dict[str, float], cd: float) -> list[list[str]]:
    """Maximal runs of methods (sorted by average rank) spanning at most ``cd``."""
    order = sorted(avg, key=lambda m: (avg[m], m))
    groups: list[list[str]] = []
    for i in range(len(order)):
        j = i
        while j + 1 < len(order) and avg[order[j + 1]] - avg[order[i]] <= cd + 1e-12:
            j += 1
        group = order[i:j + 1]
        if not groups or not set(group) <= set(groups[-1]):
            groups.append(group)
    return groups


def read_results_csv(path) -> dict[str, dict[str, float]]:
    """Long-format results: header ``setting,method,score``."""
    path = Path(path)
    out: dict[str, dict[str, float]] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"setting", "method", "score"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise AnalysisError(f"{path}: expected columns {sorted(need)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                score = float(row["score"])
            except ValueError:
                raise AnalysisError(f"{path}:{lineno}: score {row['score']!r} is not a number") from None
            cell = out.setdefault(row["setting"], {})
            if row["method"] in cell:
                raise AnalysisError(f"{path}:{lineno}: duplicate cell {row['setting']}/{row['method']}")
            cell[row["method"]] = score
    return out


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------


def load_snapshots(run_dir) -> list[MaskSnapshot]:
    snap_dir = Path(run_dir) / "snapshots"
    files = sorted(snap_dir.glob("*.dstm"))
    if not files:
        raise AnalysisError(f"no snapshots under {snap_dir}")
    return [MaskSnapshot.load(f) for f in files]


def end_snapshot(run_dir) -> MaskSnapshot:
    snaps = load_snapshots(run_dir)
    finals = [s for s in snaps if s.meta.get("kind") == "final"]
    return finals[-1] if finals else max(snaps, key=lambda s: s.step)


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_json(path, payload) -> Path:
    return write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def curve_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "itop"])
    for step, v in curve:
        w.writerow([step, repr(float(v))])
    return buf.getvalue()
