"""Pruning scores, prune-set selection and regrowth rules.

Every selection is deterministic: candidates are ordered by score and then
by flat index (for global selection, by position in the concatenation of all
maskable layers in network order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import Mask

PRUNE_NAMES = ("magnitude", "set", "mest", "sensitivity", "rsensitivity", "snip", "random_prune")
GROWTH_NAMES = ("random", "gradient")
DEFAULT_EPS = 1e-12
DEFAULT_MEST_LAMBDA = 1.0


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class PruneCriterion:
    name: str
    mest_lambda: float = DEFAULT_MEST_LAMBDA
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.name not in PRUNE_NAMES:
            raise ValueError(f"unknown pruning criterion {self.name!r}; valid options: {', '.join(PRUNE_NAMES)}")
        for label, v in (("lambda", self.mest_lambda), ("eps", self.eps)):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{label} must be finite and non-negative, got {v}")

    @classmethod
    def parse(cls, text: str, mest_lambda: float = DEFAULT_MEST_LAMBDA) -> "PruneCriterion":
        """``"mest"`` or ``"mest:0.5"`` (lambda override); other names verbatim."""
        name, _, arg = text.strip().partition(":")
        if arg:
            if name != "mest":
                raise ValueError(f"only mest takes a parameter, got {text!r}")
            mest_lambda = float(arg)
        return cls(name, mest_lambda=mest_lambda)

    @property
    def label(self) -> str:
        if self.name == "mest" and self.mest_lambda != DEFAULT_MEST_LAMBDA:
            return f"mest:{self.mest_lambda:g}"
        return self.name

    @property
    def needs_rng(self) -> bool:
        return self.name == "random_prune"


@dataclass(frozen=True)
class GrowthCriterion:
    name: str

    def __post_init__(self):
        if self.name not in GROWTH_NAMES:
            raise ValueError(f"unknown growth criterion {self.name!r}; valid options: {', '.join(GROWTH_NAMES)}")


def score(criterion: PruneCriterion, weights: np.ndarray, grads: np.ndarray, rng=None) -> np.ndarray:
    """Elementwise importance; lower scores are pruned first."""
    weights = np.asarray(weights, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if weights.shape != grads.shape:
        raise ValueError(f"weights {weights.shape} and grads {grads.shape} differ in shape")
    w, g = np.abs(weights), np.abs(grads)
    name = criterion.name
    if name in ("magnitude", "set"):
        return w
    if name == "mest":
        return w + criterion.mest_lambda * g
    if name == "sensitivity":
        with np.errstate(divide="ignore", invalid="ignore"):
            return g / (w + criterion.eps)
    if name == "rsensitivity":
        with np.errstate(divide="ignore", invalid="ignore"):
            return w / (g + criterion.eps)
    if name == "snip":
        return w * g
    if name == "random_prune":
        if rng is None:
            raise ValueError("random_prune needs an rng")
        return rng.random(weights.shape)
    raise AssertionError(name)


def _order(scores: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Positions sorted by (score, position). NaN scores sort last."""
    return positions[np.lexsort((positions, scores[positions]))]


def prune_count(rho_t: float, active_count: int) -> int:
    if not 0.0 <= rho_t <= 1.0:
        raise ValueError(f"prune fraction must lie in [0, 1], got {rho_t}")
    return int(np.floor(rho_t * active_count))


def _set_quotas(k: int, n_neg: int, n_pos: int) -> tuple[int, int]:
    q_neg = min(k // 2, n_neg)
    q_pos = k - q_neg
    if q_pos > n_pos:
        q_pos = n_pos
        q_neg = k - q_pos
    return q_neg, q_pos


def select_prune_local(criterion: PruneCriterion, weights, grads, mask_bits, k: int, rng=None) -> np.ndarray:
    """Flat indices of the ``k`` active weights to drop from one layer."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    active = np.flatnonzero(np.asarray(mask_bits).reshape(-1))
    if k < 0 or k > active.size:
        raise SelectionError(f"cannot prune {k} of {active.size} active weights")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    s = score(criterion, w, np.asarray(grads, dtype=np.float64).reshape(-1), rng=rng)
    if criterion.name == "set":
        neg = active[w[active] < 0]
        pos = active[w[active] >= 0]
        q_neg, q_pos = _set_quotas(k, neg.size, pos.size)
        chosen = np.concatenate([_order(s, neg)[:q_neg], _order(s, pos)[:q_pos]])
        return np.sort(chosen)
    return np.sort(_order(s, active)[:k])


def _greedy_keep_one(order_gid, layer_of_gid, remaining, k):
    """Walk candidates in order; skip any that would empty its layer."""
    chosen = []
    for gid in order_gid:
        if len(chosen) == k:
            break
        layer = layer_of_gid[gid]
        if remaining[layer] > 1:
            remaining[layer] -= 1
            chosen.append(gid)
    return chosen


def select_prune_global(criterion: PruneCriterion, weights: dict, grads: dict, mask: Mask, k_total: int,
                        rng=None, keep_one: bool = True) -> dict[str, np.ndarray]:
    """Prune ``k_total`` weights from one pool spanning every maskable layer.

    With ``keep_one`` each layer keeps at least one active weight; prunes
    displaced by that rule fall to the next-lowest scores in the pool.
    """
    names = mask.names()
    offsets = np.cumsum([0] + [mask.size(n) for n in names])
    total_active = mask.active_count()
    if k_total < 0 or k_total > total_active or (keep_one and k_total > total_active - len(names)):
        raise SelectionError(f"cannot prune {k_total} of {total_active} active weights across {len(names)} layers")
    w = np.concatenate([np.asarray(weights[n], dtype=np.float64).reshape(-1) for n in names])
    g = np.concatenate([np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in names])
    bits = np.concatenate([mask[n].reshape(-1) for n in names])
    active = np.flatnonzero(bits)
    layer_of_gid = np.searchsorted(offsets, np.arange(offsets[-1]), side="right") - 1
    remaining = [mask.active_count(n) if keep_one else mask.size(n) + 1 for n in names]
    s = score(criterion, w, g, rng=rng)

    if k_total == 0:
        chosen = []
    elif criterion.name == "set":
        neg = _order(s, active[w[active] < 0])
        pos = _order(s, active[w[active] >= 0])
        q_neg, q_pos = _set_quotas(k_total, neg.size, pos.size)
        chosen = _greedy_keep_one(neg, layer_of_gid, remaining, q_neg)
        chosen += _greedy_keep_one(pos, layer_of_gid, remaining, q_pos + (q_neg - len(chosen)))
        if len(chosen) < k_total:
            taken = set(chosen)
            rest = [gid for gid in neg if gid not in taken]
            chosen += _greedy_keep_one(rest, layer_of_gid, remaining, k_total - len(chosen))
    else:
        chosen = _greedy_keep_one(_order(s, active), layer_of_gid, remaining, k_total)
    if len(chosen) != k_total:
        raise SelectionError(f"only {len(chosen)} of {k_total} prunes satisfy the keep-one rule")

    chosen = np.sort(np.asarray(chosen, dtype=np.int64))
    out = {}
    for i, n in enumerate(names):
        sel = chosen[(chosen >= offsets[i]) & (chosen < offsets[i + 1])]
        out[n] = sel - offsets[i]
    return out


def select_grow_random(candidates: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` of the candidate positions, uniformly without replacement."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if k < 0 or k > candidates.size:
        raise SelectionError(f"cannot grow {k} from {candidates.size} inactive positions")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(candidates, size=k, replace=False))


def select_grow_gradient(dense_grads: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """``k`` candidates with the largest ``|grad|``; ties go to lower indices."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if k < 0 or k > candidates.size:
        raise SelectionError(f"cannot grow {k} from {candidates.size} inactive positions")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    g = np.abs(np.asarray(dense_grads, dtype=np.float64).reshape(-1))
    return np.sort(_order(-g, candidates)[:k])
