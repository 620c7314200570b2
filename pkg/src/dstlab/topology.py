"""Sparse masks, ER/ERK density allocation and exploration tracking."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Conv2d, Linear, Network


class InfeasibleDensityError(ValueError):
    pass


class SnapshotFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


class Mask:
    """Per-layer boolean topology, keyed by weight name in layer order."""

    def __init__(self, layers: dict[str, np.ndarray]):
        self.layers = {k: np.asarray(v, dtype=bool) for k, v in layers.items()}

    @classmethod
    def full(cls, net: Network) -> "Mask":
        return cls({k: np.ones(net.params[k].shape, dtype=bool) for k in net.maskable})

    @classmethod
    def from_indices(cls, shapes: dict[str, tuple[int, ...]], indices: dict[str, np.ndarray]) -> "Mask":
        layers = {}
        for name, shape in shapes.items():
            bits = np.zeros(int(np.prod(shape)), dtype=bool)
            bits[np.asarray(indices[name], dtype=np.int64)] = True
            layers[name] = bits.reshape(shape)
        return cls(layers)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]

    def __iter__(self):
        return iter(self.layers)

    def __eq__(self, other):
        if not isinstance(other, Mask) or list(self.layers) != list(other.layers):
            return NotImplemented
        return all(np.array_equal(self.layers[k], other.layers[k]) for k in self.layers)

    def names(self) -> list[str]:
        return list(self.layers)

    def copy(self) -> "Mask":
        return Mask({k: v.copy() for k, v in self.layers.items()})

    def active_count(self, name: str | None = None) -> int:
        if name is not None:
            return int(self.layers[name].sum())
        return int(sum(v.sum() for v in self.layers.values()))

    def size(self, name: str | None = None) -> int:
        if name is not None:
            return int(self.layers[name].size)
        return int(sum(v.size for v in self.layers.values()))

    def active_indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.layers[name])

    def inactive_indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(~self.layers[name])

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.layers.items()}

    def apply(self, net: Network) -> None:
        """Zero every inactive weight in place."""
        for name, bits in self.layers.items():
            net.params[name][~bits] = 0.0


def layer_density(mask: Mask, name: str) -> float:
    return mask.active_count(name) / mask.size(name)


def global_density(mask: Mask) -> float:
    return mask.active_count() / mask.size()


# ---------------------------------------------------------------------------
# density allocation
# ---------------------------------------------------------------------------


@dataclass
class SparsityPlan:
    names: list[str]
    sizes: list[int]
    densities: list[float]  # real-valued allocation before rounding
    counts: list[int]  # active weights per layer after rounding
    target: float

    def realized_density(self) -> float:
        return sum(self.counts) / sum(self.sizes)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.densities))


def _allocate(names, sizes, raw, density: float) -> SparsityPlan:
    if not 0.0 < density <= 1.0:
        raise InfeasibleDensityError(f"density must lie in (0, 1], got {density}")
    sizes = [int(s) for s in sizes]
    raw = np.asarray(raw, dtype=float)
    total = sum(sizes)
    dense: set[int] = set()
    # clamp-and-resolve until no free layer exceeds density 1
    while True:
        free = [i for i in range(len(sizes)) if i not in dense]
        budget = density * total - sum(sizes[i] for i in dense)
        if not free:
            if budget > 1e-9 * total:
                raise InfeasibleDensityError(f"density {density} cannot be reached")
            eps = 0.0
            break
        eps = budget / sum(raw[i] * sizes[i] for i in free)
        over = [i for i in free if eps * raw[i] > 1.0]
        if not over:
            break
        dense.update(over)
    densities = [1.0 if i in dense else float(eps * raw[i]) for i in range(len(sizes))]

    counts = [int(np.floor(d * n + 0.5)) for d, n in zip(densities, sizes)]
    counts = [min(max(c, 1), n) for c, n in zip(counts, sizes)]
    goal = int(np.floor(density * total + 0.5))
    drift = goal - sum(counts)
    if drift:
        adjustable = [i for i in range(len(sizes)) if i not in dense] or list(range(len(sizes)))
        big = max(adjustable, key=lambda i: (sizes[i], -i))
        counts[big] = min(max(counts[big] + drift, 1), sizes[big])
    return SparsityPlan(list(names), sizes, densities, counts, density)


def er_scale(fan_in: int, fan_out: int) -> float:
    return (fan_in + fan_out) / (fan_in * fan_out)


def erk_scale(c_in: int, c_out: int, kh: int, kw: int) -> float:
    return (c_in + c_out + kw + kh) / (c_in * c_out * kw * kh)


def er_allocate(layer_dims: list[tuple[int, int]], density: float, names: list[str] | None = None) -> SparsityPlan:
    """Erdos-Renyi allocation for fully connected layers given ``(fan_in, fan_out)``."""
    names = names or [f"layer{i}" for i in range(len(layer_dims))]
    sizes = [a * b for a, b in layer_dims]
    raw = [er_scale(a, b) for a, b in layer_dims]
    return _allocate(names, sizes, raw, density)


def erk_allocate(net: Network, density: float) -> SparsityPlan:
    """ER for linear layers, the kernel-aware variant for convolutions."""
    names, sizes, raw = [], [], []
    for name in net.maskable:
        layer = net.layer_of(name)
        names.append(name)
        sizes.append(net.params[name].size)
        if isinstance(layer, Conv2d):
            raw.append(erk_scale(layer.c_in, layer.c_out, layer.kernel, layer.kernel))
        else:
            raw.append(er_scale(layer.in_features, layer.out_features))
    return _allocate(names, sizes, raw, density)


def er_allocate_net(net: Network, density: float) -> SparsityPlan:
    """ER over a network, treating each conv as a (c_in*k*k, c_out) matrix."""
    dims = []
    for name in net.maskable:
        w = net.params[name]
        dims.append((int(np.prod(w.shape[1:])), int(w.shape[0])))
    return er_allocate(dims, density, names=list(net.maskable))


def allocate(net: Network, density: float, scheme: str = "auto") -> SparsityPlan:
    if scheme == "auto":
        has_conv = any(isinstance(net.layer_of(n), Conv2d) for n in net.maskable)
        scheme = "erk" if has_conv else "er"
    if scheme == "er":
        return er_allocate_net(net, density)
    if scheme == "erk":
        return erk_allocate(net, density)
    raise ValueError(f"unknown init scheme {scheme!r}; expected auto, er or erk")


def sample_mask(plan: SparsityPlan, shapes: dict[str, tuple[int, ...]], rng) -> Mask:
    """Uniform random positions per layer, exactly ``plan.counts`` of them."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    indices = {}
    for name, n, c in zip(plan.names, plan.sizes, plan.counts):
        indices[name] = rng.choice(n, size=c, replace=False) if c < n else np.arange(n)
    return Mask.from_indices({n: shapes[n] for n in plan.names}, indices)


# ---------------------------------------------------------------------------
# exploration (ITOP)
# ---------------------------------------------------------------------------


class ExplorationLedger:
    """Running union of every mask seen."""

    def __init__(self, mask: Mask):
        self.seen = {k: v.copy() for k, v in mask.layers.items()}

    def update(self, mask: Mask) -> None:
        for k, v in mask.layers.items():
            self.seen[k] |= v

    def ratio(self) -> float:
        return itop_ratio(self)


def itop_ratio(ledger: ExplorationLedger) -> float:
    explored = sum(int(v.sum()) for v in ledger.seen.values())
    total = sum(v.size for v in ledger.seen.values())
    return explored / total


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"DSTMASK\x00"
SNAPSHOT_VERSION = 1


@dataclass
class MaskSnapshot:
    """A mask plus the run metadata needed to compare it with others.

    File layout (version 1, little-endian throughout)::

        8 bytes   magic  b"DSTMASK\\0"
        u32       format version
        u32       header length H
        H bytes   UTF-8 JSON header, keys sorted, no whitespace:
                  {step, criterion, growth, seed, density,
                   layers: [{name, shape, count}, ...]}
        per layer, in header order: count x u32 sorted flat indices
    """

    mask: Mask
    step: int
    criterion: str
    growth: str
    seed: int
    density: float
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "step": int(self.step),
            "criterion": self.criterion,
            "growth": self.growth,
            "seed": int(self.seed),
            "density": float(self.density),
            "layers": [
                {"name": name, "shape": list(bits.shape), "count": int(bits.sum())}
                for name, bits in self.mask.layers.items()
            ],
            **({"meta": self.meta} if self.meta else {}),
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [SNAPSHOT_MAGIC, struct.pack("<II", SNAPSHOT_VERSION, len(head)), head]
        for name in self.mask.names():
            parts.append(self.mask.active_indices(name).astype("<u4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "MaskSnapshot":
        if len(blob) < 16 or blob[:8] != SNAPSHOT_MAGIC:
            raise SnapshotFormatError(f"{source}: not a mask snapshot (bad magic)")
        version, hlen = struct.unpack_from("<II", blob, 8)
        if version != SNAPSHOT_VERSION:
            raise SnapshotFormatError(f"{source}: unsupported snapshot version {version}")
        off = 16
        if off + hlen > len(blob):
            raise SnapshotFormatError(f"{source}: truncated header at offset {off}")
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
        off += hlen
        shapes, indices = {}, {}
        for layer in header["layers"]:
            count = layer["count"]
            end = off + 4 * count
            if end > len(blob):
                raise SnapshotFormatError(f"{source}: truncated index block for {layer['name']} at offset {off}")
            shapes[layer["name"]] = tuple(layer["shape"])
            indices[layer["name"]] = np.frombuffer(blob, dtype="<u4", count=count, offset=off).astype(np.int64)
            off = end
        if off != len(blob):
            raise SnapshotFormatError(f"{source}: {len(blob) - off} trailing bytes")
        return cls(
            mask=Mask.from_indices(shapes, indices),
            step=header["step"],
            criterion=header["criterion"],
            growth=header["growth"],
            seed=header["seed"],
            density=header["density"],
            meta=header.get("meta", {}),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "MaskSnapshot":
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), source=str(path))
