"""Dense float64 layers with hand-written backward passes.

A :class:`Network` is an ordered list of layers. Parameters live in
``net.params`` keyed ``"<layer index>.weight"`` / ``"<layer index>.bias"``.
Masked weights are plain zeros in those arrays; the network itself knows
nothing about masks, so gradients for inactive positions come out as the
true partial derivative at zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ConfigurationError(ValueError):
    """Raised for inconsistent layer stacks or mismatched input shapes."""


class DataError(ValueError):
    """Raised for labels outside the class range or non-finite inputs."""


def as_tensor(values, *, name: str = "tensor") -> np.ndarray:
    """Convert external input to a finite float64 array."""
    arr = np.asarray(values, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(s < 1 for s in arr.shape):
        raise DataError(f"{name}: every dimension must be >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"
    maskable = False

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, params: dict[str, np.ndarray], x: np.ndarray):
        """Return ``(y, cache)``."""
        raise NotImplementedError

    def backward(self, params, cache, dy) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Return ``(dx, param_grads)``."""
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind


class Linear(Layer):
    """Fully connected layer. Inputs with more than two dims are flattened."""

    kind = "linear"
    maskable = True

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.has_bias = bias

    def param_shapes(self):
        shapes = {"weight": (self.out_features, self.in_features)}
        if self.has_bias:
            shapes["bias"] = (self.out_features,)
        return shapes

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_features:
            raise ConfigurationError(
                f"Linear({self.in_features}, {self.out_features}) got input of shape {in_shape}"
            )
        return (self.out_features,)

    def forward(self, params, x):
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.in_features:
            raise ConfigurationError(
                f"Linear expects {self.in_features} features, got {x2.shape[1]}"
            )
        y = x2 @ params["weight"].T
        if self.has_bias:
            y += params["bias"]
        return y, (x.shape, x2)

    def backward(self, params, cache, dy):
        in_shape, x2 = cache
        grads = {"weight": dy.T @ x2}
        dx = dy @ params["weight"]
        if self.has_bias:
            grads["bias"] = dy.sum(axis=0)
        return dx.reshape(in_shape), grads

    def fan_in_out(self) -> tuple[int, int]:
        return self.in_features, self.out_features

    def describe(self):
        return f"Linear({self.in_features}, {self.out_features})"


class Conv2d(Layer):
    """Stride-1 convolution; supports the 3x3/pad-1 and 5x5/pad-0 variants."""

    kind = "conv2d"
    maskable = True
    _ALLOWED = {(3, 1), (5, 0)}

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, padding: int = 1, bias: bool = True):
        if (kernel, padding) not in self._ALLOWED:
            raise ConfigurationError(
                f"Conv2d supports kernel/padding pairs {sorted(self._ALLOWED)}, got ({kernel}, {padding})"
            )
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.kernel, self.padding = int(kernel), int(padding)
        self.has_bias = bias

    def param_shapes(self):
        shapes = {"weight": (self.c_out, self.c_in, self.kernel, self.kernel)}
        if self.has_bias:
            shapes["bias"] = (self.c_out,)
        return shapes

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ConfigurationError(f"{self.describe()} got input of shape {in_shape}")
        _, h, w = in_shape
        p, k = self.padding, self.kernel
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"{self.describe()}: input {in_shape} too small")
        return (self.c_out, ho, wo)

    def forward(self, params, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ConfigurationError(f"{self.describe()} got batch of shape {x.shape}")
        p, k = self.padding, self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, C*k*k)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))
        n, _, ho, wo = win.shape[:4]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, -1)
        wmat = params["weight"].reshape(self.c_out, -1)
        y = cols @ wmat.T
        if self.has_bias:
            y = y + params["bias"]
        y = y.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (x.shape, cols, ho, wo)

    def backward(self, params, cache, dy):
        x_shape, cols, ho, wo = cache
        n = x_shape[0]
        p, k = self.padding, self.kernel
        dy2 = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.c_out)
        grads = {"weight": (dy2.T @ cols).reshape(params["weight"].shape)}
        if self.has_bias:
            grads["bias"] = dy2.sum(axis=0)
        dcols = (dy2 @ params["weight"].reshape(self.c_out, -1)).reshape(n, ho, wo, self.c_in, k, k)
        hp, wp = x_shape[2] + 2 * p, x_shape[3] + 2 * p
        dxp = np.zeros((n, self.c_in, hp, wp), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:hp - p, p:wp - p] if p else dxp
        return dx, grads

    def fan_in_out(self) -> tuple[int, int]:
        return self.c_in, self.c_out

    def describe(self):
        return f"Conv2d({self.c_in}, {self.c_out}, {self.kernel}, pad={self.padding})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x):
        pos = x > 0
        return x * pos, pos

    def backward(self, params, cache, dy):
        return dy * cache, {}

    def describe(self):
        return "ReLU"


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
            raise ConfigurationError(f"MaxPool2 got input of shape {in_shape}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, params, x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        xc = x[:, :, : 2 * h2, : 2 * w2]
        blocks = xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        # first maximum in (row, col) order wins ties
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, params, cache, dy):
        x_shape, arg = cache
        n, c, h, w = x_shape
        h2, w2 = h // 2, w // 2
        onehot = np.zeros(arg.shape + (4,), dtype=DTYPE)
        np.put_along_axis(onehot, arg[..., None], dy[..., None], axis=-1)
        dblocks = onehot.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        dx = np.zeros(x_shape, dtype=DTYPE)
        dx[:, :, : 2 * h2, : 2 * w2] = dblocks
        return dx, {}

    def describe(self):
        return "MaxPool2"


class GlobalAvgPool(Layer):
    kind = "gap"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigurationError(f"GlobalAvgPool got input of shape {in_shape}")
        return (in_shape[0],)

    def forward(self, params, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, params, cache, dy):
        n, c, h, w = cache
        return np.broadcast_to(dy[:, :, None, None] / (h * w), cache).copy(), {}

    def describe(self):
        return "GlobalAvgPool"


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Network:
    """Sequential stack of layers with float64 parameters."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], name: str = "custom"):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self._caches: list | None = None
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            for pname, pshape in layer.param_shapes().items():
                self.params[f"{i}.{pname}"] = np.zeros(pshape, dtype=DTYPE)
            shape = layer.output_shape(shape)
        self.output_shape = shape

    # -- parameter bookkeeping -------------------------------------------------
    @property
    def maskable(self) -> list[str]:
        """Names of the weight tensors that carry a mask, in layer order."""
        return [f"{i}.weight" for i, layer in enumerate(self.layers) if layer.maskable]

    def layer_of(self, pname: str) -> Layer:
        return self.layers[int(pname.split(".")[0])]

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.layers = self.layers
        other.input_shape = self.input_shape
        other.name = self.name
        other.output_shape = self.output_shape
        other.params = {k: v.copy() for k, v in self.params.items()}
        other._caches = None
        return other

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())
        return h.hexdigest()

    def init_params(self, rng: np.random.Generator) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        for name in self.params:
            layer = self.layer_of(name)
            w_shape = layer.param_shapes()["weight"]
            fan_in = int(np.prod(w_shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            shape = self.params[name].shape
            self.params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)

    # -- passes ------------------------------------------------------------------
    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Logits for ``batch``; caches activations for :meth:`backward`."""
        x = np.asarray(batch, dtype=DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"{self.name}: expected batch of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        caches = []
        for i, layer in enumerate(self.layers):
            lp = {k.split(".")[1]: v for k, v in self.params.items() if k.startswith(f"{i}.")}
            x, cache = layer.forward(lp, x)
            caches.append(cache)
        self._caches = caches
        return x

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        if self._caches is None:
            raise RuntimeError("backward called without a preceding forward")
        grads: dict[str, np.ndarray] = {}
        dy = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            lp = {k.split(".")[1]: v for k, v in self.params.items() if k.startswith(f"{i}.")}
            dy, g = layer.backward(lp, self._caches[i], dy)
            for pname, arr in g.items():
                grads[f"{i}.{pname}"] = arr
        return {k: grads[k] for k in self.params}

    def describe(self) -> str:
        return " -> ".join(layer.describe() for layer in self.layers)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

LOSS_KINDS = ("softmax_xent", "sigmoid_bce")


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise DataError(f"labels must be a vector, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DataError(f"label out of range [0, {n_classes}): min={y.min()}, max={y.max()}")
    return y


def loss_from_logits(logits: np.ndarray, labels, loss_kind: str) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    if loss_kind == "softmax_xent":
        y = _check_labels(labels, logits.shape[1])
        if y.shape[0] != n:
            raise DataError(f"{y.shape[0]} labels for {n} logits")
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted - lse[:, None]
        loss = float(-logp[np.arange(n), y].mean())
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        return loss, d / n
    if loss_kind == "sigmoid_bce":
        if logits.ndim != 2 or logits.shape[1] != 1:
            raise ConfigurationError(f"sigmoid_bce needs a single logit per sample, got {logits.shape}")
        y = _check_labels(labels, 2)
        if y.shape[0] != n:
            raise DataError(f"{y.shape[0]} labels for {n} logits")
        z = logits[:, 0]
        t = y.astype(DTYPE)
        # log(1 + exp(z)) - t*z, written stably
        per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return float(per.mean()), ((sig - t) / n)[:, None]
    raise ConfigurationError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def default_loss_kind(net: Network) -> str:
    return "sigmoid_bce" if net.output_shape == (1,) else "softmax_xent"


def loss_and_grad(net: Network, batch, labels, loss_kind: str | None = None):
    """Forward + backward. Returns ``(mean loss, {param name: grad})``.

    Every gradient is dense, inactive weights included.
    """
    loss_kind = loss_kind or default_loss_kind(net)
    logits = net.forward(batch)
    loss, dlogits = loss_from_logits(logits, labels, loss_kind)
    return loss, net.backward(dlogits)


def loss_only(net: Network, batch, labels, loss_kind: str | None = None) -> float:
    loss_kind = loss_kind or default_loss_kind(net)
    return loss_from_logits(net.forward(batch), labels, loss_kind)[0]


def _activation_pattern(net: Network) -> bytes:
    """Digest of every ReLU on/off state and max-pool choice of the last forward."""
    h = hashlib.sha1()
    for layer, cache in zip(net.layers, net._caches or ()):
        if isinstance(layer, ReLU):
            h.update(np.packbits(cache).tobytes())
        elif isinstance(layer, MaxPool2):
            h.update(cache[1].astype(np.int8).tobytes())
    return h.digest()


def finite_diff_grad(net: Network, batch, labels, h: float = 1e-5, loss_kind: str | None = None,
                     coords: dict[str, np.ndarray] | None = None, kinks: list | None = None
                     ) -> dict[str, np.ndarray]:
    """Central differences for every parameter entry.

    ``coords`` optionally restricts each tensor to a set of flat indices; the
    untouched entries of the returned arrays are NaN. When a ``kinks`` list is
    passed, entries whose +-h stencil flips a ReLU or max-pool decision are
    appended to it as ``(name, index)`` and left NaN, since the loss is not
    differentiable across that stencil.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = None
    if kinks is not None:
        loss_only(net, batch, labels, loss_kind)
        base = _activation_pattern(net)
    out = {}
    for name, p in net.params.items():
        flat = p.reshape(-1)
        g = np.full(flat.shape, np.nan) if coords is not None else np.empty(flat.shape)
        idx = range(flat.size) if coords is None else coords.get(name, ())
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_only(net, batch, labels, loss_kind)
            crossed = base is not None and _activation_pattern(net) != base
            flat[i] = orig - h
            fm = loss_only(net, batch, labels, loss_kind)
            crossed = crossed or (base is not None and _activation_pattern(net) != base)
            flat[i] = orig
            if crossed:
                kinks.append((name, int(i)))
                g[i] = np.nan
            else:
                g[i] = (fp - fm) / (2 * h)
        out[name] = g.reshape(p.shape)
    return out


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    """Largest per-tensor error, each scaled by that tensor's largest gradient.

    Entries that are NaN in ``numeric`` are skipped. A tensor whose gradients
    are all exactly zero on both sides contributes 0.
    """
    worst = 0.0
    for name, num in numeric.items():
        sel = ~np.isnan(num)
        if not sel.any():
            continue
        a, n = analytic[name][sel], num[sel]
        scale = max(np.abs(a).max(), np.abs(n).max())
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    name: str
    input_shape: tuple[int, ...]
    n_classes: int
    dense_params: int


PRESETS = {
    "small-mlp": Preset("small-mlp", (24,), 2, 72_449),
    "large-mlp": Preset("large-mlp", (3, 32, 32), 10, 3_676_682),
    "small-cnn": Preset("small-cnn", (3, 32, 32), 10, 94_538),
    "lenet5-caffe": Preset("lenet5-caffe", (1, 28, 28), 10, 431_080),
}


def _preset_layers(name: str) -> list[Layer]:
    if name == "small-mlp":
        return [Linear(24, 256), ReLU(), Linear(256, 256), ReLU(), Linear(256, 1)]
    if name == "large-mlp":
        return [Linear(3 * 32 * 32, 1024), ReLU(), Linear(1024, 512), ReLU(), Linear(512, 10)]
    if name == "small-cnn":
        return [
            Conv2d(3, 32), ReLU(), MaxPool2(),
            Conv2d(32, 64), ReLU(), MaxPool2(),
            Conv2d(64, 128), ReLU(), GlobalAvgPool(),
            Linear(128, 10),
        ]
    if name == "lenet5-caffe":
        return [
            Conv2d(1, 20, 5, 0), MaxPool2(),
            Conv2d(20, 50, 5, 0), MaxPool2(),
            Linear(800, 500), ReLU(), Linear(500, 10),
        ]
    raise ConfigurationError(f"unknown architecture {name!r}; expected one of {sorted(PRESETS)}")


def build_preset(name: str, rng: np.random.Generator | None = None) -> Network:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown architecture {name!r}; expected one of {sorted(PRESETS)}")
    net = Network(_preset_layers(name), PRESETS[name].input_shape, name=name)
    if rng is not None:
        net.init_params(rng)
    return net


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    checked: int
    kinks: int


def gradient_check(net: Network, batch, labels, *, h: float = 1e-5, max_coords: int | None = None,
                   rng: np.random.Generator | None = None, loss_kind: str | None = None,
                   skip_kinks: bool = False) -> GradCheck:
    """Compare analytic and central-difference gradients.

    With ``max_coords`` each tensor is checked on at most that many entries,
    drawn from ``rng``; otherwise every entry is checked. ``skip_kinks``
    leaves out entries whose stencil crosses a ReLU or max-pool switch.
    """
    _, analytic = loss_and_grad(net, batch, labels, loss_kind)
    coords = None
    if max_coords is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = {
            name: np.sort(rng.choice(p.size, size=min(max_coords, p.size), replace=False))
            for name, p in net.params.items()
        }
    kinks: list | None = [] if skip_kinks else None
    numeric = finite_diff_grad(net, batch, labels, h=h, loss_kind=loss_kind, coords=coords, kinks=kinks)
    checked = sum(int(np.count_nonzero(~np.isnan(v))) for v in numeric.values())
    return GradCheck(max_relative_error(analytic, numeric), checked, len(kinks or ()))


def preset_gradient_check(name: str, seed: int = 0, samples: int = 4, max_coords: int | None = 32,
                          h: float = 1e-5) -> GradCheck:
    """:func:`gradient_check` on a freshly initialised preset with random inputs.

    Kink-crossing entries are skipped and counted; everything else must match.
    """
    rng = np.random.default_rng([int(seed), 0x6C])
    net = build_preset(name, rng)
    batch = rng.standard_normal((samples, *net.input_shape))
    n_classes = PRESETS[name].n_classes
    labels = rng.integers(0, n_classes, size=samples)
    return gradient_check(net, batch, labels, h=h, max_coords=max_coords, rng=rng, skip_kinks=True)
