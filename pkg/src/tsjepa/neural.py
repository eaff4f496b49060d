"""A small float64 network library: sequential layers with hand-written
reverse-mode gradients, SGD/AdamW, step learning-rate decay and EMA tracking.

Layer interface::

    y, cache = layer.forward(x, train, rng)
    dx, grads = layer.backward(dy, cache)

`grads` maps parameter names to arrays shaped like ``layer.params``.
"""

from __future__ import annotations

import copy
import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / in_features)
        self.params["W"] = rng.uniform(-bound, bound, (out_features, in_features))
        self.params["b"] = np.zeros(out_features)

    def spec(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"dense expects (N, {self.in_features}), got {x.shape}")
        return x @ self.params["W"].T + self.params["b"], x

    def backward(self, dy, x):
        return dy @ self.params["W"], {"W": dy.T @ x, "b": dy.sum(axis=0)}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0, rng=None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.params["W"] = rng.uniform(-bound, bound, (out_channels, in_channels, kernel, kernel))
        self.params["b"] = np.zeros(out_channels)

    def spec(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}

    def output_shape(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"conv2d expects (N, {self.in_channels}, H, W), got {x.shape}")
        k, s, p = self.kernel, self.stride, self.padding
        n = x.shape[0]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        wmat = self.params["W"].reshape(self.out_channels, -1)
        y = (cols @ wmat.T + self.params["b"]).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
        return y, (x.shape, cols)

    def backward(self, dy, cache):
        x_shape, cols = cache
        n, c, h, w = x_shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = dy.shape[2], dy.shape[3]
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wmat = self.params["W"].reshape(self.out_channels, -1)
        grads = {"W": (dy2.T @ cols).reshape(self.params["W"].shape), "b": dy2.sum(axis=0)}
        dcols = (dy2 @ wmat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, grads


class BatchNorm(Layer):
    """Batch normalization over the batch (and spatial) axes.

    Train mode uses batch statistics and updates running estimates with
    `momentum`; eval mode uses the running estimates.
    """

    kind = "batchnorm"

    def __init__(self, num_features, momentum=0.1, eps=1e-5, affine=True):
        super().__init__()
        self.num_features, self.momentum, self.eps, self.affine = num_features, momentum, eps, affine
        if affine:
            self.params["gamma"] = np.ones(num_features)
            self.params["beta"] = np.zeros(num_features)
        self.buffers["running_mean"] = np.zeros(num_features)
        self.buffers["running_var"] = np.ones(num_features)

    def spec(self):
        return {"kind": self.kind, "features": self.num_features, "momentum": self.momentum,
                "eps": self.eps, "affine": self.affine}

    def _shape(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ValueError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")

    def forward(self, x, train=False, rng=None):
        if x.shape[1] != self.num_features:
            raise ValueError(f"batchnorm expects {self.num_features} features, got {x.shape[1]}")
        axes, bshape = self._shape(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // self.num_features
            unbiased = var * m / max(m - 1, 1)
            mom = self.momentum
            self.buffers["running_mean"] = (1 - mom) * self.buffers["running_mean"] + mom * mean
            self.buffers["running_var"] = (1 - mom) * self.buffers["running_var"] + mom * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        y = xhat
        if self.affine:
            y = xhat * self.params["gamma"].reshape(bshape) + self.params["beta"].reshape(bshape)
        return y, (xhat, inv_std, train, axes, bshape)

    def backward(self, dy, cache):
        xhat, inv_std, train, axes, bshape = cache
        grads = {}
        if self.affine:
            grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
            dxhat = dy * self.params["gamma"].reshape(bshape)
        else:
            dxhat = dy
        if not train:
            return dxhat * inv_std.reshape(bshape), grads
        m = dy.size // self.num_features
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        dx = inv_std.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate=0.0):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            return x, None
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy, mask):
        return (dy if mask is None else dy * mask), {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


def _build_layer(spec: dict, rng):
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["in"], spec["out"], rng)
    if kind == "conv2d":
        return Conv2d(spec["in"], spec["out"], spec.get("kernel", 3), spec.get("stride", 1),
                      spec.get("padding", 0), rng)
    if kind == "batchnorm":
        return BatchNorm(spec["features"], spec.get("momentum", 0.1), spec.get("eps", 1e-5),
                         spec.get("affine", True))
    if kind == "relu":
        return ReLU()
    if kind == "dropout":
        return Dropout(spec.get("rate", 0.0))
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


class Network:
    """An ordered stack of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    @classmethod
    def from_spec(cls, arch, rng=None):
        rng = rng or np.random.default_rng(0)
        return cls([_build_layer(s, rng) for s in arch])

    def spec(self):
        return [layer.spec() for layer in self.layers]

    def forward(self, x, train=False, rng=None):
        """Returns (output, cache). `cache` feeds :meth:`backward`."""
        caches = []
        h = np.asarray(x, dtype=float)
        for layer in self.layers:
            h, c = layer.forward(h, train, rng)
            caches.append(c)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("non-finite network output")
        return h, caches

    def __call__(self, x):
        return self.forward(x, train=False)[0]

    def backward(self, dy, cache):
        """Returns (per-layer gradient dicts, input gradient)."""
        if cache is None or len(cache) != len(self.layers):
            raise ValueError("backward needs the cache from a matching forward pass")
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, grads[i] = self.layers[i].backward(dy, cache[i])
        return grads, dy

    def parameters(self):
        """Flat list of parameter arrays (live references) in a fixed order."""
        return [layer.params[k] for layer in self.layers for k in sorted(layer.params)]

    def named_parameters(self):
        return [(f"{i}.{k}", layer.params[k]) for i, layer in enumerate(self.layers)
                for k in sorted(layer.params)]

    def buffers(self):
        return [layer.buffers[k] for layer in self.layers for k in sorted(layer.buffers)]

    def flat_grads(self, grads):
        return [g[k] for layer, g in zip(self.layers, grads) for k in sorted(layer.params)]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def copy(self):
        return copy.deepcopy(self)

    def load_state(self, other: "Network"):
        for layer, src in zip(self.layers, other.layers):
            for k in layer.params:
                layer.params[k][...] = src.params[k]
            for k in layer.buffers:
                layer.buffers[k] = np.array(src.buffers[k], copy=True)


# --------------------------------------------------------------------------- optimizers


class StepDecay:
    """Multiply the learning rate by `gamma` every `every` epochs."""

    def __init__(self, every=20, gamma=0.99):
        self.every, self.gamma = every, gamma

    def factor(self, epoch: int) -> float:
        return self.gamma ** (epoch // self.every)


class Optimizer:
    kind = "optimizer"

    def __init__(self, params, lr, weight_decay=0.0, schedule: StepDecay | None = None):
        if not lr > 0:
            raise ValueError("learning rate must be > 0")
        self.params = list(params)
        self.base_lr = lr
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule or StepDecay()
        self.steps = 0
        self.epoch = 0

    def end_epoch(self):
        self.epoch += 1
        self.lr = self.base_lr * self.schedule.factor(self.epoch)

    def _check(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match the optimizer's parameters")


class SGD(Optimizer):
    kind = "sgd"

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0, schedule=None):
        super().__init__(params, lr, weight_decay, schedule)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self._check(grads)
        self.steps += 1
        for p, g, v in zip(self.params, grads, self.velocity):
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            if self.momentum:
                v *= self.momentum
                v += g
                p -= self.lr * v
            else:
                p -= self.lr * g


class AdamW(Optimizer):
    kind = "adamw"

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, schedule=None):
        super().__init__(params, lr, weight_decay, schedule)
        self.betas, self.eps = betas, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self._check(grads)
        self.steps += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.steps, 1 - b2 ** self.steps
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ema_update(target: Network, online: Network, eta: float, buffers: bool = True):
    """In place: ``target <- eta * target + (1 - eta) * online``."""
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    for t, o in zip(target.layers, online.layers):
        for k in t.params:
            t.params[k] *= eta
            t.params[k] += (1 - eta) * o.params[k]
        if buffers:
            for k in t.buffers:
                t.buffers[k] = eta * t.buffers[k] + (1 - eta) * o.buffers[k]


# --------------------------------------------------------------------------- checks


def gradient_check(net: Network, x, rng_seed=0, train=True, h=1e-5, check_input=True):
    """Compare analytic gradients of ``sum(R * net(x))`` with central differences.

    Returns a dict ``name -> error`` where an error <= 1e-4 means every element
    satisfies ``|a - n| <= 1e-4 * max(|a|, |n|) + 1e-8``. Dropout masks are
    replayed from `rng_seed` for every evaluation.
    """
    x = np.asarray(x, dtype=float)
    out, _ = net.forward(x, train, np.random.default_rng(rng_seed))
    R = np.random.default_rng(rng_seed + 1).normal(size=out.shape)

    def loss():
        y, _ = net.forward(x, train, np.random.default_rng(rng_seed))
        return float(np.sum(y * R))

    y, cache = net.forward(x, train, np.random.default_rng(rng_seed))
    grads, dx = net.backward(R, cache)
    analytic = dict(zip([n for n, _ in net.named_parameters()], net.flat_grads(grads)))
    errors = {}
    for name, p in net.named_parameters():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            lp = loss()
            p[i] = old - h
            lm = loss()
            p[i] = old
            num[i] = (lp - lm) / (2 * h)
        errors[name] = _rel_error(analytic[name], num)
    if check_input:
        num = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = x[i]
            x[i] = old + h
            lp = loss()
            x[i] = old - h
            lm = loss()
            x[i] = old
            num[i] = (lp - lm) / (2 * h)
        errors["input"] = _rel_error(dx, num)
    return errors


def _random_layer(kind: str, shape: tuple, rng):
    """Spec for a layer of `kind` fed by `shape`; returns (spec, output shape)."""
    if kind == "dense":
        out = int(rng.integers(2, 6))
        return {"kind": "dense", "in": shape[1], "out": out}, (shape[0], out)
    if kind == "conv2d":
        n, c, h, w = shape
        k, s, p = int(rng.choice([1, 3])), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        out = int(rng.integers(1, 4))
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        return {"kind": "conv2d", "in": c, "out": out, "kernel": k, "stride": s, "padding": p}, (n, out, ho, wo)
    if kind == "batchnorm":
        return {"kind": "batchnorm", "features": shape[1], "affine": bool(rng.integers(0, 2))}, shape
    if kind == "dropout":
        return {"kind": "dropout", "rate": 0.3}, shape
    if kind == "flatten":
        return {"kind": "flatten"}, (shape[0], int(np.prod(shape[1:])))
    return {"kind": kind}, shape


def grad_check_cases(rng: np.random.Generator, n_compositions: int = 10):
    """Yields (name, arch, input) for every layer kind alone plus random 3-layer stacks."""
    singles = {
        "dense": ([{"kind": "dense", "in": 3, "out": 4}], (5, 3)),
        "conv2d-s1p0": ([{"kind": "conv2d", "in": 2, "out": 3, "kernel": 3, "stride": 1, "padding": 0}],
                        (2, 2, 5, 6)),
        "conv2d-s2p1": ([{"kind": "conv2d", "in": 2, "out": 3, "kernel": 3, "stride": 2, "padding": 1}],
                        (2, 2, 6, 7)),
        "batchnorm-2d": ([{"kind": "batchnorm", "features": 4}], (6, 4)),
        "batchnorm-4d": ([{"kind": "batchnorm", "features": 2}], (3, 2, 3, 4)),
        "batchnorm-noaffine": ([{"kind": "batchnorm", "features": 3, "affine": False}], (5, 3)),
        "relu": ([{"kind": "relu"}], (4, 5)),
        "dropout": ([{"kind": "dropout", "rate": 0.5}], (4, 5)),
        "flatten": ([{"kind": "flatten"}], (2, 2, 3, 3)),
    }
    for name, (arch, shape) in singles.items():
        yield name, arch, rng.normal(size=shape)
    for i in range(n_compositions):
        shape = (4, 2, 5, 5) if rng.integers(0, 2) else (6, 4)
        x = rng.normal(size=shape)
        arch = []
        for j in range(3):
            kinds = ["conv2d", "batchnorm", "relu", "dropout", "flatten"] if len(shape) == 4 else \
                ["dense", "batchnorm", "relu", "dropout"]
            if j == 0:
                kinds = kinds[:2]  # start with a parameterized layer
            spec, shape = _random_layer(str(rng.choice(kinds)), shape, rng)
            arch.append(spec)
        yield f"composition-{i}:" + "-".join(s["kind"] for s in arch), arch, x


def grad_check_suite(rng: np.random.Generator, n_compositions: int = 10):
    """Runs :func:`gradient_check` on every case. Returns rows (case, tensor, error)."""
    rows = []
    for name, arch, x in grad_check_cases(rng, n_compositions):
        net = Network.from_spec(arch, rng)
        for layer in net.layers:  # non-trivial affine parameters
            for k in layer.params:
                layer.params[k] += rng.normal(scale=0.1, size=layer.params[k].shape)
        for tensor, err in gradient_check(net, x, rng_seed=int(rng.integers(2**31))).items():
            rows.append((name, tensor, err))
    return rows


def _rel_error(a, b, atol=1e-8, rtol=1e-4):
    """Worst-case ratio of |a - b| to the allowance ``rtol * max(|a|, |b|) + atol``,
    rescaled by `rtol` so that a value <= rtol means every element passes."""
    allow = rtol * np.maximum(np.abs(a), np.abs(b)) + atol
    return float(np.max(np.abs(a - b) / allow) * rtol) if a.size else 0.0


# --------------------------------------------------------------------------- checkpoints

_MAGIC = b"TSJCKPT1"


def save_network(path, net: Network, meta: dict | None = None):
    """JSON header (architecture, shapes, metadata) then a little-endian float64 blob."""
    arrays = []
    entries = []
    for i, layer in enumerate(net.layers):
        for group, store in (("params", layer.params), ("buffers", layer.buffers)):
            for k in sorted(store):
                entries.append({"layer": i, "group": group, "name": k, "shape": list(store[k].shape)})
                arrays.append(np.asarray(store[k], dtype="<f8").ravel())
    header = json.dumps({"architecture": net.spec(), "tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode()
    blob = np.concatenate(arrays).tobytes() if arrays else b""
    path = Path(path)
    path.write_bytes(_MAGIC + struct.pack("<Q", len(header)) + header + blob)
    return path


def load_network(path) -> tuple[Network, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    net = Network.from_spec(header["architecture"])
    off = 0
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = data[off:off + n].reshape(e["shape"]).astype(float)
        off += n
        getattr(net.layers[e["layer"]], e["group"])[e["name"]] = arr
    return net, header["meta"]
