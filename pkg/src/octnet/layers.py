"""Trainable layers with explicit forward/backward caches.

``forward`` returns ``(output, cache)`` and ``backward`` consumes that cache and
returns ``(grad_input, param_grads)``. Layers never keep activations around
between calls; the only state they mutate is batch-norm running statistics.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Iterator, Sequence

import numpy as np

from . import ops
from .errors import ContractError, LabelError, NumericError, ParameterError, ShapeError

TRAIN = "train"
INFER = "infer"

_gen_counter = itertools.count(1)


@dataclass
class Cache:
    owner: "Layer"
    generation: int
    mode: str
    data: Any = None


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._generation = 0

    # -- shape algebra -------------------------------------------------
    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (batch axis excluded)."""
        return in_shape

    # -- execution -----------------------------------------------------
    def forward(self, x: np.ndarray, mode: str = INFER, rng: np.random.Generator | None = None):
        if mode not in (TRAIN, INFER):
            raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
        self._generation = next(_gen_counter)
        out, data = self._forward(x, mode, rng)
        return out, Cache(self, self._generation, mode, data)

    def backward(self, grad_out: np.ndarray, cache: Cache):
        if cache is None or not isinstance(cache, Cache) or cache.owner is not self:
            raise ContractError(f"{self.kind}: backward called without a cache from this layer")
        if cache.generation != self._generation:
            raise ContractError(f"{self.kind}: stale cache (another forward ran since)")
        return self._backward(grad_out, cache.data, cache.mode)

    def _forward(self, x, mode, rng):
        raise NotImplementedError

    def _backward(self, grad_out, data, mode):
        raise NotImplementedError

    # -- parameters ----------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.params.items()

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.buffers.items()

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def astype(self, dtype) -> "Layer":
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        return self

    def describe(self) -> str:
        return self.kind

    def __repr__(self):
        return f"<{type(self).__name__} {self.describe()}>"


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    return (rng.standard_normal(shape, dtype=np.float64) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: str = "valid", activation: str = "linear", use_bias: bool = True, rng=None):
        super().__init__()
        self.spec = ops.ConvSpec(kernel_size, kernel_size, in_channels, out_channels, stride, padding)
        self.activation = activation
        rng = _rng(rng)
        fan_in = kernel_size * kernel_size * in_channels
        self.params["kernel"] = _he_normal(rng, (kernel_size, kernel_size, in_channels, out_channels), fan_in)
        if use_bias:
            self.params["bias"] = np.zeros(out_channels, dtype=np.float32)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.spec.in_channels:
            raise ShapeError(f"conv expects (H, W, {self.spec.in_channels}), got {in_shape}")
        oh, ow = self.spec.output_hw(in_shape[0], in_shape[1])
        return (oh, ow, self.spec.out_channels)

    def _forward(self, x, mode, rng):
        z = ops.conv2d(x, self.params["kernel"], self.params.get("bias"), self.spec.stride, self.spec.padding)
        a = ops.activation(z, self.activation)
        return a, (x, z, a)

    def _backward(self, g, data, mode):
        x, z, a = data
        g = ops.activation_backward(z, a, g, self.activation)
        dx, dk, db = ops.conv2d_backward(x, self.params["kernel"], g, self.spec.stride, self.spec.padding)
        grads = {"kernel": dk}
        if "bias" in self.params:
            grads["bias"] = db
        return dx, grads

    def describe(self):
        s = self.spec
        return (f"conv {s.kernel_h}x{s.kernel_w}x{s.out_channels} /{s.stride} "
                f"{s.padding} {self.activation}")


class DepthwiseConv2D(Layer):
    kind = "depthwise_conv"

    def __init__(self, channels: int, kernel_size: int = 3, stride: int = 1, padding: str = "same",
                 activation: str = "linear", use_bias: bool = False, rng=None):
        super().__init__()
        self.spec = ops.ConvSpec(kernel_size, kernel_size, channels, channels, stride, padding)
        self.activation = activation
        rng = _rng(rng)
        self.params["kernel"] = _he_normal(rng, (kernel_size, kernel_size, channels, 1), kernel_size * kernel_size)
        if use_bias:
            self.params["bias"] = np.zeros(channels, dtype=np.float32)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.spec.in_channels:
            raise ShapeError(f"depthwise conv expects (H, W, {self.spec.in_channels}), got {in_shape}")
        oh, ow = self.spec.output_hw(in_shape[0], in_shape[1])
        return (oh, ow, self.spec.out_channels)

    def _forward(self, x, mode, rng):
        z = ops.depthwise_conv2d(x, self.params["kernel"], self.params.get("bias"),
                                 self.spec.stride, self.spec.padding)
        a = ops.activation(z, self.activation)
        return a, (x, z, a)

    def _backward(self, g, data, mode):
        x, z, a = data
        g = ops.activation_backward(z, a, g, self.activation)
        dx, dk, db = ops.depthwise_conv2d_backward(x, self.params["kernel"], g,
                                                   self.spec.stride, self.spec.padding)
        grads = {"kernel": dk}
        if "bias" in self.params:
            grads["bias"] = db
        return dx, grads

    def describe(self):
        s = self.spec
        return f"dwconv {s.kernel_h}x{s.kernel_w} /{s.stride} {s.padding} {self.activation}"


class SeparableConv2D(Layer):
    """Depthwise + pointwise convolution pair in either order.

    With ``order="depthwise_first"`` the kernel shapes are depthwise
    ``[k,k,Cin,1]`` and pointwise ``[1,1,Cin,Cout]``; with
    ``order="pointwise_first"`` they are pointwise ``[1,1,Cin,Cout]`` and
    depthwise ``[k,k,Cout,1]``.
    """
    kind = "separable_conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: str = "same", order: str = "depthwise_first", use_bias: bool = False, rng=None):
        super().__init__()
        if order not in ("depthwise_first", "pointwise_first"):
            raise ParameterError(f"unknown separable order {order!r}")
        self.order = order
        self.spec = ops.ConvSpec(kernel_size, kernel_size, in_channels, out_channels, stride, padding)
        rng = _rng(rng)
        k = kernel_size
        dw_ch = in_channels if order == "depthwise_first" else out_channels
        self.params["depthwise"] = _he_normal(rng, (k, k, dw_ch, 1), k * k)
        self.params["pointwise"] = _he_normal(rng, (1, 1, in_channels, out_channels), in_channels)
        if use_bias:
            self.params["bias"] = np.zeros(out_channels, dtype=np.float32)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.spec.in_channels:
            raise ShapeError(f"separable conv expects (H, W, {self.spec.in_channels}), got {in_shape}")
        oh, ow = self.spec.output_hw(in_shape[0], in_shape[1])
        return (oh, ow, self.spec.out_channels)

    def _forward(self, x, mode, rng):
        s, p = self.spec, self.params
        if self.order == "depthwise_first":
            mid = ops.depthwise_conv2d(x, p["depthwise"], None, s.stride, s.padding)
            out = ops.conv2d(mid, p["pointwise"])
        else:
            mid = ops.conv2d(x, p["pointwise"])
            out = ops.depthwise_conv2d(mid, p["depthwise"], None, s.stride, s.padding)
        if "bias" in p:
            out = out + p["bias"]
        return out, (x, mid)

    def _backward(self, g, data, mode):
        x, mid = data
        s, p = self.spec, self.params
        grads = {}
        if "bias" in p:
            grads["bias"] = g.sum(axis=(0, 1, 2))
        if self.order == "depthwise_first":
            dmid, grads["pointwise"], _ = ops.conv2d_backward(mid, p["pointwise"], g)
            dx, grads["depthwise"], _ = ops.depthwise_conv2d_backward(x, p["depthwise"], dmid, s.stride, s.padding)
        else:
            dmid, grads["depthwise"], _ = ops.depthwise_conv2d_backward(mid, p["depthwise"], g, s.stride, s.padding)
            dx, grads["pointwise"], _ = ops.conv2d_backward(x, p["pointwise"], dmid)
        return dx, grads

    def describe(self):
        s = self.spec
        return f"sepconv {s.kernel_h}x{s.kernel_w}x{s.out_channels} /{s.stride} {s.padding} {self.order}"


class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, size: int = 2, stride: int | None = None, padding: str = "valid"):
        super().__init__()
        self.size = size
        self.stride = size if stride is None else stride
        self.padding = padding
        ops.ConvSpec(size, size, 1, 1, self.stride, padding)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool expects (H, W, C), got {in_shape}")
        oh, _, _ = ops.pad_amounts(in_shape[0], self.size, self.stride, self.padding)
        ow, _, _ = ops.pad_amounts(in_shape[1], self.size, self.stride, self.padding)
        return (oh, ow, in_shape[2])

    def _forward(self, x, mode, rng):
        out = ops.max_pool2d(x, self.size, self.stride, self.padding)
        return out, (x, out)

    def _backward(self, g, data, mode):
        x, out = data
        return ops.max_pool2d_backward(x, out, g, self.size, self.stride, self.padding), {}

    def describe(self):
        return f"maxpool {self.size}x{self.size} /{self.stride} {self.padding}"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, activation: str = "linear", rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        rng = _rng(rng)
        self.params["weights"] = _he_normal(rng, (in_features, out_features), in_features)
        self.params["bias"] = np.zeros(out_features, dtype=np.float32)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def _forward(self, x, mode, rng):
        z = ops.dense(x, self.params["weights"], self.params["bias"])
        a = ops.activation(z, self.activation)
        return a, (x, z, a)

    def _backward(self, g, data, mode):
        x, z, a = data
        g = ops.activation_backward(z, a, g, self.activation)
        dx, dw, db = ops.dense_backward(x, self.params["weights"], g)
        return dx, {"weights": dw, "bias": db}

    def describe(self):
        return f"dense {self.in_features}->{self.out_features} {self.activation}"


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def _forward(self, x, mode, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def _backward(self, g, shape, mode):
        return g.reshape(shape), {}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` during training."""
    kind = "dropout"

    def __init__(self, p: float, seed: int = 0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._own_rng = np.random.default_rng(seed)

    def _forward(self, x, mode, rng):
        if mode == INFER or self.p == 0.0:
            return x, None
        rng = rng if rng is not None else self._own_rng
        keep = (rng.random(x.shape) >= self.p).astype(x.dtype) / x.dtype.type(1.0 - self.p)
        return x * keep, keep

    def _backward(self, g, keep, mode):
        return (g if keep is None else g * keep), {}

    def describe(self):
        return f"dropout p={self.p}"


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis except the last."""
    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.99):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)

    def output_shape(self, in_shape):
        if in_shape[-1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {in_shape}")
        return in_shape

    def _forward(self, x, mode, rng):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got input {x.shape}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        axes = tuple(range(x.ndim - 1))
        if mode == TRAIN:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(
                self.buffers["running_mean"].dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(
                self.buffers["running_var"].dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        return (gamma * xhat + beta).astype(x.dtype, copy=False), (xhat, inv_std)

    def _backward(self, g, data, mode):
        xhat, inv_std = data
        gamma = self.params["gamma"]
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if mode == TRAIN:
            m = g.size // g.shape[-1]
            dx = (gamma * inv_std / m) * (m * g - dbeta - xhat * dgamma)
        else:
            dx = g * gamma * inv_std
        return dx.astype(g.dtype, copy=False), {"gamma": dgamma, "beta": dbeta}


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str):
        super().__init__()
        if fn not in ("relu", "relu6", "softmax", "linear"):
            raise ParameterError(f"unknown activation {fn!r}")
        self.fn = fn

    def _forward(self, x, mode, rng):
        y = ops.activation(x, self.fn)
        return y, (x, y)

    def _backward(self, g, data, mode):
        x, y = data
        return ops.activation_backward(x, y, g, self.fn), {}

    def describe(self):
        return self.fn


# -- containers --------------------------------------------------------------

def sequence_output_shape(layers: Sequence[Layer], in_shape, where: str = ""):
    shape = tuple(in_shape)
    for i, layer in enumerate(layers):
        try:
            shape = layer.output_shape(shape)
        except ShapeError as e:
            raise ShapeError(f"layer {where}{i} ({layer.kind}): {e}") from None
    return shape


def sequence_forward(layers: Sequence[Layer], x, mode, rng, where: str = ""):
    caches = []
    for i, layer in enumerate(layers):
        try:
            x, c = layer.forward(x, mode, rng)
        except ShapeError as e:
            raise ShapeError(f"layer {where}{i} ({layer.kind}): {e}") from None
        caches.append(c)
    return x, caches


def sequence_backward(layers: Sequence[Layer], g, caches, prefix: str = ""):
    if caches is None or len(caches) != len(layers):
        raise ContractError("backward needs one cache per layer from the preceding forward")
    grads = {}
    for i in range(len(layers) - 1, -1, -1):
        g, lg = layers[i].backward(g, caches[i])
        for k, v in lg.items():
            grads[f"{prefix}{i}.{k}"] = v
    return g, grads


def sequence_named(layers: Sequence[Layer], attr: str, prefix: str = ""):
    for i, layer in enumerate(layers):
        for k, v in getattr(layer, attr)():
            yield f"{prefix}{i}.{k}", v


class Block(Layer):
    """A named plain sequence of layers (no shortcut)."""
    kind = "block"

    def __init__(self, name: str, layers: Sequence[Layer]):
        super().__init__()
        self.name = name
        self.layers = list(layers)

    def output_shape(self, in_shape):
        return sequence_output_shape(self.layers, in_shape, f"{self.name}.")

    def _forward(self, x, mode, rng):
        return sequence_forward(self.layers, x, mode, rng, f"{self.name}.")

    def _backward(self, g, caches, mode):
        return sequence_backward(self.layers, g, caches)

    def named_parameters(self):
        yield from sequence_named(self.layers, "named_parameters")

    def named_buffers(self):
        yield from sequence_named(self.layers, "named_buffers")

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def describe(self):
        return f"block {self.name}"


class Residual(Layer):
    """``branch(x) + shortcut(x)``; an empty shortcut is the identity."""
    kind = "residual_add"

    def __init__(self, name: str, branch: Sequence[Layer], shortcut: Sequence[Layer] = ()):
        super().__init__()
        self.name = name
        self.branch = list(branch)
        self.shortcut = list(shortcut)

    def output_shape(self, in_shape):
        b = sequence_output_shape(self.branch, in_shape, f"{self.name}.branch.")
        s = sequence_output_shape(self.shortcut, in_shape, f"{self.name}.shortcut.")
        if b != s:
            raise ShapeError(f"residual {self.name}: branch shape {b} != shortcut shape {s}")
        return b

    def _forward(self, x, mode, rng):
        yb, cb = sequence_forward(self.branch, x, mode, rng, f"{self.name}.branch.")
        ys, cs = sequence_forward(self.shortcut, x, mode, rng, f"{self.name}.shortcut.")
        if yb.shape != ys.shape:
            raise ShapeError(f"residual {self.name}: branch shape {yb.shape} != shortcut shape {ys.shape}")
        return yb + ys, (cb, cs)

    def _backward(self, g, data, mode):
        cb, cs = data
        # the sum node hands the same upstream gradient to both paths
        db, grads = sequence_backward(self.branch, g, cb, "branch.")
        ds, sgrads = sequence_backward(self.shortcut, g, cs, "shortcut.")
        grads.update(sgrads)
        return db + ds, grads

    def named_parameters(self):
        yield from sequence_named(self.branch, "named_parameters", "branch.")
        yield from sequence_named(self.shortcut, "named_parameters", "shortcut.")

    def named_buffers(self):
        yield from sequence_named(self.branch, "named_buffers", "branch.")
        yield from sequence_named(self.shortcut, "named_buffers", "shortcut.")

    def astype(self, dtype):
        for layer in self.branch + self.shortcut:
            layer.astype(dtype)
        return self

    def describe(self):
        return f"residual {self.name}"


# -- loss ------------------------------------------------------------------

def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy of softmax ``probs`` against one-hot ``labels``.

    Returns the loss and the fused gradient w.r.t. the softmax *logits*,
    ``(probs - labels) / N``.
    """
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} must be matching (N, K)")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-4):
        raise ContractError("probability rows must sum to 1")
    hot = labels == 1
    if not (np.all(hot.sum(axis=1) == 1) and np.all((labels == 0) | hot)):
        raise LabelError("each label row must be one-hot with exactly one true class")
    n = probs.shape[0]
    p_true = np.maximum(probs[hot], 1e-12)
    loss = float(-np.log(p_true.astype(np.float64)).sum() / n)
    return loss, (probs - labels) / n


def cross_entropy_grad_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the probabilities themselves."""
    return -labels / np.maximum(probs, 1e-12) / probs.shape[0]


# -- finite-difference check ----------------------------------------------------

def grad_check(layer: Layer, x: np.ndarray, eps: float = 1e-4, mode: str = TRAIN,
               probe: np.ndarray | None = None, seed: int = 0, atol: float = 0.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(probe * layer(x))`` with ``probe`` all ones
    by default. Both the input and every parameter are checked, each entry
    scored as ``|a - n| / max(|a|, |n|, 1e-8)``. Entries with ``|a - n| <= atol``
    score zero; leave ``atol`` at 0 unless some gradients are structurally zero
    and only roundoff remains. Run it on a float64 layer; dropout masks are
    replayed from ``seed`` on every call.
    """
    x = np.array(x, dtype=np.float64)

    def run(inp):
        out, cache = layer.forward(inp, mode, np.random.default_rng(seed))
        return out, cache

    out, cache = run(x)
    w = np.ones_like(out) if probe is None else np.asarray(probe, dtype=np.float64)
    dx, grads = layer.backward(w, cache)

    def objective(inp):
        o, _ = run(inp)
        val = float((o * w).sum())
        if not np.isfinite(val):
            raise NumericError("non-finite objective during finite differences")
        return val

    def rel(a, n):
        if abs(a - n) <= atol:
            return 0.0
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    worst = 0.0
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = objective(x)
        x[idx] = orig - eps
        fm = objective(x)
        x[idx] = orig
        worst = max(worst, rel(dx[idx], (fp - fm) / (2 * eps)))
    params = dict(layer.named_parameters())
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"missing gradient for parameter {name}")
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            fp = objective(x)
            p[idx] = orig - eps
            fm = objective(x)
            p[idx] = orig
            worst = max(worst, rel(grads[name][idx], (fp - fm) / (2 * eps)))
    return worst
