"""Builders for the four classifiers and the :class:`Network` container."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .constants import ARCHITECTURES, INPUT_SHAPE, NUM_CLASSES
from .errors import ParameterError, ShapeError
from .layers import (
    INFER, Activation, BatchNorm, Block, Conv2D, Dense, DepthwiseConv2D, Dropout, Flatten, Layer,
    MaxPool2D, Residual, SeparableConv2D, sequence_backward, sequence_forward, sequence_named,
    sequence_output_shape,
)


@dataclass
class ArchReport:
    name: str
    rows: list[dict]
    total_params: int
    trainable_params: int

    def to_text(self) -> str:
        head = ("layer", "kind", "description", "output", "params")
        body = [(r["path"], r["kind"], r["description"], "x".join(map(str, r["output_shape"])),
                 f"{r['params']:,}") for r in self.rows]
        widths = [max(len(str(c)) for c in col) for col in zip(head, *body)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths[:-1]) + f"  {{:>{widths[-1]}}}"
        lines = [f"{self.name}", fmt.format(*head), "-" * (sum(widths) + 2 * (len(widths) - 1))]
        lines += [fmt.format(*r) for r in body]
        lines.append(f"total params: {self.total_params:,}")
        lines.append(f"trainable params: {self.trainable_params:,}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "layers": self.rows, "total_params": self.total_params,
                           "trainable_params": self.trainable_params}, indent=2)


class Network:
    """An ordered stack of layers ending in a softmax over the class axis."""

    def __init__(self, name: str, layers: list[Layer], input_shape=INPUT_SHAPE,
                 num_classes: int = NUM_CLASSES, config: dict | None = None, seed: int = 0):
        self.name = name
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.config = dict(config or {})
        self.rng = np.random.default_rng(seed)
        out = self.output_shape()
        if out != (num_classes,):
            raise ShapeError(f"{name}: network output shape {out} != ({num_classes},)")

    def output_shape(self, in_shape=None):
        return sequence_output_shape(self.layers, in_shape or self.input_shape)

    def forward(self, x: np.ndarray, mode: str = INFER, rng: np.random.Generator | None = None):
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"{self.name} expects input (N, {', '.join(map(str, self.input_shape))}), "
                             f"got {x.shape}")
        return sequence_forward(self.layers, x, mode, rng if rng is not None else self.rng)

    def __call__(self, x, mode: str = INFER):
        return self.forward(x, mode)[0]

    def backward(self, grad: np.ndarray, caches, from_logits: bool = True):
        """Backpropagate; with ``from_logits`` ``grad`` is taken w.r.t. the pre-softmax logits."""
        layers = self.layers
        if from_logits and isinstance(layers[-1], Activation) and layers[-1].fn == "softmax":
            return sequence_backward(layers[:-1], grad, caches[:-1])
        return sequence_backward(layers, grad, caches)

    def named_parameters(self):
        yield from sequence_named(self.layers, "named_parameters")

    def named_buffers(self):
        yield from sequence_named(self.layers, "named_buffers")

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def iter_layers(self):
        """Depth-first ``(path, layer)`` over every layer, containers included."""
        def walk(layers, prefix):
            for i, layer in enumerate(layers):
                path = f"{prefix}{i}"
                yield path, layer
                if isinstance(layer, Block):
                    yield from walk(layer.layers, f"{path}.")
                elif isinstance(layer, Residual):
                    yield from walk(layer.branch, f"{path}.branch.")
                    yield from walk(layer.shortcut, f"{path}.shortcut.")
        yield from walk(self.layers, "")

    def blocks(self) -> list[Layer]:
        return [l for l in self.layers if isinstance(l, (Block, Residual))]


def param_count(net: Network) -> ArchReport:
    rows = []

    def walk(layers, prefix, in_shape):
        shape = in_shape
        for i, layer in enumerate(layers):
            path = f"{prefix}{i}"
            out = layer.output_shape(shape)
            own = sum(p.size for p in layer.params.values())
            rows.append({"path": path, "kind": layer.kind, "description": layer.describe(),
                         "output_shape": list(out), "params": own})
            if isinstance(layer, Block):
                walk(layer.layers, f"{path}.", shape)
            elif isinstance(layer, Residual):
                walk(layer.branch, f"{path}.branch.", shape)
                walk(layer.shortcut, f"{path}.shortcut.", shape)
            shape = out

    walk(net.layers, "", net.input_shape)
    total = sum(r["params"] for r in rows)
    return ArchReport(net.name, rows, total, total)


def predict(net: Network, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode probabilities and argmax labels (ties go to the lowest index)."""
    probs, _ = net.forward(np.asarray(batch), INFER)
    return probs, np.argmax(probs, axis=1)


# -- builders ------------------------------------------------------------------

def _w(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


def _head(in_shape, hidden: int, dropout: float, num_classes: int, rng, seed: int, hidden_act="relu"):
    flat = int(np.prod(in_shape))
    return [
        Flatten(),
        Dense(flat, hidden, hidden_act, rng=rng),
        Dropout(dropout, seed=seed),
        Dense(hidden, num_classes, rng=rng),
        Activation("softmax"),
    ]


def build_vanilla_cnn(width: float = 1.0, padding: str = "valid", seed: int = 0,
                      input_shape=INPUT_SHAPE, num_classes: int = NUM_CLASSES) -> Network:
    rng = np.random.default_rng(seed)
    c = input_shape[2]
    layers: list[Layer] = []
    for f in (64, 64, 128, 128):
        f = _w(f, width)
        layers += [Conv2D(c, f, 3, 1, padding, activation="relu", rng=rng), MaxPool2D(2, 2)]
        c = f
    feat = sequence_output_shape(layers, input_shape)
    hidden = _w(512, width)
    layers += [
        Flatten(),
        Dropout(0.5, seed=seed),
        Dense(int(np.prod(feat)), hidden, "relu", rng=rng),
        Dense(hidden, num_classes, rng=rng),
        Activation("softmax"),
    ]
    cfg = {"width": width, "padding": padding, "seed": seed, "input_shape": list(input_shape)}
    return Network("vanilla_cnn", layers, input_shape, num_classes, cfg, seed)


def _conv_bn(cin, cout, k, stride, act, rng, padding="same"):
    layers = [Conv2D(cin, cout, k, stride, padding, use_bias=False, rng=rng), BatchNorm(cout)]
    if act != "linear":
        layers.append(Activation(act))
    return layers


def build_xception(width: float = 1.0, seed: int = 0, separable_order: str = "depthwise_first",
                   input_shape=INPUT_SHAPE, num_classes: int = NUM_CLASSES) -> Network:
    """Xception backbone (entry, 8x middle, exit flow) with a flatten/dense head.

    ``separable_order`` selects the factorization order used by every
    separable convolution.
    """
    rng = np.random.default_rng(seed)

    def sep(cin, cout):
        return SeparableConv2D(cin, cout, 3, 1, "same", order=separable_order, rng=rng)

    c32, c64, c128, c256, c728 = (_w(c, width) for c in (32, 64, 128, 256, 728))
    c1024, c1536, c2048 = (_w(c, width) for c in (1024, 1536, 2048))
    cin = input_shape[2]
    layers: list[Layer] = [
        Block("entry_stem", _conv_bn(cin, c32, 3, 2, "relu", rng, "valid")
              + _conv_bn(c32, c64, 3, 1, "relu", rng, "valid")),
    ]
    c = c64
    for i, out in enumerate((c128, c256, c728), start=1):
        branch = [] if i == 1 else [Activation("relu")]
        branch += [sep(c, out), BatchNorm(out), Activation("relu"), sep(out, out), BatchNorm(out),
                   MaxPool2D(3, 2, "same")]
        shortcut = _conv_bn(c, out, 1, 2, "linear", rng)
        layers.append(Residual(f"entry_block{i}", branch, shortcut))
        c = out
    for i in range(1, 9):
        branch = []
        for _ in range(3):
            branch += [Activation("relu"), sep(c728, c728), BatchNorm(c728)]
        layers.append(Residual(f"middle_block{i}", branch))
    branch = [Activation("relu"), sep(c728, c728), BatchNorm(c728), Activation("relu"),
              sep(c728, c1024), BatchNorm(c1024), MaxPool2D(3, 2, "same")]
    layers.append(Residual("exit_block1", branch, _conv_bn(c728, c1024, 1, 2, "linear", rng)))
    layers.append(Block("exit_block2", [sep(c1024, c1536), BatchNorm(c1536), Activation("relu"),
                                        sep(c1536, c2048), BatchNorm(c2048), Activation("relu")]))
    feat = sequence_output_shape(layers, input_shape)
    layers += _head(feat, _w(1024, width), 0.2, num_classes, rng, seed)
    cfg = {"width": width, "seed": seed, "separable_order": separable_order,
           "input_shape": list(input_shape)}
    return Network("xception", layers, input_shape, num_classes, cfg, seed)


RESNET50_STAGES = ((64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2))


def bottleneck(name: str, cin: int, mid: int, cout: int, stride: int, rng) -> Residual:
    """1x1 reduce -> 3x3 -> 1x1 expand, projection shortcut when the shape changes."""
    branch = (_conv_bn(cin, mid, 1, stride, "relu", rng)
              + _conv_bn(mid, mid, 3, 1, "relu", rng)
              + _conv_bn(mid, cout, 1, 1, "linear", rng))
    shortcut = _conv_bn(cin, cout, 1, stride, "linear", rng) if (stride != 1 or cin != cout) else []
    return Residual(name, branch, shortcut)


def build_resnet50(width: float = 1.0, seed: int = 0, input_shape=INPUT_SHAPE,
                   num_classes: int = NUM_CLASSES) -> Network:
    rng = np.random.default_rng(seed)
    c = _w(64, width)
    layers: list[Layer] = [Block("stem", _conv_bn(input_shape[2], c, 7, 2, "relu", rng)
                                 + [MaxPool2D(3, 2, "same")])]
    for s, (mid, out, blocks, stride) in enumerate(RESNET50_STAGES, start=2):
        mid, out = _w(mid, width), _w(out, width)
        for b in range(1, blocks + 1):
            layers.append(bottleneck(f"conv{s}_block{b}", c, mid, out, stride if b == 1 else 1, rng))
            layers.append(Activation("relu"))
            c = out
    feat = sequence_output_shape(layers, input_shape)
    layers += _head(feat, _w(1024, width), 0.2, num_classes, rng, seed)
    cfg = {"width": width, "seed": seed, "input_shape": list(input_shape)}
    return Network("resnet50", layers, input_shape, num_classes, cfg, seed)


# expansion t, output channels c, repeats n, first stride s
MOBILENETV2_SETTINGS = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                        (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def inverted_residual(name: str, cin: int, cout: int, expansion: int, stride: int, rng) -> Layer:
    hidden = cin * expansion
    layers = (_conv_bn(cin, hidden, 1, 1, "relu6", rng)
              + [DepthwiseConv2D(hidden, 3, stride, "same", rng=rng), BatchNorm(hidden), Activation("relu6")]
              + _conv_bn(hidden, cout, 1, 1, "linear", rng))
    if stride == 1 and cin == cout:
        return Residual(name, layers)
    return Block(name, layers)


def build_mobilenetv2(width: float = 1.0, seed: int = 0, input_shape=INPUT_SHAPE,
                      num_classes: int = NUM_CLASSES) -> Network:
    rng = np.random.default_rng(seed)
    c = _w(32, width)
    layers: list[Layer] = [Block("stem", _conv_bn(input_shape[2], c, 3, 2, "relu6", rng))]
    k = 0
    for t, out, n, s in MOBILENETV2_SETTINGS:
        out = _w(out, width)
        for r in range(n):
            layers.append(inverted_residual(f"block_{k}", c, out, t, s if r == 0 else 1, rng))
            c = out
            k += 1
    last = _w(1280, width)
    layers.append(Block("top", _conv_bn(c, last, 1, 1, "relu6", rng)))
    feat = sequence_output_shape(layers, input_shape)
    layers += _head(feat, _w(1024, width), 0.2, num_classes, rng, seed)
    cfg = {"width": width, "seed": seed, "input_shape": list(input_shape)}
    return Network("mobilenetv2", layers, input_shape, num_classes, cfg, seed)


BUILDERS: dict[str, Callable[..., Network]] = {
    "vanilla_cnn": build_vanilla_cnn,
    "xception": build_xception,
    "resnet50": build_resnet50,
    "mobilenetv2": build_mobilenetv2,
}


def build(name: str, **kwargs) -> Network:
    if name not in ARCHITECTURES:
        raise ParameterError(f"unknown architecture {name!r}; choose from {', '.join(ARCHITECTURES)}")
    if "input_shape" in kwargs:
        kwargs["input_shape"] = tuple(kwargs["input_shape"])
    return BUILDERS[name](**kwargs)


def activation_pattern(block: Layer) -> list[str]:
    """Activation applied after each convolution of a block (``linear`` if none)."""
    layers = block.layers if isinstance(block, Block) else block.branch
    pattern = []
    for layer in layers:
        if isinstance(layer, (Conv2D, DepthwiseConv2D, SeparableConv2D)):
            pattern.append(getattr(layer, "activation", "linear"))
        elif isinstance(layer, Activation) and pattern:
            pattern[-1] = layer.fn
    return pattern
