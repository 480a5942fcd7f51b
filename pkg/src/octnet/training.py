"""Optimizers, the epoch loop with accuracy curves, and binary checkpoints."""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import (
    CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError,
    ParameterError, ShapeError, TrainingDivergedError,
)
from .layers import INFER, TRAIN, cross_entropy
from .models import Network, build

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    momentum: float = 0.9
    curve_path: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be > 0, got {self.lr}")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class CurvePoint:
    epoch: int
    train_acc: float
    train_loss: float
    val_acc: float
    val_loss: float


CURVE_HEADER = "epoch,train_acc,train_loss,val_acc,val_loss"


def curve_row(p: CurvePoint) -> str:
    return f"{p.epoch},{p.train_acc:.6f},{p.train_loss:.6f},{p.val_acc:.6f},{p.val_loss:.6f}"


# -- optimizers -----------------------------------------------------------------

class SGDMomentum:
    """``v <- mu*v - lr*g; p <- p + v``."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        _check_pairs(params, grads)
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v -= self.lr * g.astype(p.dtype, copy=False)
            p += v


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        _check_pairs(params, grads)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def _check_pairs(params, grads):
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} != gradient shape {g.shape}")


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr)
    return SGDMomentum(cfg.lr, cfg.momentum)


# -- training loop ------------------------------------------------------------------

BatchSource = Callable[[int], Iterable]


def evaluate(net: Network, batches: Iterable) -> tuple[float, float, int]:
    """Inference pass returning ``(accuracy, mean loss, n_samples)``."""
    correct = 0
    loss_sum = 0.0
    n = 0
    for b in batches:
        probs, _ = net.forward(b.images, INFER)
        loss, _ = cross_entropy(probs, b.labels)
        k = len(b.labels)
        correct += int((probs.argmax(1) == b.labels.argmax(1)).sum())
        loss_sum += loss * k
        n += k
    if n == 0:
        return 0.0, 0.0, 0
    return correct / n, loss_sum / n, n


def train_step(net: Network, images, labels, optimizer) -> tuple[float, int]:
    probs, caches = net.forward(images, TRAIN)
    if not np.isfinite(probs).all():
        return float("nan"), 0
    loss, grad = cross_entropy(probs, labels)
    _, grads = net.backward(grad, caches)
    names, params = zip(*net.named_parameters())
    optimizer.step(list(params), [grads[n] for n in names])
    return loss, int((probs.argmax(1) == labels.argmax(1)).sum())


def fit(net: Network, train_batches: BatchSource, val_batches: BatchSource | None,
        cfg: TrainConfig, on_epoch: Callable[[CurvePoint], None] | None = None):
    """Train for exactly ``cfg.epochs`` epochs.

    ``train_batches(epoch)`` / ``val_batches(epoch)`` return an iterable of
    batches for that epoch. Train accuracy/loss are sample-weighted running
    means over the epoch; validation is a full inference pass after each epoch.
    Returns ``(net, curves)``.
    """
    net.rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    curves: list[CurvePoint] = []
    curve_file = None
    if cfg.curve_path:
        Path(cfg.curve_path).parent.mkdir(parents=True, exist_ok=True)
        curve_file = open(cfg.curve_path, "w", newline="\n")
        curve_file.write(CURVE_HEADER + "\n")
        curve_file.flush()
    try:
        for epoch in range(1, cfg.epochs + 1):
            correct = 0
            seen = 0
            loss_sum = 0.0
            for b_i, batch in enumerate(train_batches(epoch), start=1):
                loss, hits = train_step(net, batch.images, batch.labels, opt)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch, b_i, loss)
                k = len(batch.labels)
                correct += hits
                seen += k
                loss_sum += loss * k
            train_acc = correct / seen if seen else 0.0
            train_loss = loss_sum / seen if seen else 0.0
            if val_batches is not None:
                val_acc, val_loss, _ = evaluate(net, val_batches(epoch))
            else:
                val_acc, val_loss = 0.0, 0.0
            point = CurvePoint(epoch, train_acc, train_loss, val_acc, val_loss)
            curves.append(point)
            log.info("epoch %d: train_acc=%.4f train_loss=%.4f val_acc=%.4f val_loss=%.4f",
                     epoch, train_acc, train_loss, val_acc, val_loss)
            if curve_file:
                curve_file.write(curve_row(point) + "\n")
                curve_file.flush()
            if on_epoch:
                on_epoch(point)
    finally:
        if curve_file:
            curve_file.close()
    if cfg.checkpoint_path:
        save_checkpoint(net, cfg, cfg.checkpoint_path)
    return net, curves


# -- checkpoints --------------------------------------------------------------------
#
# layout: b"OCTM" | u32 version | u32 header length | JSON header (utf-8)
#         | float32 little-endian tensors: parameters in declared order, then buffers

MAGIC = b"OCTM"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    architecture: str
    build_config: dict
    tensors: list[dict]
    train_config: dict | None
    rng_state: dict | None
    net: Network


def _tensor_entries(net: Network):
    entries = [("param", n, a) for n, a in net.named_parameters()]
    entries += [("buffer", n, a) for n, a in net.named_buffers()]
    return entries


def save_checkpoint(net: Network, cfg: TrainConfig | None, path: str | os.PathLike) -> Path:
    path = Path(path)
    entries = _tensor_entries(net)
    header = {
        "architecture": net.name,
        "build_config": net.config,
        "tensors": [{"group": g, "name": n, "shape": list(a.shape)} for g, n, a in entries],
        "train_config": asdict(cfg) if cfg is not None else None,
        "rng_state": net.rng.bit_generator.state,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(blob)))
            f.write(blob)
            for _, _, a in entries:
                f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read a checkpoint and rebuild its network; nothing is returned on any error."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint header")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if len(data) < 12 + hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    specs = header["tensors"]
    expected = 12 + hlen + 4 * sum(int(np.prod(t["shape"])) for t in specs)
    if len(data) < expected:
        raise CheckpointTruncatedError(f"{path}: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise CheckpointError(f"{path}: {len(data) - expected} trailing bytes")
    net = build(header["architecture"], **header["build_config"])
    targets = _tensor_entries(net)
    if [(g, n, list(a.shape)) for g, n, a in targets] != [(t["group"], t["name"], t["shape"]) for t in specs]:
        raise CheckpointShapeError(f"{path}: stored tensors do not match the {header['architecture']} layout")
    offset = 12 + hlen
    values = []
    for t in specs:
        count = int(np.prod(t["shape"]))
        values.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset)
                      .reshape(t["shape"]).astype(np.float32))
        offset += 4 * count
    _assign(net, targets, values)
    if header.get("rng_state"):
        net.rng.bit_generator.state = header["rng_state"]
    return Checkpoint(version, header["architecture"], header["build_config"], specs,
                      header.get("train_config"), header.get("rng_state"), net)


def _assign(net: Network, targets, values):
    params = dict(net.named_parameters())
    for (group, name, arr), val in zip(targets, values):
        if group == "param":
            params[name][...] = val
    # buffers are replaced (not updated in place) by batch norm, so walk the owners
    it = iter(v for (g, _, _), v in zip(targets, values) if g == "buffer")
    for _, layer in net.iter_layers():
        for key in list(layer.buffers):
            layer.buffers[key] = next(it)
