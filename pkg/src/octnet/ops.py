"""Primitive numeric kernels on NHWC numpy arrays.

Every function here is pure: inputs are never mutated. Convolutions are
cross-correlations (no kernel flip). ``same`` padding follows the usual
framework rule: output size ``ceil(in / stride)``, zeros split evenly with the
extra pixel on the bottom/right.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import NumericError, ShapeError, SpecError

Padding = Literal["valid", "same"]
Tensor = np.ndarray


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: Padding = "valid"

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "in_channels", "out_channels", "stride"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding not in ("valid", "same"):
            raise SpecError(f"unknown padding {self.padding!r}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh, _, _ = pad_amounts(h, self.kernel_h, self.stride, self.padding)
        ow, _, _ = pad_amounts(w, self.kernel_w, self.stride, self.padding)
        return oh, ow


def valid_output_dim(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def pad_amounts(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for one spatial axis."""
    if padding == "valid":
        out = valid_output_dim(size, kernel, stride)
        if out < 1:
            raise SpecError(
                f"kernel {kernel} with stride {stride} does not fit input size {size}"
            )
        return out, 0, 0
    if padding == "same":
        out = math.ceil(size / stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2, total - total // 2
    raise SpecError(f"unknown padding {padding!r}")


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(x))[0])
        raise NumericError(f"non-finite value in {what} at index {bad}")
    return x


def _require_rank(x: np.ndarray, rank: int, what: str):
    if x.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {x.shape}")


def _pad_hw(x, ph: tuple[int, int], pw: tuple[int, int], value=0.0):
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)), constant_values=value)


def _windows(xp, kh, kw, stride, oh, ow):
    """Yield ``(i, j, view)`` where view is the input tap at kernel offset (i, j)."""
    hi = (oh - 1) * stride + 1
    wi = (ow - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            yield i, j, xp[:, i:i + hi:stride, j:j + wi:stride, :]


def _conv_geometry(x, kh, kw, stride, padding):
    _, h, w, _ = x.shape
    oh, pt, pb = pad_amounts(h, kh, stride, padding)
    ow, pl, pr = pad_amounts(w, kw, stride, padding)
    return oh, ow, (pt, pb), (pl, pr)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: Padding = "valid") -> Tensor:
    _require_rank(x, 4, "conv2d input")
    _require_rank(kernel, 4, "conv2d kernel")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel shape {kernel.shape}")
    ConvSpec(kh, kw, cin, cout, stride, padding)
    oh, ow, ph, pw = _conv_geometry(x, kh, kw, stride, padding)
    xp = _pad_hw(x, ph, pw)
    out = np.zeros((x.shape[0], oh, ow, cout), dtype=np.result_type(x, kernel))
    for i, j, view in _windows(xp, kh, kw, stride, oh, ow):
        out += view @ kernel[i, j]
    if bias is not None:
        out += bias
    return out


def conv2d_backward(x: Tensor, kernel: Tensor, grad_out: Tensor, stride: int = 1,
                    padding: Padding = "valid") -> tuple[Tensor, Tensor, Tensor]:
    """Gradients ``(d_input, d_kernel, d_bias)`` of :func:`conv2d`."""
    kh, kw, cin, cout = kernel.shape
    oh, ow, ph, pw = _conv_geometry(x, kh, kw, stride, padding)
    xp = _pad_hw(x, ph, pw)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    g2 = grad_out.reshape(-1, cout)
    hi = (oh - 1) * stride + 1
    wi = (ow - 1) * stride + 1
    for i, j, view in _windows(xp, kh, kw, stride, oh, ow):
        dk[i, j] = view.reshape(-1, cin).T @ g2
        dxp[:, i:i + hi:stride, j:j + wi:stride, :] += grad_out @ kernel[i, j].T
    h, w = x.shape[1:3]
    dx = dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]
    return dx, dk, g2.sum(axis=0)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: Padding = "valid") -> Tensor:
    """Per-channel convolution; ``kernel`` is ``[kh, kw, C, 1]`` (depth multiplier 1)."""
    _require_rank(x, 4, "depthwise input")
    _require_rank(kernel, 4, "depthwise kernel")
    kh, kw, c, mult = kernel.shape
    if mult != 1 or x.shape[3] != c:
        raise ShapeError(f"depthwise input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    oh, ow, ph, pw = _conv_geometry(x, kh, kw, stride, padding)
    xp = _pad_hw(x, ph, pw)
    out = np.zeros((x.shape[0], oh, ow, c), dtype=np.result_type(x, kernel))
    for i, j, view in _windows(xp, kh, kw, stride, oh, ow):
        out += view * kernel[i, j, :, 0]
    if bias is not None:
        out += bias
    return out


def depthwise_conv2d_backward(x: Tensor, kernel: Tensor, grad_out: Tensor, stride: int = 1,
                              padding: Padding = "valid") -> tuple[Tensor, Tensor, Tensor]:
    kh, kw, c, _ = kernel.shape
    oh, ow, ph, pw = _conv_geometry(x, kh, kw, stride, padding)
    xp = _pad_hw(x, ph, pw)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    hi = (oh - 1) * stride + 1
    wi = (ow - 1) * stride + 1
    for i, j, view in _windows(xp, kh, kw, stride, oh, ow):
        dk[i, j, :, 0] = np.einsum("nhwc,nhwc->c", view, grad_out)
        dxp[:, i:i + hi:stride, j:j + wi:stride, :] += grad_out * kernel[i, j, :, 0]
    h, w = x.shape[1:3]
    dx = dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]
    return dx, dk, grad_out.sum(axis=(0, 1, 2))


def depthwise_separable_conv(x: Tensor, pointwise: Tensor, depthwise: Tensor,
                             order: str = "depthwise_first", stride: int = 1,
                             padding: Padding = "valid") -> Tensor:
    """Compose a 1x1 pointwise conv and a per-channel depthwise conv.

    ``pointwise_first`` maps Cin -> Cm with ``pointwise`` [1,1,Cin,Cm] and then
    filters each of the Cm channels with ``depthwise`` [kh,kw,Cm,1].
    ``depthwise_first`` filters the Cin input channels first (``depthwise`` is
    [kh,kw,Cin,1]) and then mixes them with ``pointwise`` [1,1,Cin,Cout].
    Stride and padding apply to the depthwise stage only.
    """
    _require_rank(pointwise, 4, "pointwise kernel")
    _require_rank(depthwise, 4, "depthwise kernel")
    if pointwise.shape[:2] != (1, 1):
        raise ShapeError(f"pointwise kernel must be 1x1, got {pointwise.shape}")
    if order == "pointwise_first":
        if pointwise.shape[3] != depthwise.shape[2]:
            raise ShapeError(
                f"channel chain mismatch: pointwise {pointwise.shape} -> depthwise {depthwise.shape}")
        y = conv2d(x, pointwise)
        return depthwise_conv2d(y, depthwise, stride=stride, padding=padding)
    if order == "depthwise_first":
        if depthwise.shape[2] != pointwise.shape[2]:
            raise ShapeError(
                f"channel chain mismatch: depthwise {depthwise.shape} -> pointwise {pointwise.shape}")
        y = depthwise_conv2d(x, depthwise, stride=stride, padding=padding)
        return conv2d(y, pointwise)
    raise SpecError(f"unknown separable order {order!r}")


def max_pool2d(x: Tensor, size: int, stride: int | None = None, padding: Padding = "valid") -> Tensor:
    _require_rank(x, 4, "max_pool2d input")
    stride = size if stride is None else stride
    if size < 1 or stride < 1:
        raise SpecError(f"pool size and stride must be >= 1, got {size}, {stride}")
    oh, ow, ph, pw = _conv_geometry(x, size, size, stride, padding)
    xp = _pad_hw(x, ph, pw, value=-np.inf)
    out = None
    for _, _, view in _windows(xp, size, size, stride, oh, ow):
        out = view.copy() if out is None else np.maximum(out, view)
    return out


def max_pool2d_backward(x: Tensor, out: Tensor, grad_out: Tensor, size: int,
                        stride: int | None = None, padding: Padding = "valid") -> Tensor:
    """Route each window's gradient to its first (row-major) maximal element."""
    stride = size if stride is None else stride
    oh, ow, ph, pw = _conv_geometry(x, size, size, stride, padding)
    xp = _pad_hw(x, ph, pw, value=-np.inf)
    dxp = np.zeros_like(xp)
    taken = np.zeros(out.shape, dtype=bool)
    hi = (oh - 1) * stride + 1
    wi = (ow - 1) * stride + 1
    for i, j, view in _windows(xp, size, size, stride, oh, ow):
        hit = (view == out) & ~taken
        taken |= hit
        dxp[:, i:i + hi:stride, j:j + wi:stride, :] += np.where(hit, grad_out, 0)
    h, w = x.shape[1:3]
    return dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    _require_rank(x, 2, "dense input")
    _require_rank(weights, 2, "dense weights")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense input shape {x.shape} incompatible with weights {weights.shape}")
    out = x @ weights
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"dense bias shape {bias.shape} does not match weights {weights.shape}")
        out = out + bias
    return out


def dense_backward(x: Tensor, weights: Tensor, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu6(x: Tensor) -> Tensor:
    return np.minimum(np.maximum(x, 0), 6)


def softmax(x: Tensor) -> Tensor:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "relu6":
        return relu6(x)
    if kind == "softmax":
        return softmax(x)
    if kind == "linear":
        return x
    raise SpecError(f"unknown activation {kind!r}")


def activation_backward(x: Tensor, y: Tensor, grad_out: Tensor, kind: str) -> Tensor:
    """Gradient w.r.t. the activation input; ``y`` is the forward output."""
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "relu6":
        return grad_out * ((x > 0) & (x < 6))
    if kind == "softmax":
        return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))
    if kind == "linear":
        return grad_out
    raise SpecError(f"unknown activation {kind!r}")
