"""Float64 tensors, a recording tape for reverse-mode gradients, the
differentiable layer primitives of the regressor, and Adam.

Primitives are plain functions on :class:`Tensor`. When a :class:`Tape` is
active and an input requires gradients, the primitive appends its adjoint to
the tape; ``Tape.backward`` replays those adjoints in reverse order and
accumulates into the ``grad`` buffers of leaf tensors.
"""
from __future__ import annotations

import enum
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class Tensor:
    """N-d float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_on_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._on_tape = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Record of primitive applications, replayed backwards by :meth:`backward`.

    Usage::

        with Tape() as tape:
            loss = some_primitive(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        self.nodes.append(_Node(out, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise UsageError("backward needs a scalar loss")
        if not self.nodes or not any(n.out is loss for n in self.nodes):
            raise UsageError("loss was not produced on this tape; run the forward pass first")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._on_tape:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._on_tape = True
        tape.record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)
    return _record(np.array(x.data.sum()), (x,), vjp)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def vjp(g):
        return (np.full(x.shape, float(g) / n),)
    return _record(np.array(x.data.mean()), (x,), vjp)


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """sum(x * w) for a constant array ``w``; handy as a probe loss."""
    w = np.asarray(w, dtype=np.float64)

    def vjp(g):
        return (g * w,)
    return _record(np.array((x.data * w).sum()), (x,), vjp)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))
    return _record(np.concatenate([p.data for p in parts], axis=1), parts, vjp)


# ---------------------------------------------------------------- convolution

def _check_conv(x: Tensor, kernel: Tensor, bias: Tensor | None, ksize: int) -> None:
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv expects input [N,C,H,W] and kernel [K,C,kh,kw]")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    if kernel.shape[2:] != (ksize, ksize):
        raise ShapeError(f"expected a {ksize}x{ksize} kernel, got {kernel.shape[2:]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError("bias length must equal the number of kernels")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1; output is ceil(H/stride)."""
    if stride not in (1, 2):
        raise UsageError("stride must be 1 or 2")
    _check_conv(x, kernel, bias, 3)
    n, c, h, w = x.shape
    k = kernel.shape[0]
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)
    kmat = kernel.data.reshape(k, c * 9)
    out = (cols @ kmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(n, ho, wo, c, 3, 3)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, 1:h + 1, 1:w + 1]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, inputs, vjp)


def conv1x1(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    _check_conv(x, kernel, bias, 1)
    kmat = kernel.data[:, :, 0, 0]
    out = np.einsum("kc,nchw->nkhw", kmat, x.data)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def vjp(g):
        gx = np.einsum("kc,nkhw->nchw", kmat, g)
        gk = np.einsum("nkhw,nchw->kc", g, x.data)[:, :, None, None]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, inputs, vjp)


# ---------------------------------------------------------------- downsampling

class DownsampleKind(enum.Enum):
    AVERAGE_POOL = "avg"
    MAX_POOL = "max"
    STRIDED_CONV = "strided"


def _pad_even(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[2:]
    if h % 2 == 0 and w % 2 == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)), mode="edge")


def _unpad_even_grad(g: np.ndarray, h: int, w: int) -> np.ndarray:
    # adjoint of edge replication: fold the copied row/column back onto the edge
    if h % 2 == 0 and w % 2 == 0:
        return g
    g = g.copy()
    if h % 2:
        g[:, :, h - 1, :] += g[:, :, h, :]
    if w % 2:
        g[:, :, :, w - 1] += g[:, :, :, w]
    return np.ascontiguousarray(g[:, :, :h, :w])


def avg_pool2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    xp = _pad_even(x.data)
    hp, wp = xp.shape[2:]
    out = xp.reshape(n, c, hp // 2, 2, wp // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        gp = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (_unpad_even_grad(gp, h, w),)
    return _record(out, (x,), vjp)


def max_pool2x(x: Tensor) -> Tensor:
    """2x2 max pooling; ties send the gradient to the first row-major maximum."""
    n, c, h, w = x.shape
    xp = _pad_even(x.data)
    hp, wp = xp.shape[2:]
    blocks = xp.reshape(n, c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, hp // 2, wp // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gp = gb.reshape(n, c, hp // 2, wp // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp)
        return (_unpad_even_grad(gp, h, w),)
    return _record(out, (x,), vjp)


def downsample2x(x: Tensor, kind: DownsampleKind, kernel: Tensor | None = None,
                 bias: Tensor | None = None) -> Tensor:
    if kind is DownsampleKind.STRIDED_CONV:
        if kernel is None:
            raise UsageError("strided-convolution downsampling needs a kernel")
        return conv2d(x, kernel, bias, stride=2)
    if kernel is not None or bias is not None:
        raise UsageError(f"{kind.name} downsampling takes no kernel")
    if kind is DownsampleKind.AVERAGE_POOL:
        return avg_pool2x(x)
    return max_pool2x(x)


# ---------------------------------------------------------------- normalization / activation

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: Tensor,
               running_var: Tensor, train: bool, eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the running
    statistics are updated in place as ``momentum*old + (1-momentum)*batch``.
    Inference mode uses the running statistics only.
    """
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError("scale/shift must have one entry per channel")
    g_ = scale.data[None, :, None, None]
    if train:
        m = n * h * w
        if m < 2:
            raise UsageError("training-mode batch norm needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        running_mean.data[...] = momentum * running_mean.data + (1.0 - momentum) * mu
        running_var.data[...] = momentum * running_var.data + (1.0 - momentum) * var

        def vjp(g):
            gxhat = g * g_
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv[None, :, None, None] / m * (m * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data[None, :, None, None]) * inv[None, :, None, None]

        def vjp(g):
            return g * g_ * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    out = xhat * g_ + shift.data[None, :, None, None]
    return _record(out, (x, scale, shift), vjp)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0.0)))

    def vjp(g):
        return (g * np.where(pos, 1.0, out + alpha),)
    return _record(out, (x,), vjp)


# ---------------------------------------------------------------- parameters and Adam

@dataclass
class ModelParams:
    """Ordered named tensors with Adam moment buffers for the trainable ones."""

    entries: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    trainable: dict[str, bool] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value, requires_grad=trainable)
        self.entries[name] = tensor
        self.trainable[name] = trainable
        if trainable:
            self.m[name] = np.zeros_like(tensor.data)
            self.v[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries.items())

    def trainable_names(self) -> list[str]:
        return [k for k in self.entries if self.trainable[k]]

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (self.entries[k].grad if self.entries[k].grad is not None
                    else np.zeros_like(self.entries[k].data))
                for k in self.trainable_names()}

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for k, t in self.entries.items():
            out.add(k, t.data.copy(), self.trainable[k])
        out.m = {k: a.copy() for k, a in self.m.items()}
        out.v = {k: a.copy() for k, a in self.v.items()}
        out.t = self.t
        return out


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ModelParams:
    """One bias-corrected Adam update, in place. Non-trainable entries are left alone."""
    names = params.trainable_names()
    for name in names:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    params.t += 1
    c1 = 1.0 - beta1 ** params.t
    c2 = 1.0 - beta2 ** params.t
    for name in names:
        g = grads.get(name)
        if g is None:
            continue
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params

