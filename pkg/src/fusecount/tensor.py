"""Minimal reverse-mode autodiff engine on float64 numpy storage.

Every feature map, parameter and loss in this package is a ``Tensor``.
The op set is deliberately small: exactly the kernels the fusion and
counting networks need, each with a hand-written backward rule.  All
arithmetic is 64-bit so finite-difference gradient checks can run at
tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """N-dimensional float64 array with optional gradient tracking.

    ``data`` is stored row-major (C order).  ``grad`` stays ``None`` until a
    backward pass deposits into it; after ``backward()`` every tensor that
    participated in the loss graph and requires grad has a populated,
    same-shape ``grad`` buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # Most nodes receive exactly one contribution; adopting the buffer is
        # cheaper than zero-filling and adding.  ``owned`` promises the caller
        # allocated ``g`` fresh for this tensor alone; shared buffers (for
        # example an add fan-out) must keep the default copying path.
        if self.grad is None:
            self.grad = g if owned else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node.

        Without an explicit seed gradient the node must be a scalar (a loss).
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed gradient requires a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        # Iterative topological order; graphs are shallow but wide.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar.  Scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _promote(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(_promote(other), -1.0))

    def __rsub__(self, other):
        return add(_promote(other), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _promote(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires,
                  _parents=parents if requires else (),
                  _backward=backward if requires else None)


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), owned=True)

    return _make(out_data, (a, b), backward)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c, owned=True)

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data), owned=True)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data, owned=True)

    return _make(out_data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where clamped."""
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask, owned=True)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions and reshaping


def tensor_sum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy(), owned=True)

    return _make(out_data, (a,), backward)


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.data.shape).copy(), owned=True)

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.shape}")
    out_data = a.data.T.copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(out_data, (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + s)
                t._accumulate(g[tuple(index)])
            offset += s

    return _make(out_data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T, owned=True)
        if b.requires_grad:
            b._accumulate(a.data.T @ g, owned=True)

    return _make(out_data, (a, b), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis``; per-slice max is subtracted for stability."""
    rank = a.data.ndim
    if not -rank <= axis < rank:
        raise ShapeError(f"softmax axis {axis} out of range for rank {rank}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - inner), owned=True)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# Convolution and spatial ops


@dataclass
class ConvSpec:
    """Geometry of a 2-D convolution layer.

    ``has_relu`` folds the activation into the op, mirroring how the network
    diagrams annotate conv layers.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    has_relu: bool = False

    def __post_init__(self):
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be positive, got {self.dilation}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output size {oh}x{ow} < 1 for input {h}x{w} with {self}")
        return oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """2-D convolution of a [C, H, W] tensor.

    ``weight`` is [out_channels, in_channels, KH, KW]; ``bias`` is
    [out_channels].  Implemented as a strided im2col plus one matmul so the
    training loop stays usable on a CPU.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be [C, H, W], got shape {x.shape}")
    c, h, w = x.data.shape
    if c != spec.in_channels:
        raise ShapeError(
            f"conv2d: input has {c} channels but spec.in_channels={spec.in_channels}")
    kh, kw = spec.kernel
    if weight.data.shape != (spec.out_channels, spec.in_channels, kh, kw):
        raise ShapeError(
            f"conv2d: weight shape {weight.data.shape} != "
            f"({spec.out_channels}, {spec.in_channels}, {kh}, {kw})")
    if bias.data.shape != (spec.out_channels,):
        raise ShapeError(
            f"conv2d: bias shape {bias.data.shape} != ({spec.out_channels},)")

    oh, ow = spec.output_size(h, w)
    s, d, p = spec.stride, spec.dilation, spec.padding

    w2 = weight.data.reshape(spec.out_channels, c * kh * kw)

    if kh == 1 and kw == 1 and s == 1 and p == 0:
        # Pointwise conv is a plain channel mixing; skip im2col entirely.
        cols = x.data.reshape(c, h * w)
        pointwise = True
    else:
        if p > 0:
            xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=np.float64)
            xp[:, p:p + h, p:p + w] = x.data
        else:
            xp = x.data
        sc, sh, sw = xp.strides
        patches = np.lib.stride_tricks.as_strided(
            xp,
            shape=(c, kh, kw, oh, ow),
            strides=(sc, sh * d, sw * d, sh * s, sw * s),
            writeable=False,
        )
        cols = patches.reshape(c * kh * kw, oh * ow)
        pointwise = False

    pre = w2 @ cols
    pre += bias.data[:, None]
    pre = pre.reshape(spec.out_channels, oh, ow)
    if spec.has_relu:
        act_mask = pre > 0
        out_data = np.maximum(pre, 0.0)
    else:
        act_mask = None
        out_data = pre

    def backward(g):
        if spec.has_relu:
            g = g * act_mask
        g2 = g.reshape(spec.out_channels, oh * ow)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.data.shape), owned=True)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=1), owned=True)
        if x.requires_grad:
            dcols = w2.T @ g2
            if pointwise:
                x._accumulate(dcols.reshape(c, h, w), owned=True)
                return
            dpatch = dcols.reshape(c, kh, kw, oh, ow)
            dxp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=np.float64)
            for i in range(kh):
                ylo = i * d
                yhi = ylo + (oh - 1) * s + 1
                for j in range(kw):
                    xlo = j * d
                    xhi = xlo + (ow - 1) * s + 1
                    dxp[:, ylo:yhi:s, xlo:xhi:s] += dpatch[:, i, j]
            if p > 0:
                x._accumulate(np.ascontiguousarray(dxp[:, p:p + h, p:p + w]), owned=True)
            else:
                x._accumulate(dxp, owned=True)

    return _make(out_data, (x, weight, bias), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel of a [C, H, W] tensor ``factor`` times per axis."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 3:
        raise ShapeError(f"upsample_nearest input must be [C, H, W], got {x.shape}")
    if factor == 1:
        out_data = x.data.copy()
    else:
        out_data = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    c, h, w = x.data.shape

    def backward(g):
        if x.requires_grad:
            if factor == 1:
                x._accumulate(g)
            else:
                x._accumulate(g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),
                              owned=True)

    return _make(out_data, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only on the training path."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out_data = x.data * keep * scale

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * keep * scale, owned=True)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# Optimizer


def sgd_step(params: list[Tensor], lr: float) -> None:
    """One plain SGD update; clears gradients afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name if p.name else f"params[{i}]"
            raise ValueError(f"sgd_step: parameter '{label}' has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
