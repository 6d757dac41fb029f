"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray and records the operations applied to
it. backward() on a result walks the recorded graph in reverse
topological order, routing gradients through a per-call map; leaf
tensors (parameters and inputs created with requires_grad=True)
accumulate into .grad, so backpropagating several losses that share a
forward pass sums their gradients exactly. The op set is what the
scoring models need: broadcast arithmetic, batched matmul, shape ops,
softmax, layer norm, GELU/ReLU, 3x3 convolution and max pooling.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        # _backward(g) returns one gradient (or None) per parent
        self._backward = None

    # ------------------------------------------------------------- basics

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _make(self, data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # --------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(g):
            return _unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)

        return self._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            scale = float(other)
            return self._make(self.data * scale, (self,), lambda g: (g * scale,))

        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(g):
            return (
                _unbroadcast(g * other.data, self.data.shape),
                _unbroadcast(g * self.data, other.data.shape),
            )

        return self._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data

        def backward(g):
            da = _unbroadcast(g @ b.swapaxes(-1, -2), a.shape)
            db = _unbroadcast(a.swapaxes(-1, -2) @ g, b.shape)
            return da, db

        return self._make(a @ b, (self, other), backward)

    # ---------------------------------------------------------- shape ops

    def reshape(self, shape):
        old_shape = self.data.shape
        return self._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old_shape),))

    def transpose(self, axes):
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        return self._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def broadcast_to(self, shape):
        old_shape = self.data.shape
        return self._make(
            np.broadcast_to(self.data, shape).copy(), (self,), lambda g: (_unbroadcast(g, old_shape),)
        )

    def __getitem__(self, idx):
        def backward(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            return (full,)

        return self._make(self.data[idx], (self,), backward)

    # --------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.data.shape).copy(),)

        return self._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------ nonlinearities

    def relu(self):
        return self._make(np.maximum(self.data, 0.0), (self,), lambda g: (g * (self.data > 0.0),))

    def gelu(self):
        """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

        def backward(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            return (g * (cdf + x * pdf),)

        return self._make(x * cdf, (self,), backward)

    def softmax(self):
        """Numerically stable softmax over the last axis.

        -inf logits are supported and yield exactly zero probability,
        which is what the attention mask relies on.
        """
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        out_data = exp / exp.sum(axis=-1, keepdims=True)

        def backward(g):
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            return ((g - inner) * out_data,)

        return self._make(out_data, (self,), backward)

    # ------------------------------------------------------------ backward

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))

        grad_map: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grad_map.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grad_map:
                    grad_map[key] = grad_map[key] + pg
                else:
                    grad_map[key] = pg


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learnable scale/shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x.data - mu) / sigma

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        ghat = g * gamma.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        return (
            (ghat - m1 - xhat * m2) / sigma,
            (g * xhat).sum(axis=axes),
            g.sum(axis=axes),
        )

    return x._make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return tensors[0]._make(out_data, tuple(tensors), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 1) -> Tensor:
    """2-D convolution, stride 1, via im2col + GEMM.
    x: (B,C,H,W), w: (O,C,K,K), b: (O,)."""
    batch, in_ch, height, width = x.data.shape
    out_ch, w_in_ch, kh, kw = w.data.shape
    if w_in_ch != in_ch:
        raise ValueError(f"conv2d channel mismatch: input {in_ch}, weight {w_in_ch}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = height + 2 * padding - kh + 1
    out_w = width + 2 * padding - kw + 1

    # (B,C,out_h,out_w,kh,kw) view -> (B*out_h*out_w, C*kh*kw) matrix
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * out_h * out_w, in_ch * kh * kw
    )
    w_mat = w.data.reshape(out_ch, in_ch * kh * kw)
    out_data = (cols @ w_mat.T + b.data).reshape(batch, out_h, out_w, out_ch)
    out_data = out_data.transpose(0, 3, 1, 2)

    def backward(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, out_ch)
        dw = (g_mat.T @ cols).reshape(w.data.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            # transposed convolution as a second im2col GEMM: correlate the
            # output gradient with the spatially flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
            g_view = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
            g_cols = np.ascontiguousarray(g_view.transpose(0, 2, 3, 1, 4, 5)).reshape(
                batch * height * width, out_ch * kh * kw
            )
            w_flip = w.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(
                out_ch * kh * kw, in_ch
            )
            dx = (g_cols @ w_flip).reshape(batch, height, width, in_ch).transpose(0, 3, 1, 2)
        return dx, dw, g.sum(axis=(0, 2, 3))

    return x._make(out_data, (x, w, b), backward)


def maxpool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping max pooling by `factor` along both spatial axes.

    Trailing rows/columns that do not fill a full window are dropped.
    Ties resolve to the first occurrence in window scan order.
    """
    batch, ch, height, width = x.data.shape
    out_h, out_w = height // factor, width // factor
    cropped = x.data[:, :, : out_h * factor, : out_w * factor]
    windows = (
        cropped.reshape(batch, ch, out_h, factor, out_w, factor)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, ch, out_h, out_w, factor * factor)
    )
    arg = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dcrop = (
            dwin.reshape(batch, ch, out_h, out_w, factor, factor)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, ch, out_h * factor, out_w * factor)
        )
        full = np.zeros_like(x.data)
        full[:, :, : out_h * factor, : out_w * factor] = dcrop
        return (full,)

    return x._make(out_data, (x,), backward)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Uniform init in +/- 1/sqrt(fan_in)."""
    limit = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
