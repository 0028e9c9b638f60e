"""Minimal reverse-mode autodiff over dense numpy arrays.

The graph is a tape of coarse-grained ops with hand-written backward
closures.  Training runs in float32; gradient checking switches params to
float64 (finite differences are unreliable at single precision).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an op's contract."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum leading extra dims
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()
        self.name = name

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph construction helpers -----------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other, self.dtype)

        def back(g):
            if self.requires_grad:
                self._accumulate_grad(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate_grad(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        def back(g):
            self._accumulate_grad(-g)

        return Tensor._make(-self.data, (self,), back)

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)

        def back(g):
            if self.requires_grad:
                self._accumulate_grad(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate_grad(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)

        def back(g):
            if self.requires_grad:
                self._accumulate_grad(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate_grad(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.shape)
                )

        return Tensor._make(self.data / other.data, (self, other), back)

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __pow__(self, p):
        assert np.isscalar(p)

        def back(g):
            self._accumulate_grad(g * p * self.data ** (p - 1))

        return Tensor._make(self.data ** p, (self,), back)

    def __matmul__(self, other):
        other = _as_tensor(other, self.dtype)
        if self.shape[-1] != other.shape[0 if other.ndim <= 2 else -2]:
            raise ShapeError(f"matmul: {self.shape} @ {other.shape}")

        def back(g):
            if self.requires_grad:
                if other.ndim == 1:
                    self._accumulate_grad(np.outer(g, other.data) if self.ndim == 2 else g * other.data)
                else:
                    self._accumulate_grad(_unbroadcast(g @ other.data.swapaxes(-1, -2), self.shape))
            if other.requires_grad:
                if self.ndim == 1:
                    other._accumulate_grad(np.outer(self.data, g) if other.ndim == 2 else g * self.data)
                else:
                    other._accumulate_grad(_unbroadcast(self.data.swapaxes(-1, -2) @ g, other.shape))

        return Tensor._make(self.data @ other.data, (self, other), back)

    # -- elementwise ----------------------------------------------------------
    def exp(self):
        out_data = np.exp(self.data)

        def back(g):
            self._accumulate_grad(g * out_data)

        return Tensor._make(out_data, (self,), back)

    def log(self):
        def back(g):
            self._accumulate_grad(g / self.data)

        return Tensor._make(np.log(self.data), (self,), back)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def back(g):
            self._accumulate_grad(g * 0.5 / out_data)

        return Tensor._make(out_data, (self,), back)

    def abs(self):
        def back(g):
            self._accumulate_grad(g * np.sign(self.data))

        return Tensor._make(np.abs(self.data), (self,), back)

    def relu(self):
        mask = self.data > 0

        def back(g):
            self._accumulate_grad(g * mask)

        return Tensor._make(self.data * mask, (self,), back)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def back(g):
            self._accumulate_grad(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), back)

    def tanh(self):
        out_data = np.tanh(self.data)

        def back(g):
            self._accumulate_grad(g * (1.0 - out_data * out_data))

        return Tensor._make(out_data, (self,), back)

    def clamp_min(self, c: float):
        mask = self.data > c

        def back(g):
            self._accumulate_grad(g * mask)

        return Tensor._make(np.maximum(self.data, c), (self,), back)

    # -- reductions & reshaping ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        def back(g):
            if axis is None:
                self._accumulate_grad(np.broadcast_to(g, self.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate_grad(np.broadcast_to(gg, self.shape).copy())

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def back(g):
            self._accumulate_grad(g.reshape(self.shape))

        return Tensor._make(self.data.reshape(shape), (self,), back)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)

        def back(g):
            self._accumulate_grad(g.transpose(inv))

        return Tensor._make(self.data.transpose(axes), (self,), back)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        def back(g):
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            np.add.at(self.grad, idx, g)

        return Tensor._make(self.data[idx], (self,), back)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


# -- free functions -------------------------------------------------------------

def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate_grad(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]

    def back(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate_grad(np.take(g, i, axis=axis))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate_grad(out_data * (g - dot))

    return Tensor._make(out_data, (x,), back)


def rownorm(x: Tensor, axis=-1, eps=0.0) -> Tensor:
    """x / ||x|| along `axis`. Raises on near-zero rows when eps == 0."""
    n = np.linalg.norm(x.data, axis=axis, keepdims=True)
    if eps == 0.0 and np.any(n < 1e-12):
        raise ValueError("rownorm: zero-length row")
    n = np.maximum(n, eps) if eps > 0 else n
    out_data = x.data / n

    def back(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate_grad((g - out_data * dot) / n)

    return Tensor._make(out_data, (x,), back)


def conv2d_valid(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Per-channel valid 2-D convolution of (H,W,C) with a fixed (kh,kw) kernel."""
    kh, kw = kernel.shape
    k = kernel.astype(x.dtype)
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(0, 1))
    out_data = np.einsum("hwcij,ij->hwc", win, k)

    def back(g):
        # dinput = full correlation of g with the 180-degree-rotated kernel
        gp = np.pad(g, ((kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(0, 1))
        x._accumulate_grad(np.einsum("hwcij,ij->hwc", gwin, k[::-1, ::-1]))

    return Tensor._make(out_data, (x,), back)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling over the leading two axes of (H,W,...); crops to even."""
    h, w = x.shape[0] - x.shape[0] % 2, x.shape[1] - x.shape[1] % 2
    xc = x[:h, :w]
    rest = xc.shape[2:]
    r = xc.reshape((h // 2, 2, w // 2, 2) + rest)
    return r.mean(axis=3).mean(axis=1)


def inv33(a: Tensor) -> Tensor:
    inv = np.linalg.inv(a.data)

    def back(g):
        a._accumulate_grad(-inv.T @ g @ inv.T)

    return Tensor._make(inv, (a,), back)
