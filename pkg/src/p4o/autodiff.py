"""Reverse-mode automatic differentiation on numpy arrays.

This module is the numeric substrate for the whole agent: a small tape-based
autodiff engine exposing exactly the operations the encoder, the recurrent
world model and the loss functions need. Arrays are float64 in test/oracle
mode and float32 in training mode; every backward rule here is certified
against central finite differences by the test suite and by
`gradcheck.grad_check`.

Design constraints:
  - values are immutable once a node is created (graphs are rebuilt per step),
  - graph construction and backward are single threaded,
  - no GPU, no dynamic shapes, no broadcasting beyond trailing-axis bias adds.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from scipy.special import expit


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value enters a computation that forbids it."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forwards still run, backward() is impossible."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class DiffArray:
    """An n-dimensional numeric array participating in gradient computation.

    `data` is a numpy array (float32 or float64). `grad` has the same shape
    and is populated by `backward()` for every node with `requires_grad`.
    Leaf parameters keep accumulating into `grad` until `zero_grad()`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, *, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable[[], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- gradient machinery --------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar node; populates grad on every
        reachable node that requires gradients."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[DiffArray] = []
        seen: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[DiffArray], backward: Callable[[], None] | None) -> DiffArray:
    out = DiffArray(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ------------------------------------------------


def add(a: DiffArray, b) -> DiffArray:
    b = _wrap(b, a.dtype)
    data = a.data + b.data
    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))
    out = _node(data, (a, b), backward)
    return out


def sub(a: DiffArray, b) -> DiffArray:
    b = _wrap(b, a.dtype)
    data = a.data - b.data
    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(-_unbroadcast(g, b.shape))
    out = _node(data, (a, b), backward)
    return out


def mul(a: DiffArray, b) -> DiffArray:
    b = _wrap(b, a.dtype)
    data = a.data * b.data
    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))
    out = _node(data, (a, b), backward)
    return out


def div(a: DiffArray, b) -> DiffArray:
    b = _wrap(b, a.dtype)
    data = a.data / b.data
    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    out = _node(data, (a, b), backward)
    return out


def square(a: DiffArray) -> DiffArray:
    data = a.data * a.data
    def backward():
        if a.requires_grad:
            a.accumulate(out.grad * 2.0 * a.data)
    out = _node(data, (a,), backward)
    return out


def absolute(a: DiffArray) -> DiffArray:
    """|a|; subgradient at 0 is 0."""
    data = np.abs(a.data)
    def backward():
        if a.requires_grad:
            a.accumulate(out.grad * np.sign(a.data))
    out = _node(data, (a,), backward)
    return out


def exp(a: DiffArray) -> DiffArray:
    data = np.exp(a.data)
    def backward():
        if a.requires_grad:
            a.accumulate(out.grad * data)
    out = _node(data, (a,), backward)
    return out


def log(a: DiffArray) -> DiffArray:
    data = np.log(a.data)
    def backward():
        if a.requires_grad:
            a.accumulate(out.grad / a.data)
    out = _node(data, (a,), backward)
    return out


def tanh(a: DiffArray) -> DiffArray:
    data = np.tanh(a.data)
    def backward():
        if a.requires_grad:
            a.accumulate(out.grad * (1.0 - data * data))
    out = _node(data, (a,), backward)
    return out


def sigmoid(a: DiffArray) -> DiffArray:
    data = expit(a.data)  # stable for large |x|
    def backward():
        if a.requires_grad:
            a.accumulate(out.grad * data * (1.0 - data))
    out = _node(data, (a,), backward)
    return out


def relu(a: DiffArray) -> DiffArray:
    data = np.maximum(a.data, 0.0)
    def backward():
        if a.requires_grad:
            a.accumulate(out.grad * (a.data > 0))
    out = _node(data, (a,), backward)
    return out


def minimum(a: DiffArray, b: DiffArray) -> DiffArray:
    """Elementwise min; ties route the gradient to the first argument."""
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)
    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~take_a, b.shape))
    out = _node(data, (a, b), backward)
    return out


def maximum(a: DiffArray, b: DiffArray) -> DiffArray:
    """Elementwise max; ties route the gradient to the first argument."""
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)
    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~take_a, b.shape))
    out = _node(data, (a, b), backward)
    return out


def clip(a: DiffArray, lo: float, hi: float) -> DiffArray:
    """Clamp to [lo, hi]; gradient passes through the closed interval."""
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    def backward():
        if a.requires_grad:
            a.accumulate(out.grad * inside)
    out = _node(data, (a,), backward)
    return out


# -- shape ops ---------------------------------------------------------------


def reshape(a: DiffArray, shape) -> DiffArray:
    data = a.data.reshape(shape)
    def backward():
        if a.requires_grad:
            a.accumulate(out.grad.reshape(a.shape))
    out = _node(data, (a,), backward)
    return out


def concat(parts: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    def backward():
        g = out.grad
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                p.accumulate(g[tuple(idx)])
    out = _node(data, parts, backward)
    return out


def narrow(a: DiffArray, axis: int, start: int, length: int) -> DiffArray:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]
    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            a.accumulate(g)
    out = _node(data, (a,), backward)
    return out


def gather_rows(a: DiffArray, index: np.ndarray) -> DiffArray:
    """out[i] = a[i, index[i]] for a 2-d array; index is an int vector."""
    if a.data.ndim != 2 or index.ndim != 1 or index.shape[0] != a.data.shape[0]:
        raise DimensionError(f"gather_rows: array {a.shape} vs index {index.shape}")
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, index]
    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[rows, index] = out.grad
            a.accumulate(g)
    out = _node(data, (a,), backward)
    return out


# -- reductions --------------------------------------------------------------


def sum_(a: DiffArray, axis: int | None = None) -> DiffArray:
    data = a.data.sum(axis=axis)
    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))
    out = _node(np.asarray(data, dtype=a.dtype), (a,), backward)
    return out


def mean(a: DiffArray, axis: int | None = None) -> DiffArray:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


# -- linear algebra ----------------------------------------------------------


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)
    out = _node(data, (a, b), backward)
    return out


def linear(x: DiffArray, w: DiffArray, b: DiffArray) -> DiffArray:
    """x @ w.T + b for x of shape (B, n), w of shape (m, n), b of shape (m,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} vs weight {w.shape}")
    data = x.data @ w.data.T + b.data
    def backward():
        g = out.grad
        if x.requires_grad:
            x.accumulate(g @ w.data)
        if w.requires_grad:
            w.accumulate(g.T @ x.data)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))
    out = _node(data, (x, w, b), backward)
    return out


def affine2(x: DiffArray, wx: DiffArray, h: DiffArray, wh: DiffArray, b: DiffArray) -> DiffArray:
    """Fused x @ wx.T + h @ wh.T + b (one node per recurrent gate bank)."""
    if x.data.shape[1] != wx.data.shape[1] or h.data.shape[1] != wh.data.shape[1]:
        raise DimensionError(
            f"affine2: x {x.shape} wx {wx.shape} / h {h.shape} wh {wh.shape}")
    data = x.data @ wx.data.T + h.data @ wh.data.T + b.data
    def backward():
        g = out.grad
        if x.requires_grad:
            x.accumulate(g @ wx.data)
        if wx.requires_grad:
            wx.accumulate(g.T @ x.data)
        if h.requires_grad:
            h.accumulate(g @ wh.data)
        if wh.requires_grad:
            wh.accumulate(g.T @ h.data)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))
    out = _node(data, (x, wx, h, wh, b), backward)
    return out


# -- softmax family ----------------------------------------------------------


def softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    def backward():
        g = out.grad
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate(data * (g - dot))
    out = _node(data, (a,), backward)
    return out


def log_softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    def backward():
        g = out.grad
        if a.requires_grad:
            s = np.exp(data)
            a.accumulate(g - s * g.sum(axis=axis, keepdims=True))
    out = _node(data, (a,), backward)
    return out


# -- convolution and pooling -------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (C*9, B*H*W) patch matrix for a 3x3/pad-1 window,
    built from nine block copies (cheaper than a strided gather)."""
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    xpt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, 9, B, H, W), dtype=x.dtype)
    for idx in range(9):
        di, dj = divmod(idx, 3)
        cols[:, idx] = xpt[:, :, di:di + H, dj:dj + W]
    return cols.reshape(C * 9, B * H * W)


def conv2d(x: DiffArray, kernel: DiffArray) -> DiffArray:
    """2-d cross-correlation, kernel 3x3, stride 1, zero padding 1.

    x: (B, C, H, W), kernel: (O, C, 3, 3) -> (B, O, H, W). One GEMM over the
    im2col patch matrix per direction; the patch matrix is rebuilt in the
    backward pass so memory stays flat however deep the graph is.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    B, C, H, W = x.data.shape
    O, C2, kh, kw = kernel.data.shape
    if C2 != C:
        raise DimensionError(f"conv2d: input channels {x.shape} vs kernel {kernel.shape}")
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d: kernel must be 3x3, got {kernel.shape}")
    kmat = kernel.data.reshape(O, C * 9)
    out_data = (kmat @ _im2col(x.data)).reshape(O, B, H, W)
    out_data = np.ascontiguousarray(out_data.transpose(1, 0, 2, 3))

    def backward():
        gt = np.ascontiguousarray(out.grad.transpose(1, 0, 2, 3)).reshape(O, B * H * W)
        if kernel.requires_grad:
            dk = (gt @ _im2col(x.data).T).reshape(O, C, 3, 3)
            kernel.accumulate(dk)
        if x.requires_grad:
            dcols = (kmat.T @ gt).reshape(C, 9, B, H, W)
            dxp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
            dxpt = dxp.transpose(1, 0, 2, 3)
            for idx in range(9):
                di, dj = divmod(idx, 3)
                dxpt[:, :, di:di + H, dj:dj + W] += dcols[:, idx]
            x.accumulate(dxp[:, :, 1:-1, 1:-1])

    out = _node(out_data, (x, kernel), backward)
    return out


def maxpool2(x: DiffArray) -> DiffArray:
    """2x2 max pooling, stride 2, ceil division; odd edges are zero padded on
    the bottom/right. Gradient routes to the first maximal element of each
    window in row-major scan order; gradient landing on padding is dropped."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2: input must be 4-d, got {x.shape}")
    B, C, H, W = x.data.shape
    H2, W2 = (H + 1) // 2, (W + 1) // 2
    xp = x.data
    if (H % 2, W % 2) != (0, 0):
        xp = np.zeros((B, C, 2 * H2, 2 * W2), dtype=x.dtype)
        xp[:, :, :H, :W] = x.data
    windows = xp.reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2, W2, 4)
    arg = windows.argmax(axis=-1)
    data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    def backward():
        if x.requires_grad:
            g = np.zeros((B, C, H2, W2, 4), dtype=x.dtype)
            np.put_along_axis(g, arg[..., None], out.grad[..., None], axis=-1)
            g = g.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H2, 2 * W2)
            x.accumulate(g[:, :, :H, :W])
    out = _node(data, (x,), backward)
    return out


# -- helpers -----------------------------------------------------------------


def constant(data, dtype=np.float64) -> DiffArray:
    return DiffArray(np.asarray(data, dtype=dtype))


def parameter(data, name: str = "", dtype=np.float64) -> DiffArray:
    return DiffArray(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def zero_grads(params: Iterable[DiffArray]) -> None:
    for p in params:
        p.zero_grad()
