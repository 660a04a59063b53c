"""Minimal reverse-mode autodiff over dense float64 arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. The graph lives only
as long as the tensors do; callers rebuild it on every optimization step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar, each maps to a named op below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", _bw)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul_elementwise", a, b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul_elementwise", _bw)


def sub_scalar(a: Tensor, c: float) -> Tensor:
    def _bw(g):
        a._accumulate(g)

    return _make(a.data - c, (a,), "sub_scalar", _bw)


def scale(a: Tensor, c: float) -> Tensor:
    def _bw(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), "scale", _bw)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0

    def _bw(g):
        a._accumulate(g * pos)

    return _make(np.where(pos, a.data, 0.0), (a,), "relu", _bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)

    def _bw(g):
        a._accumulate(g * s * (1.0 - s))

    return _make(s, (a,), "sigmoid", _bw)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)

    def _bw(g):
        a._accumulate(g * (1.0 - t * t))

    return _make(t, (a,), "tanh", _bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def _bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), "reshape", _bw)


# ---------------------------------------------------------------------------
# reductions and losses


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    a = as_tensor(a)

    def _bw(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), "sum", _bw)


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / max(a.size, 1))


def l1_norm(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def _bw(g):
        a._accumulate(g * sign)

    return _make(np.asarray(np.abs(a.data).sum()), (a,), "l1_norm", _bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``).

    ``logits`` is (B, K); ``labels`` is a length-B int array or a single int
    broadcast to every row. ``smoothing`` mixes the one-hot target with the
    uniform distribution over the K classes.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("softmax_cross_entropy: smoothing must lie in [0, 1)")
    b, k = logits.shape
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (b,))
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"softmax_cross_entropy: labels out of range for {k} classes")
    logp = log_softmax_np(logits.data)
    rows = np.arange(b)
    loss = -(1.0 - smoothing) * logp[rows, labels].mean()
    if smoothing:
        loss -= smoothing * logp.mean()

    def _bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0 - smoothing
        if smoothing:
            p -= smoothing / k
        logits._accumulate(g * p / b)

    return _make(np.asarray(loss), (logits,), "softmax_cross_entropy", _bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", _bw)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Valid (unpadded) stride-1 cross-correlation.

    x: (B, C, H, W); w: (O, C, kh, kw); bias: (O,). Output (B, O, H-kh+1, W-kw+1).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    # (B, C, Ho, Wo, kh, kw) strided view; no copy until the tensordot
    cols = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    out = out.transpose(0, 3, 1, 2)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} filters")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def _bw(g):
        if w.requires_grad:
            w._accumulate(np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True)
            x._accumulate(gx)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(np.ascontiguousarray(out), parents, "conv2d", _bw)


# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass
class AdamState:
    learning_rate: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.9
    epsilon_stability: float = 1e-8
    step_count: int = 0
    first_moment: Optional[np.ndarray] = field(default=None, repr=False)
    second_moment: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def for_variable(cls, var: Tensor, **kw) -> "AdamState":
        st = cls(**kw)
        st.first_moment = np.zeros_like(var.data)
        st.second_moment = np.zeros_like(var.data)
        return st


def adam_step(var: Tensor, state: AdamState) -> None:
    """One bias-corrected Adam update of ``var`` in place; clears its grad."""
    if var.grad is None:
        raise ValueError("adam_step: variable has no gradient")
    if state.first_moment is None:
        state.first_moment = np.zeros_like(var.data)
        state.second_moment = np.zeros_like(var.data)
    if state.first_moment.shape != var.shape:
        raise ShapeError(f"adam_step: state shape {state.first_moment.shape} != variable {var.shape}")
    g = var.grad
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1 - b1) * g
    state.second_moment *= b2
    state.second_moment += (1 - b2) * g * g
    m_hat = state.first_moment / (1 - b1 ** state.step_count)
    v_hat = state.second_moment / (1 - b2 ** state.step_count)
    var.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon_stability)
    var.grad = None
