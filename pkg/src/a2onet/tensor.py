"""Dense tensors with reverse-mode differentiation.

A `Tensor` wraps a numpy array plus an optional gradient buffer. Every op
that produces a tensor from at least one grad-requiring input records its
backward closure on a tape (the graph of parent links); `Tensor.backward`
replays the tape in reverse topological order and then frees it, so each
forward pass owns exactly one disposable graph. No higher-order derivatives.

Convention notes:
  * conv-style ops live in `a2onet.nn`; this module is the scalar/array core.
  * default precision is float32; wrap code in `using_dtype(np.float64)` for
    finite-difference work.
  * every op checks its output for NaN/Inf and raises `NonFiniteError`
    rather than letting bad values propagate silently.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "using_dtype",
    "set_default_dtype",
    "default_dtype",
    "concat",
    "stack",
    "softmax",
    "sigmoid",
    "logit_clamped",
    "bce_with_logits",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_FINITE_CHECKS = True

LOGIT_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / data prep)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(np.sum(data)):
        # sum() is one cheap pass; any NaN/Inf element makes it non-finite
        bad = int(np.size(data) - np.isfinite(data).sum())
        raise NonFiniteError(f"{op} produced {bad} non-finite value(s)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_array(other, dtype) -> np.ndarray:
    return np.asarray(other.data if isinstance(other, Tensor) else other, dtype=dtype)


class Tensor:
    """N-d array of reals with optional reverse-mode gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=None) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=None) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def full(shape, value, requires_grad=False, dtype=None) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=dtype or _DEFAULT_DTYPE), requires_grad)

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def _record(self, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Attach graph metadata to self if grads are live. Returns self."""
        live = tuple(p for p in parents if p.requires_grad)
        if _GRAD_ENABLED and live:
            self.requires_grad = True
            self._parents = live
            self._backward = backward
        return self

    def backward(self, grad=None) -> None:
        """Reverse-mode pass from this tensor; frees the tape afterwards."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without grad argument needs a scalar")
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))

        # iterative topological sort over recorded nodes
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
            for p in node._parents:
                if p._backward is not None and id(p) not in visited:
                    stack.append((p, False))

        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            node._parents = ()
            node._backward = None
            if node is not self:
                node.grad = None  # keep grads on leaves only

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data + other.data)
            _check_finite(out.data, "add")

            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))

            return out._record((self, other), bwd)
        const = _as_array(other, self.data.dtype)
        out = Tensor(self.data + const)
        _check_finite(out.data, "add")

        def bwd_c(g, a=self):
            a._accumulate(_unbroadcast(g, a.data.shape))

        return out._record((self,), bwd_c)

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data)

        def bwd(g, a=self):
            a._accumulate(_unbroadcast(-g, a.data.shape))

        return out._record((self,), bwd)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data - other.data)
            _check_finite(out.data, "sub")

            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g, b.data.shape))

            return out._record((self, other), bwd)
        return self + (-_as_array(other, self.data.dtype))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data * other.data)
            _check_finite(out.data, "mul")

            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.data.shape))

            return out._record((self, other), bwd)
        const = _as_array(other, self.data.dtype)
        out = Tensor(self.data * const)
        _check_finite(out.data, "mul")

        def bwd_c(g, a=self, c=const):
            a._accumulate(_unbroadcast(g * c, a.data.shape))

        return out._record((self,), bwd_c)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data / other.data)
            _check_finite(out.data, "div")

            def bwd(g, a=self, b=other, o=out):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * o.data / b.data, b.data.shape))

            return out._record((self, other), bwd)
        return self * (1.0 / _as_array(other, self.data.dtype))

    def __rtruediv__(self, other):
        const = _as_array(other, self.data.dtype)
        out = Tensor(const / self.data)
        _check_finite(out.data, "div")

        def bwd(g, a=self, o=out):
            a._accumulate(_unbroadcast(-g * o.data / a.data, a.data.shape))

        return out._record((self,), bwd)

    def __pow__(self, exponent: float):
        p = float(exponent)
        out = Tensor(self.data**p)
        _check_finite(out.data, "pow")

        def bwd(g, a=self):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return out._record((self,), bwd)

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data))
        _check_finite(out.data, "exp")

        def bwd(g, a=self, o=out):
            a._accumulate(g * o.data)

        return out._record((self,), bwd)

    def log(self):
        out = Tensor(np.log(self.data))
        _check_finite(out.data, "log")

        def bwd(g, a=self):
            a._accumulate(g / a.data)

        return out._record((self,), bwd)

    def sqrt(self):
        out = Tensor(np.sqrt(self.data))
        _check_finite(out.data, "sqrt")

        def bwd(g, a=self, o=out):
            a._accumulate(g * (0.5 / o.data))

        return out._record((self,), bwd)

    def sin(self):
        out = Tensor(np.sin(self.data))

        def bwd(g, a=self):
            a._accumulate(g * np.cos(a.data))

        return out._record((self,), bwd)

    def abs(self):
        out = Tensor(np.abs(self.data))

        def bwd(g, a=self):
            a._accumulate(g * np.sign(a.data))

        return out._record((self,), bwd)

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0))

        def bwd(g, a=self):
            a._accumulate(g * (a.data > 0))

        return out._record((self,), bwd)

    def clamp(self, lo: float, hi: float):
        out = Tensor(np.clip(self.data, lo, hi))

        def bwd(g, a=self):
            a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

        return out._record((self,), bwd)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))
        _check_finite(out.data, "sum")
        shape = self.data.shape

        def bwd(g, a=self):
            if axis is None:
                a._accumulate(np.broadcast_to(g, shape).astype(a.data.dtype, copy=False))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, shape).astype(a.data.dtype, copy=False))

        return out._record((self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def max(self, axis=None, keepdims: bool = False):
        kd = self.data.max(axis=axis, keepdims=True)
        # subgradient split evenly among tied maxima
        mask = (self.data == kd).astype(self.data.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        if keepdims:
            out = Tensor(kd)
        elif axis is None:
            out = Tensor(kd.reshape(()))
        else:
            out = Tensor(np.squeeze(kd, axis=axis))

        def bwd(g, a=self, m=mask):
            if axis is None or keepdims:
                a._accumulate(m * g)
            else:
                a._accumulate(m * np.expand_dims(g, axis))

        return out._record((self,), bwd)

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape))
        orig = self.data.shape

        def bwd(g, a=self):
            a._accumulate(g.reshape(orig))

        return out._record((self,), bwd)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor(self.data.transpose(axes))
        inv = tuple(np.argsort(axes))

        def bwd(g, a=self):
            a._accumulate(g.transpose(inv))

        return out._record((self,), bwd)

    def __getitem__(self, key):
        out = Tensor(self.data[key])
        shape = self.data.shape

        def bwd(g, a=self):
            buf = np.zeros(shape, dtype=a.data.dtype)
            np.add.at(buf, key, g)
            a._accumulate(buf)

        return out._record((self,), bwd)

    def __matmul__(self, other: "Tensor"):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        out = Tensor(np.matmul(self.data, other.data))
        _check_finite(out.data, "matmul")

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.data.shape))

        return out._record((self, other), bwd)


# -- free functions ---------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return out._record(ts, bwd)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = Tensor(np.stack([t.data for t in ts], axis=axis))

    def bwd(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(ts, parts):
            if t.requires_grad:
                t._accumulate(part)

    return out._record(ts, bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along `axis`, stabilized by subtracting the (detached) max."""
    shifted = x + (-x.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(data)

    def bwd(g, a=x, o=out):
        a._accumulate(g * o.data * (1.0 - o.data))

    return out._record((x,), bwd)


def logit_clamped(x: Tensor, eps: float = LOGIT_EPS) -> Tensor:
    """log(x / (1-x)) with x clamped to [eps, 1-eps]; finite for any input.

    Inverse pair with `sigmoid` on [eps, 1-eps]. Gradient is zero outside
    the clamp range.
    """
    c = np.clip(x.data, eps, 1.0 - eps)
    out = Tensor(np.log(c) - np.log1p(-c))
    inside = (x.data >= eps) & (x.data <= 1.0 - eps)

    def bwd(g, a=x, c=c, m=inside):
        a._accumulate(g * m / (c * (1.0 - c)))

    return out._record((x,), bwd)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element binary cross-entropy, numerically stable, mean-reduced."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    data = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(data.mean())
    n = float(z.size)

    def bwd(g, a=logits, t=t):
        e = np.exp(-np.abs(a.data))
        p = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        a._accumulate(g * (p - t) / n)

    return out._record((logits,), bwd)
