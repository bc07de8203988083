"""Dense tensor with reverse-mode automatic differentiation.

Design-by-run: every operation on tensors that require gradients records its
inputs and a backward closure; `Tensor.backward()` on a scalar walks the tape
in reverse topological order. Data lives in numpy arrays, float32 by default
(float64 is used by the finite-difference harness); operations preserve the
widest operand dtype.

Broadcasting is deliberately narrow: operands must have equal rank and each
axis must match or be 1 on one side (rank-0 scalars combine with anything).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GraphError, ParameterError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference hot path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_elementwise(sa: tuple, sb: tuple) -> None:
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) != len(sb):
        raise ShapeError(f"elementwise operands need equal rank or a scalar: {sa} vs {sb}")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"incompatible broadcast: {sa} vs {sb}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return grad.sum()
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array with an optional gradient record.

    Fields mirror the public contract: `data` (row-major float array),
    `requires_grad`, and `grad` (same shape as `data`, populated on leaves
    by `backward`; repeated backward calls accumulate).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = arr.astype(dtype, copy=False)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep their rank.
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=np.float32) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=np.float32) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- bookkeeping ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat as read-only."""
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        _check_elementwise(self.shape, other.shape)
        out_data = self.data + other.data

        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._result(out_data, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        _check_elementwise(self.shape, other.shape)
        out_data = self.data - other.data

        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return Tensor._result(out_data, (self, other), bwd)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other).__sub__(self)

    def __neg__(self) -> "Tensor":
        def bwd(g):
            return (-g,)

        return Tensor._result(-self.data, (self,), bwd)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        _check_elementwise(self.shape, other.shape)
        out_data = self.data * other.data
        a_data, b_data = self.data, other.data

        def bwd(g):
            return _unbroadcast(g * b_data, self.shape), _unbroadcast(g * a_data, other.shape)

        return Tensor._result(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def div(self, other, eps: float = 0.0) -> "Tensor":
        """Elementwise self / (other + eps); eps >= 0 guards the denominator."""
        if eps < 0:
            raise ParameterError(f"division guard eps must be >= 0, got {eps}")
        other = self._coerce(other)
        _check_elementwise(self.shape, other.shape)
        denom = other.data + np.asarray(eps, dtype=other.data.dtype)
        out_data = self.data / denom
        a_data = self.data

        def bwd(g):
            ga = g / denom
            gb = -g * a_data / (denom * denom)
            return _unbroadcast(ga, self.shape), _unbroadcast(gb, other.shape)

        return Tensor._result(out_data, (self, other), bwd)

    def __truediv__(self, other) -> "Tensor":
        return self.div(other, 0.0)

    # -- elementwise functions --------------------------------------------------

    def square(self) -> "Tensor":
        a = self.data

        def bwd(g):
            return (g * 2.0 * a,)

        return Tensor._result(a * a, (self,), bwd)

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)

        def bwd(g):
            return (g / (2.0 * y),)

        return Tensor._result(y, (self,), bwd)

    def exp(self) -> "Tensor":
        y = np.exp(self.data)

        def bwd(g):
            return (g * y,)

        return Tensor._result(y, (self,), bwd)

    def elu(self) -> "Tensor":
        # elu(x) = exp(min(x, 0)) + max(x, 0) - 1, whose derivative is
        # exactly exp(min(x, 0)): 1 on the positive side, exp(x) below.
        a = self.data
        emin = np.exp(np.minimum(a, 0))
        y = emin + np.maximum(a, 0) - 1.0

        def bwd(g):
            return (g * emin,)

        return Tensor._result(y.astype(a.dtype, copy=False), (self,), bwd)

    def elu1(self) -> "Tensor":
        """elu(x) + 1 fused as exp(min(x, 0)) + max(x, 0).

        The fused form stays strictly positive in float32 even where the
        composed elu(x) + 1 would round to zero (x <= -18 or so).
        """
        a = self.data
        emin = np.exp(np.minimum(a, 0))
        y = emin + np.maximum(a, 0)

        def bwd(g):
            return (g * emin,)

        return Tensor._result(y.astype(a.dtype, copy=False), (self,), bwd)

    def sigmoid(self) -> "Tensor":
        a = self.data
        y = np.empty_like(a)
        pos = a >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        y[~pos] = ea / (1.0 + ea)

        def bwd(g):
            return (g * y * (1.0 - y),)

        return Tensor._result(y, (self,), bwd)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        if lo > hi:
            raise ParameterError(f"clamp bounds out of order: lo={lo} > hi={hi}")
        a = self.data
        y = np.clip(a, lo, hi)
        mask = ((a >= lo) & (a <= hi)).astype(a.dtype)

        def bwd(g):
            return (g * mask,)

        return Tensor._result(y, (self,), bwd)

    # -- reductions ---------------------------------------------------------------

    def _check_axis(self, axis):
        if axis is not None and not (-self.ndim <= axis < self.ndim):
            raise ParameterError(f"axis {axis} out of range for shape {self.shape}")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        self._check_axis(axis)
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)

        return Tensor._result(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        self._check_axis(axis)
        out_data = self.data.mean(axis=axis, keepdims=keepdims, dtype=self.data.dtype)
        shape = self.shape
        n = self.size if axis is None else self.shape[axis]

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=False),)

        return Tensor._result(out_data, (self,), bwd)

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        """Max reduction; the gradient flows to the first maximal element."""
        self._check_axis(axis)
        a = self.data
        out_data = a.max(axis=axis, keepdims=keepdims)

        if axis is None:
            idx = int(np.argmax(a))

            def bwd(g):
                ga = np.zeros_like(a)
                ga.flat[idx] = np.asarray(g).reshape(())
                return (ga,)

        else:
            # np.argmax returns the first occurrence along the axis.
            arg = np.expand_dims(np.argmax(a, axis=axis), axis)

            def bwd(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                ga = np.zeros_like(a)
                np.put_along_axis(ga, arg, g, axis=axis)
                return (ga,)

        return Tensor._result(out_data, (self,), bwd)

    # -- shape manipulation ---------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        out_data = self.data.reshape(shape)

        def bwd(g):
            return (g.reshape(old_shape),)

        return Tensor._result(out_data, (self,), bwd)

    def slice_axis(self, axis: int, start: int, stop: int) -> "Tensor":
        """Slice [start:stop) along one axis."""
        if not 0 <= axis < self.ndim:
            raise ParameterError(f"axis {axis} out of range for shape {self.shape}")
        if not 0 <= start < stop <= self.shape[axis]:
            raise ShapeError(f"slice [{start}:{stop}] outside axis {axis} of {self.shape}")
        key = tuple(slice(None) if i != axis else slice(start, stop) for i in range(self.ndim))
        out_data = self.data[key]
        shape = self.shape

        def bwd(g):
            ga = np.zeros(shape, dtype=g.dtype)
            ga[key] = g
            return (ga,)

        return Tensor._result(out_data, (self,), bwd)

    def slice0(self, start: int, stop: int) -> "Tensor":
        """Contiguous slice along the leading axis."""
        return self.slice_axis(0, start, stop)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(int(i) for i in np.argsort(axes))
        out_data = self.data.transpose(axes)

        def bwd(g):
            return (g.transpose(inv),)

        return Tensor._result(out_data, (self,), bwd)

    # -- matrix product ---------------------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands: {a.shape} vs {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
        try:
            out_data = np.matmul(a, b)
        except ValueError as exc:
            raise ShapeError(f"matmul batch dimensions disagree: {a.shape} vs {b.shape}") from exc

        def bwd(g):
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._result(out_data, (self, other), bwd)

    def matmul(self, other) -> "Tensor":
        return self.__matmul__(other)

    # -- backward pass ---------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; populates `.grad` on leaves."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward on a tensor that is not connected to any gradient")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
