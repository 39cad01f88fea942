"""Dense tensors with reverse-mode differentiation.

The op set is intentionally small: elementwise arithmetic, reductions, and
the structured image ops in :mod:`mkpn.ops` that the kernel prediction model
needs.  Data lives in numpy arrays.  float64 is the default and is what the
numerical checks run on; float32 is supported for faster training.

Every recorded operation keeps references to its parent tensors and a
backward closure.  ``backward()`` on a scalar walks the recording once in
reverse topological order.  Gradients accumulate additively, so parameters
must be zeroed explicitly between optimization steps.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "grad_enabled",
    "apply_op",
    "add_n",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ValueError):
    """A tensor holds NaN or Inf, which the data invariant forbids."""


class GraphError(RuntimeError):
    """backward() misuse: non-scalar root or an already consumed graph."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation paths)."""

    def __enter__(self) -> "no_grad":
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense n-dimensional array with an optional gradient accumulator.

    ``requires_grad=True`` marks a leaf parameter: it owns a persistent
    ``grad`` buffer that ``backward()`` adds into.  Tensors returned by
    recorded operations carry the graph linkage instead; their transient
    gradients live only inside the backward walk.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = _as_float_array(data, dtype)
        if arr.size and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward_fn = None
        self._consumed = False

    # ---- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # ---- graph walking -------------------------------------------------

    def trace(self) -> list:
        """All tensors reaching this one, topologically ordered (parents first).

        Each node appears exactly once; every node appears after all of its
        parents, so the reversed list visits nodes after their consumers.
        """
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = entered, 2 = emitted
        stack: list[Tensor] = [self]
        while stack:
            node = stack[-1]
            st = state.get(id(node), 0)
            if st == 0:
                state[id(node)] = 1
                for p in node._parents:
                    if state.get(id(p), 0) == 0:
                        stack.append(p)
            else:
                stack.pop()
                if st == 1:
                    state[id(node)] = 2
                    order.append(node)
        return order

    def backward(self) -> None:
        """Populate grads of all reachable parameters for this scalar loss.

        Raises :class:`GraphError` when called on a non-scalar or a second
        time on the same loss.  Parameters the loss does not depend on are
        left untouched (their grad stays as it was, zero after zero_grad).
        """
        if self.data.ndim != 0:
            raise GraphError("backward() expects a scalar loss")
        if self._consumed:
            raise GraphError("graph already consumed; rebuild the loss before calling backward again")
        self._consumed = True
        if not self.requires_grad:
            return  # constant loss: nothing reachable

        pending: dict[int, np.ndarray] = {}

        def deliver(t: "Tensor", g: np.ndarray) -> None:
            # Ownership convention: `g` is handed over to the receiver, so
            # accumulating in place is safe.
            if t._backward_fn is None:
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g
                return
            acc = pending.get(id(t))
            if acc is None:
                pending[id(t)] = g
            else:
                acc += g

        order = self.trace()
        deliver(self, np.ones((), dtype=self.data.dtype))
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is not None and parent.requires_grad:
                    deliver(parent, pg)

    # ---- elementwise arithmetic ---------------------------------------

    def _check_binary(self, other: "Tensor") -> None:
        if other.data.shape != self.data.shape:
            raise ShapeError(f"shape mismatch: {self.data.shape} vs {other.data.shape}")
        if other.data.dtype != self.data.dtype:
            raise ShapeError(f"dtype mismatch: {self.data.dtype} vs {other.data.dtype}")

    def __add__(self, other):
        if isinstance(other, Tensor):
            self._check_binary(other)
            return apply_op(self.data + other.data, (self, other), lambda g: (g.copy(), g))
        return apply_op(self.data + float(other), (self,), lambda g: (g,))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            self._check_binary(other)
            return apply_op(self.data - other.data, (self, other), lambda g: (g.copy(), -g))
        return apply_op(self.data - float(other), (self,), lambda g: (g,))

    def __rsub__(self, other):
        return apply_op(float(other) - self.data, (self,), lambda g: (-g,))

    def __neg__(self):
        return apply_op(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            self._check_binary(other)
            a, b = self.data, other.data
            return apply_op(a * b, (self, other), lambda g: (g * b, g * a))
        s = float(other)
        return apply_op(self.data * s, (self,), lambda g: (g * s,))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return self * (1.0 / float(other))

    # ---- elementwise functions ----------------------------------------

    def relu(self):
        """max(x, 0) with subgradient 0 at exactly 0."""
        x = self.data
        return apply_op(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),))

    def abs(self):
        """|x| with subgradient 0 at exactly 0 (sign convention)."""
        x = self.data
        return apply_op(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    # ---- reductions ----------------------------------------------------

    def sum(self):
        shape, dtype = self.data.shape, self.data.dtype
        out = np.asarray(self.data.sum(), dtype=dtype)
        return apply_op(out, (self,), lambda g: (np.full(shape, g, dtype=dtype),))

    def mean(self):
        shape, dtype = self.data.shape, self.data.dtype
        scale = 1.0 / self.data.size
        out = np.asarray(self.data.mean(), dtype=dtype)
        return apply_op(out, (self,), lambda g: (np.full(shape, g * scale, dtype=dtype),))


def apply_op(data: np.ndarray, parents: Sequence[Tensor],
             backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Build the result tensor of a differentiable operation.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    parent, in parent order.  The incoming ``out_grad`` may be reused for at
    most one returned gradient; all others must be freshly allocated, since
    the engine accumulates in place.  Recording is skipped when no parent
    participates in gradient flow or inside ``no_grad()``.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def add_n(tensors: Iterable[Tensor]) -> Tensor:
    """Sum of equally shaped tensors in one node (used for frame averaging)."""
    ts = list(tensors)
    if not ts:
        raise ValueError("add_n needs at least one tensor")
    first = ts[0]
    for t in ts[1:]:
        first._check_binary(t)
    acc = ts[0].data.copy()
    for t in ts[1:]:
        acc += t.data

    def backward(g):
        return (g,) + tuple(g.copy() for _ in ts[1:])

    return apply_op(acc, ts, backward)
