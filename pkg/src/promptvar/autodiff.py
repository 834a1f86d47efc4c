"""Reverse-mode automatic differentiation over dense float64 arrays.

A small graph engine in the micrograd style: every operation returns a new
``Tensor`` holding forward values, its parents and a closure that maps the
upstream gradient to parent gradients.  ``Tensor.backward`` walks the graph
in reverse topological order from a scalar root and accumulates gradients
into every leaf that requires them.

All values are float64.  The module-level helpers (``elu``, ``l2_normalize``,
``concat``, ...) accept either a ``Tensor`` or a plain ``numpy.ndarray`` so
that the same forward code can run once with gradient tracking (training)
and once on raw arrays (inference), without duplicating the math.

Graphs are plain Python objects with no shared mutable state beyond the
tensors themselves; building and differentiating independent graphs from
separate threads is safe as long as no leaf tensor is shared between them.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

Array = np.ndarray

__all__ = [
    "Tensor",
    "concat",
    "elu",
    "exp",
    "grad_check",
    "l2_normalize",
    "log",
    "logsumexp",
    "softmax",
    "softmax_cross_entropy",
    "sqrt",
]


def _as_array(values: object) -> Array:
    return np.asarray(values, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to ``shape`` after a broadcast operation."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _elu_forward(values: Array) -> Array:
    # min() keeps expm1 away from large positive inputs that would overflow
    # inside np.where before the branch is discarded.
    return np.where(values > 0.0, values, np.expm1(np.minimum(values, 0.0)))


def _stable_softmax(values: Array, axis: int = -1) -> Array:
    shifted = values - values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Tensor:
    """Node in a reverse-mode differentiation graph.

    Leaves are built directly (``Tensor(values, requires_grad=True)``);
    interior nodes are produced by operations.  ``grad`` always has the same
    shape as ``values`` and reads as zeros until ``backward`` populates it.
    """

    __slots__ = ("values", "requires_grad", "_grad", "_parents", "_vjp", "_spent")

    # Make ndarray.__op__(tensor) return NotImplemented so Python falls back
    # to the reflected Tensor operators instead of coercing to object arrays.
    __array_ufunc__ = None

    def __init__(
        self,
        values: object,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Callable[[Array], tuple[Array, ...]] | None = None,
    ) -> None:
        self.values = _as_array(values)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._grad: Array | None = None
        self._parents = _parents
        self._vjp = _vjp
        self._spent = False

    # ------------------------------------------------------------------ meta
    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def grad(self) -> Array:
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, grad: Array) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        self._grad += grad

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    # -------------------------------------------------------------- backward
    def backward(self) -> None:
        """Accumulate gradients of this scalar into every requiring leaf.

        Raises if the root is not a scalar or if any interior node of the
        graph has already been consumed by a previous ``backward`` call;
        gradients of leaves shared across independently built graphs
        accumulate additively until ``zero_grad``.
        """
        if self.values.ndim != 0:
            raise ValueError(
                f"backward requires a scalar root, got shape {self.values.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        for node in order:
            if node._parents and node._spent:
                raise RuntimeError(
                    "backward was already called on this graph; rebuild the graph "
                    "or call zero_grad on the leaves and recompute"
                )
        self._accumulate(np.ones((), dtype=np.float64))
        for node in reversed(order):
            if node._vjp is None:
                continue
            node._spent = True
            grads = node._vjp(node.grad)
            for parent, grad in zip(node._parents, grads):
                if parent.requires_grad and grad is not None:
                    parent._accumulate(grad)

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other: object) -> "Tensor":
        other_t = _lift(other)
        a, b = self.values, other_t.values
        out = a + b

        def vjp(g: Array) -> tuple[Array, Array]:
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _node(out, (self, other_t), vjp)

    def __radd__(self, other: object) -> "Tensor":
        return _lift(other).__add__(self)

    def __sub__(self, other: object) -> "Tensor":
        other_t = _lift(other)
        a, b = self.values, other_t.values
        out = a - b

        def vjp(g: Array) -> tuple[Array, Array]:
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _node(out, (self, other_t), vjp)

    def __rsub__(self, other: object) -> "Tensor":
        return _lift(other).__sub__(self)

    def __mul__(self, other: object) -> "Tensor":
        other_t = _lift(other)
        a, b = self.values, other_t.values
        out = a * b

        def vjp(g: Array) -> tuple[Array, Array]:
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return _node(out, (self, other_t), vjp)

    def __rmul__(self, other: object) -> "Tensor":
        return _lift(other).__mul__(self)

    def __neg__(self) -> "Tensor":
        return self * (-1.0)

    def __truediv__(self, other: object) -> "Tensor":
        if isinstance(other, Tensor) or isinstance(other, np.ndarray):
            raise TypeError("elementwise tensor division is not supported; multiply by a reciprocal")
        return self * (1.0 / float(other))

    def __matmul__(self, other: object) -> "Tensor":
        other_t = _lift(other)
        return _matmul(self, other_t)

    def __rmatmul__(self, other: object) -> "Tensor":
        return _matmul(_lift(other), self)

    # ------------------------------------------------------------ reductions
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self.values
        out = a.sum(axis=axis, keepdims=keepdims)

        def vjp(g: Array) -> tuple[Array]:
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            g_full = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_full, a.shape).copy(),)

        return _node(out, (self,), vjp)

    def mean(self, axis: int | None = None) -> "Tensor":
        count = self.values.size if axis is None else self.values.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    # ------------------------------------------------------------- elementwise
    def exp(self) -> "Tensor":
        out = np.exp(self.values)

        def vjp(g: Array) -> tuple[Array]:
            return (g * out,)

        return _node(out, (self,), vjp)

    def log(self) -> "Tensor":
        if np.any(self.values <= 0.0):
            raise ValueError("log requires strictly positive inputs")
        out = np.log(self.values)
        a = self.values

        def vjp(g: Array) -> tuple[Array]:
            return (g / a,)

        return _node(out, (self,), vjp)

    def sqrt(self) -> "Tensor":
        if np.any(self.values < 0.0):
            raise ValueError("sqrt requires nonnegative inputs")
        out = np.sqrt(self.values)

        def vjp(g: Array) -> tuple[Array]:
            return (g * 0.5 / np.maximum(out, 1e-300),)

        return _node(out, (self,), vjp)

    def elu(self) -> "Tensor":
        """Exponential linear unit with unit saturation scale."""
        a = self.values
        out = _elu_forward(a)

        def vjp(g: Array) -> tuple[Array]:
            return (g * np.where(a > 0.0, 1.0, out + 1.0),)

        return _node(out, (self,), vjp)

    def clip(self, low: float, high: float) -> "Tensor":
        a = self.values
        out = np.clip(a, low, high)

        def vjp(g: Array) -> tuple[Array]:
            return (g * ((a >= low) & (a <= high)),)

        return _node(out, (self,), vjp)

    def reshape(self, *shape: int) -> "Tensor":
        a = self.values
        out = a.reshape(*shape)

        def vjp(g: Array) -> tuple[Array]:
            return (g.reshape(a.shape),)

        return _node(out, (self,), vjp)

    def transpose(self) -> "Tensor":
        if self.values.ndim != 2:
            raise ValueError(f"transpose expects a matrix, got shape {self.shape}")
        out = self.values.T.copy()

        def vjp(g: Array) -> tuple[Array]:
            return (g.T,)

        return _node(out, (self,), vjp)

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def _lift(value: object) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _node(values: Array, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Build an interior node, collapsing to a constant when no parent needs grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(values, _parents=parents, _vjp=vjp)
    return Tensor(values)


def _matmul(a_t: Tensor, b_t: Tensor) -> Tensor:
    a, b = a_t.values, b_t.values
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul supports 1-D and 2-D operands, got {a.ndim}-D @ {b.ndim}-D")
    out = a @ b

    def vjp(g: Array) -> tuple[Array, Array]:
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return g @ b.T, np.outer(a, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b), a.T @ g
        return g * b, g * a

    return _node(out, (a_t, b_t), vjp)


# --------------------------------------------------------------------- duals
def elu(x: Tensor | Array) -> Tensor | Array:
    """Exponential linear unit, for graph tensors or plain arrays."""
    if isinstance(x, Tensor):
        return x.elu()
    return _elu_forward(_as_array(x))


def exp(x: Tensor | Array) -> Tensor | Array:
    if isinstance(x, Tensor):
        return x.exp()
    return np.exp(_as_array(x))


def log(x: Tensor | Array) -> Tensor | Array:
    if isinstance(x, Tensor):
        return x.log()
    x = _as_array(x)
    if np.any(x <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    return np.log(x)


def sqrt(x: Tensor | Array) -> Tensor | Array:
    if isinstance(x, Tensor):
        return x.sqrt()
    x = _as_array(x)
    if np.any(x < 0.0):
        raise ValueError("sqrt requires nonnegative inputs")
    return np.sqrt(x)


def concat(parts: Sequence[Tensor | Array], axis: int = 0) -> Tensor | Array:
    """Concatenate along ``axis``; differentiable when any part is a Tensor."""
    if not parts:
        raise ValueError("concat requires at least one part")
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate([_as_array(p) for p in parts], axis=axis)
    tensors = tuple(_lift(p) for p in parts)
    arrays = [t.values for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Array) -> tuple[Array, ...]:
        slicer = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(slicer)])
        return tuple(pieces)

    return _node(out, tensors, vjp)


def l2_normalize(x: Tensor | Array) -> Tensor | Array:
    """Scale a vector, or each row of a matrix, to unit Euclidean norm.

    Raises ``ValueError`` on any zero-norm input row, where the direction
    is undefined.
    """
    if isinstance(x, Tensor):
        a = x.values
        if a.ndim not in (1, 2):
            raise ValueError("l2_normalize expects a vector or a matrix of row vectors")
        norms = np.linalg.norm(a, axis=-1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("l2_normalize is undefined for zero-norm input")
        out = a / norms

        def vjp(g: Array) -> tuple[Array]:
            inner = (g * out).sum(axis=-1, keepdims=True)
            return ((g - inner * out) / norms,)

        return _node(out, (x,), vjp)

    a = _as_array(x)
    if a.ndim not in (1, 2):
        raise ValueError("l2_normalize expects a vector or a matrix of row vectors")
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("l2_normalize is undefined for zero-norm input")
    return a / norms


def logsumexp(x: Tensor | Array, axis: int | None = None) -> Tensor | Array:
    """Numerically stable log-sum-exp via max subtraction."""
    if not isinstance(x, Tensor):
        a = _as_array(x)
        m = a.max(axis=axis, keepdims=True)
        out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
        return out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    a = x.values
    m = a.max(axis=axis, keepdims=True)
    shifted_exp = np.exp(a - m)
    denom = shifted_exp.sum(axis=axis, keepdims=True)
    out_keep = np.log(denom) + m
    out = out_keep.reshape(()) if axis is None else np.squeeze(out_keep, axis=axis)
    soft = shifted_exp / denom

    def vjp(g: Array) -> tuple[Array]:
        if axis is None:
            return (g * soft,)
        return (np.expand_dims(g, axis) * soft,)

    return _node(out, (x,), vjp)


def softmax(logits: Array, axis: int = -1) -> Array:
    """Stable softmax over plain arrays (max is subtracted before exp)."""
    return _stable_softmax(_as_array(logits), axis=axis)


def softmax_cross_entropy(logits: Tensor | Array, label: int) -> Tensor | Array:
    """Negative log softmax probability of ``label`` for a 1-D logit vector.

    Stable under large logits: the row maximum is subtracted before
    exponentiation.  Requires at least two classes and a label inside
    ``[0, n_classes)``.
    """
    values = logits.values if isinstance(logits, Tensor) else _as_array(logits)
    if values.ndim != 1:
        raise ValueError(f"softmax_cross_entropy expects a 1-D logit vector, got shape {values.shape}")
    n = values.shape[0]
    if n < 2:
        raise ValueError("softmax_cross_entropy requires at least two classes")
    label = int(label)
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    m = values.max()
    shifted = values - m
    lse = np.log(np.exp(shifted).sum())
    loss = lse - shifted[label]
    if not isinstance(logits, Tensor):
        return np.float64(loss)
    probs = np.exp(shifted - lse)

    def vjp(g: Array) -> tuple[Array]:
        grad = probs.copy()
        grad[label] -= 1.0
        return (g * grad,)

    return _node(np.asarray(loss), (logits,), vjp)


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Array,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a single Tensor to a scalar Tensor, rebuilding its graph
    on every call.  Per coordinate the error is
    ``|analytic - central| / max(1, |analytic|)``.
    """
    point = _as_array(point).copy()
    leaf = Tensor(point, requires_grad=True)
    f(leaf).backward()
    analytic = leaf.grad
    worst = 0.0
    it = np.nditer(point, flags=["multi_index"], op_flags=["readonly"])
    for _ in it:
        idx = it.multi_index
        bumped = point.copy()
        bumped[idx] += h
        up = float(f(Tensor(bumped)).values)
        bumped[idx] -= 2.0 * h
        down = float(f(Tensor(bumped)).values)
        central = (up - down) / (2.0 * h)
        err = abs(analytic[idx] - central) / max(1.0, abs(analytic[idx]))
        worst = max(worst, float(err))
    return worst
