"""Reverse-mode differentiation on dense float64 arrays.

A :class:`Tape` records every primitive op executed during a forward pass;
``Tape.run_backward`` replays the records once, in reverse, accumulating
vector-Jacobian products into the recorded inputs.  Ops are vectorized over
numpy arrays, so a whole minibatch forward is a handful of records rather
than one per scalar.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeReusedError",
    "NumericError",
    "Tape",
    "Tensor",
    "relu",
    "exp",
    "log",
    "softplus",
    "log_softmax",
    "softmax",
    "concat",
    "broadcast_to",
    "take_rows",
    "take_per_row",
    "stable_log_softmax",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeReusedError(RuntimeError):
    """A tape's backward sweep was requested more than once."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the contract requires finiteness."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of primitive ops from one forward pass.

    Execution order is a topological order of the computation graph, so a
    single reversed sweep visits every op exactly once with its output
    gradient already complete.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._watched: dict[int, Tensor] = {}
        self.params: list[Tensor] = []
        self._spent = False

    def watch(self, array: np.ndarray) -> "Tensor":
        """Register a parameter array as a differentiable leaf.

        Watching the same array object twice returns the same leaf, so a
        parameter reused in several sub-forwards accumulates one gradient.
        """
        key = id(array)
        t = self._watched.get(key)
        if t is None:
            t = Tensor(array, tape=self)
            self._watched[key] = t
            self.params.append(t)
        return t

    def grad_for(self, array: np.ndarray) -> np.ndarray:
        """Gradient of the swept output w.r.t. a watched array (zeros if unused)."""
        t = self._watched.get(id(array))
        if t is None or t.grad is None:
            return np.zeros_like(_as_f64(array))
        return t.grad

    def _record(self, out: "Tensor", backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def run_backward(self, root: "Tensor", seed=1.0) -> None:
        if self._spent:
            raise TapeReusedError("tape already swept; build a new forward pass")
        self._spent = True
        if root.tape is not self:
            raise ValueError("root tensor does not belong to this tape")
        seed = _as_f64(seed)
        if seed.shape != root.data.shape:
            seed = np.broadcast_to(seed, root.data.shape).copy()
        root.grad = seed
        for out, backward in reversed(self._records):
            if out.grad is not None:
                backward(out.grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _join_tape(a: "Tensor", b: "Tensor") -> Tape | None:
    ta, tb = a.tape, b.tape
    if ta is None:
        return tb
    if tb is None or tb is ta:
        return ta
    raise ValueError("operands recorded on different tapes")


class Tensor:
    """A float64 array plus its accumulated gradient.

    ``tape=None`` marks a constant: it participates in values but never
    receives a gradient.
    """

    __slots__ = ("data", "grad", "tape")

    # make ndarray <op> Tensor dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape | None = None):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, tracked={self.tape is not None})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(self, other, lambda a, b: b - a,
                       lambda g, a, b: -g, lambda g, a, b: g)

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary(self, other, lambda a, b: b / a,
                       lambda g, a, b: -g * b / (a * a), lambda g, a, b: g / a)

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a, out: -g)

    def __matmul__(self, other):
        other = _coerce(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul requires operands with ndim >= 2")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(
                f"matmul inner dims differ: {self.shape} @ {other.shape}")
        tape = _join_tape(self, other)
        out = Tensor(self.data @ other.data, tape)
        if tape is not None:
            a, b = self, other

            def backward(g: np.ndarray) -> None:
                if a.tape is not None:
                    a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
                if b.tape is not None:
                    b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

            tape._record(out, backward)
        return out

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self
        out = Tensor(self.data.reshape(shape), self.tape)
        if self.tape is not None:
            self.tape._record(
                out, lambda g: src._accum(g.reshape(src.shape)))
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        src = self
        out = Tensor(np.swapaxes(self.data, a, b), self.tape)
        if self.tape is not None:
            self.tape._record(
                out, lambda g: src._accum(np.swapaxes(g, a, b)))
        return out

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), self.tape)
        if self.tape is not None:
            def backward(g: np.ndarray) -> None:
                if axis is not None and not keepdims:
                    axes = axis if isinstance(axis, tuple) else (axis,)
                    g = np.expand_dims(g, axes)
                src._accum(np.broadcast_to(g, src.shape).copy())
            self.tape._record(out, backward)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    tape = _join_tape(a, b)
    out = Tensor(fwd(a.data, b.data), tape)
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            if a.tape is not None:
                a._accum(_unbroadcast(da(g, a.data, b.data), a.shape))
            if b.tape is not None:
                b._accum(_unbroadcast(db(g, a.data, b.data), b.shape))
        tape._record(out, backward)
    return out


def _unary(t: Tensor, fwd, back) -> Tensor:
    out = Tensor(fwd(t.data), t.tape)
    if t.tape is not None:
        t.tape._record(out, lambda g: t._accum(back(g, t.data, out.data)))
    return out


def relu(t: Tensor) -> Tensor:
    return _unary(t, lambda a: np.maximum(a, 0.0),
                  lambda g, a, out: g * (a > 0.0))


def exp(t: Tensor) -> Tensor:
    return _unary(t, np.exp, lambda g, a, out: g * out)


def log(t: Tensor) -> Tensor:
    return _unary(t, np.log, lambda g, a, out: g / a)


def softplus(t: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow for large |x|."""
    def fwd(a):
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))

    def back(g, a, out):
        return g / (1.0 + np.exp(-a))

    return _unary(t, fwd, back)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Shift-stable log softmax along ``axis`` as a fused primitive."""
    def fwd(a):
        shifted = a - a.max(axis=axis, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g, a, out):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _unary(t, fwd, back)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    def fwd(a):
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    def back(g, a, out):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _unary(t, fwd, back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tape)
    if tape is not None:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def backward(g: np.ndarray) -> None:
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.tape is not None:
                    t._accum(piece)

        tape._record(out, backward)
    return out


def broadcast_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = t
    out = Tensor(np.broadcast_to(t.data, shape).copy(), t.tape)
    if t.tape is not None:
        t.tape._record(out, lambda g: src._accum(_unbroadcast(g, src.shape)))
    return out


def take_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``out[i] = t[idx[i]]`` (embedding-table gather)."""
    idx = np.asarray(idx, dtype=np.intp)
    src = t
    out = Tensor(t.data[idx], t.tape)
    if t.tape is not None:
        def backward(g: np.ndarray) -> None:
            acc = np.zeros_like(src.data)
            np.add.at(acc, idx, g)
            src._accum(acc)
        t.tape._record(out, backward)
    return out


def take_per_row(t: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row column pick ``out[i] = t[i, idx[i]]`` for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if t.ndim != 2:
        raise ShapeError("take_per_row expects a 2-D tensor")
    if idx.shape != (t.shape[0],):
        raise ShapeError("index length must equal the row count")
    rows = np.arange(t.shape[0])
    src = t
    out = Tensor(t.data[rows, idx], t.tape)
    if t.tape is not None:
        def backward(g: np.ndarray) -> None:
            acc = np.zeros_like(src.data)
            np.add.at(acc, (rows, idx), g)
            src._accum(acc)
        t.tape._record(out, backward)
    return out


def stable_log_softmax(logits: np.ndarray) -> np.ndarray:
    """Plain-array log softmax, invariant to adding a constant to all logits."""
    a = _as_f64(logits)
    if not np.all(np.isfinite(a)):
        raise NumericError("logits must be finite")
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def finite_diff_grad(loss_fn: Callable[[], float],
                     params: Iterable[np.ndarray] | dict[str, np.ndarray],
                     h: float = 1e-5):
    """Central-difference gradient of ``loss_fn`` w.r.t. arrays it reads.

    Perturbs each coordinate in place and restores it, so ``loss_fn`` must
    pick up the mutation (it closes over the same arrays).  Returns a
    structure mirroring ``params``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if isinstance(params, dict):
        return {k: finite_diff_grad(loss_fn, [v], h)[0] for k, v in params.items()}
    grads = []
    for arr in params:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn()
            flat[i] = orig - h
            minus = loss_fn()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
        grads.append(g)
    return grads
