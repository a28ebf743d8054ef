"""Dense float64 tensors with reverse-mode gradients.

The op set is deliberately closed: matmul, add, elementwise multiply,
concat/split on the last axis, tanh, sigmoid, softmax, embedding lookup,
dot product, mean, scalar scale and binary cross-entropy.  That is exactly
what the two towers need, and nothing more, so every primitive can be
gradient-checked exhaustively.

Gradients are recorded on an explicit :class:`Tape` and replayed in
reverse execution order.  Ops only record themselves when a tape is
active and some input requires gradients; scoring code therefore runs
tape-free and is safe to share across threads.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "forward",
    "backward",
    "matmul",
    "add",
    "multiply",
    "concat",
    "split",
    "tanh",
    "sigmoid",
    "softmax",
    "embedding_lookup",
    "dot",
    "mean",
    "scale",
    "binary_cross_entropy",
    "reshape",
]

_CLAMP = 1e-12


class ShapeMismatchError(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


class Tensor:
    """A dense n-dimensional float64 array, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# --------------------------------------------------------------------------
# Tape machinery

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops, replayed in reverse for gradients.

    A tape can be consumed by :func:`backward` exactly once.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.pop()

    def __len__(self) -> int:
        return len(self._entries)


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    """Mark `out` as gradient-carrying and register `bwd` on the active tape."""
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    tape._entries.append((out, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), t.data.shape)
    if t.grad is None:
        t.grad = grad.copy() if grad.base is not None else grad
    else:
        t.grad = t.grad + grad


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Propagate dLoss/d(leaf) to every requires_grad tensor on the tape.

    The tape is consumed; calling backward on it twice raises.
    """
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward: no active Tape")
    if tape._consumed:
        raise RuntimeError("backward: tape already consumed")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, bwd in reversed(tape._entries):
        if out.grad is None:
            continue
        bwd(out.grad)


# --------------------------------------------------------------------------
# Primitives


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.ndim not in (1, 2) or B.ndim not in (1, 2):
        raise ShapeMismatchError("matmul", A.shape, B.shape)
    inner_a = A.shape[-1]
    inner_b = B.shape[0] if B.ndim == 2 else B.shape[-1]
    if inner_a != inner_b:
        raise ShapeMismatchError("matmul", A.shape, B.shape)
    out = Tensor(np.matmul(A, B))

    def bwd(g):
        if A.ndim == 2 and B.ndim == 2:
            _accumulate(a, g @ B.T)
            _accumulate(b, A.T @ g)
        elif A.ndim == 2 and B.ndim == 1:
            _accumulate(a, np.outer(g, B))
            _accumulate(b, A.T @ g)
        elif A.ndim == 1 and B.ndim == 2:
            _accumulate(a, B @ g)
            _accumulate(b, np.outer(A, g))
        else:  # 1-D @ 1-D
            _accumulate(a, g * B)
            _accumulate(b, g * A)

    return _record(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape) from None

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _record(out, (a, b), bwd)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeMismatchError("elementwise-multiply", a.shape, b.shape) from None

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _record(out, (a, b), bwd)


def concat(*tensors) -> Tensor:
    """Concatenate along the last axis."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat: no inputs")
    lead = ts[0].data.shape[:-1]
    for t in ts[1:]:
        if t.data.shape[:-1] != lead or t.data.ndim != ts[0].data.ndim:
            raise ShapeMismatchError("concat", ts[0].shape, t.shape)
    out = Tensor(np.concatenate([t.data for t in ts], axis=-1))
    sizes = [t.data.shape[-1] for t in ts]

    def bwd(g):
        offset = 0
        for t, n in zip(ts, sizes):
            _accumulate(t, g[..., offset:offset + n])
            offset += n

    return _record(out, ts, bwd)


def split(t: Tensor, sizes: list[int]) -> list[Tensor]:
    """Split along the last axis into chunks of the given sizes."""
    t = _as_tensor(t)
    if sum(sizes) != t.data.shape[-1]:
        raise ShapeMismatchError("split", t.shape, (sum(sizes),))
    outs = []
    offset = 0
    for n in sizes:
        lo, hi = offset, offset + n
        piece = Tensor(t.data[..., lo:hi].copy())

        def bwd(g, lo=lo, hi=hi):
            full = np.zeros_like(t.data)
            full[..., lo:hi] = g
            _accumulate(t, full)

        outs.append(_record(piece, (t,), bwd))
        offset += n
    return outs


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.tanh(x.data))

    def bwd(g):
        _accumulate(x, g * (1.0 - out.data * out.data))

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    v = x.data
    # split form avoids exp overflow for large |v|
    pos = v >= 0
    y = np.empty_like(v)
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    out = Tensor(y)

    def bwd(g):
        _accumulate(x, g * out.data * (1.0 - out.data))

    return _record(out, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        s = (g * out.data).sum(axis=-1, keepdims=True)
        _accumulate(x, out.data * (g - s))

    return _record(out, (x,), bwd)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Row-select from a 2-D table; gradient scatters back into the rows."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeMismatchError("embedding-lookup", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding-lookup: index out of range for table with "
            f"{table.data.shape[0]} rows"
        )
    out = Tensor(table.data[idx])

    def bwd(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _accumulate(table, buf)

    return _record(out, (table,), bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeMismatchError("dot-product", a.shape, b.shape)
    out = Tensor(np.dot(a.data, b.data))

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _record(out, (a, b), bwd)


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.mean(x.data))

    def bwd(g):
        _accumulate(x, np.full_like(x.data, float(g) / x.data.size))

    return _record(out, (x,), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    out = Tensor(x.data * s)

    def bwd(g):
        _accumulate(x, g * s)

    return _record(out, (x,), bwd)


def binary_cross_entropy(p: Tensor, labels) -> Tensor:
    """Mean of -[y ln p + (1-y) ln(1-p)], with p clamped to [1e-12, 1-1e-12]."""
    p = _as_tensor(p)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != p.data.shape:
        raise ShapeMismatchError("binary-cross-entropy", p.shape, y.shape)
    pc = np.clip(p.data, _CLAMP, 1.0 - _CLAMP)
    out = Tensor(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    n = max(p.data.size, 1)

    def bwd(g):
        inside = (p.data > _CLAMP) & (p.data < 1.0 - _CLAMP)
        d = (pc - y) / (pc * (1.0 - pc) * n)
        d[~inside] = 0.0
        _accumulate(p, float(g) * d)

    return _record(out, (p,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Shape metadata change; gradient reshapes back."""
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _record(out, (x,), bwd)


# --------------------------------------------------------------------------
# Dispatch by op name

_OPS = {
    "matmul": matmul,
    "add": add,
    "elementwise-multiply": multiply,
    "concat": concat,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "embedding-lookup": embedding_lookup,
    "dot-product": dot,
    "mean": mean,
    "scalar-scale": scale,
    "binary-cross-entropy": binary_cross_entropy,
}


def forward(op_kind: str, *inputs) -> Tensor:
    """Execute a primitive by name. The op set is closed."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind: {op_kind!r}") from None
    return fn(*inputs)
