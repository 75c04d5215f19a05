"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is deliberately small: matmul, add, sub, mul, relu,
scale, sum, mean, exp, log, concat_rows and l2_norm are enough to express
an MLP forward pass and every loss in this package.  Elementwise binaries
accept equal shapes or a one-element operand; there is no general
broadcasting.  A :class:`GradTape` is confined to one thread and is
consumed by a single :func:`backward` call.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import LogDomain, NoTape, NotScalar, ShapeMismatch

__all__ = [
    "Tensor", "GradTape", "Gradients", "backward", "sgd_step",
    "apply_primitive", "PRIMITIVE_KINDS",
    "matmul", "add", "sub", "mul", "relu", "scale", "sum", "mean",
    "exp", "log", "concat_rows", "l2_norm",
]

_TLS = threading.local()


def _active_tape() -> "GradTape | None":
    return getattr(_TLS, "tape", None)


class Tensor:
    """Immutable float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "node_id")

    def __init__(self, data, node_id: int | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        tracked = f", node_id={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    """One primitive application: inputs precede it on the tape."""

    __slots__ = ("kind", "input_ids", "output_id", "vjp")

    def __init__(self, kind, input_ids, output_id, vjp):
        self.kind = kind
        self.input_ids = input_ids
        self.output_id = output_id
        self.vjp = vjp  # grad_out -> tuple of grads aligned with input_ids


class GradTape:
    """Records primitive applications for one forward/backward cycle.

    Use as a context manager; parameters must be registered with
    :meth:`watch` before they are used.  Nested tapes on the same thread
    are not supported.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._watched: dict[int, tuple[int, ...]] = {}
        self._next_id = 0
        self._consumed = False

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise NoTape("a GradTape is already active on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _TLS.tape = None

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a parameter leaf; returns a tracked view of it."""
        self._check_usable()
        out = Tensor(tensor.data)
        out.node_id = self._new_id()
        self._watched[out.node_id] = out.data.shape
        return out

    def _check_usable(self) -> None:
        if self._consumed:
            raise NoTape("tape already consumed by backward()")

    def _record(self, kind, inputs: Sequence[Tensor], out_data: np.ndarray,
                vjp: Callable) -> Tensor:
        self._check_usable()
        out = Tensor(out_data)
        out.node_id = self._new_id()
        self._records.append(_Record(
            kind, tuple(t.node_id for t in inputs), out.node_id, vjp))
        return out


class Gradients:
    """Map from watched parameter node id to its gradient tensor."""

    def __init__(self, by_id: dict[int, Tensor]):
        self._by_id = by_id

    def __getitem__(self, key) -> Tensor:
        nid = key.node_id if isinstance(key, Tensor) else key
        return self._by_id[nid]

    def __contains__(self, key) -> bool:
        nid = key.node_id if isinstance(key, Tensor) else key
        return nid in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def items(self):
        return self._by_id.items()


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.node_id is not None for t in inputs):
        return tape._record(kind, inputs, out_data, vjp)
    return Tensor(out_data)


def _check_elementwise(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(f"{kind}: shapes {a.shape} and {b.shape} "
                            "must match exactly or one side be a scalar")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo the scalar-with-tensor broadcast on the scalar side.
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", (a, b), ad @ bd, vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _emit("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _emit("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _reduce_to(g * bd, sa), _reduce_to(g * ad, sb)

    return _emit("mul", (a, b), ad * bd, vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0.0), vjp)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _emit("scale", (x,), x.data * c, vjp)


def sum(x) -> Tensor:  # noqa: A001 - deliberate primitive name
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        return (np.full(shape, float(g.reshape(()))),)

    return _emit("sum", (x,), np.sum(x.data), vjp)


def mean(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.size

    def vjp(g):
        return (np.full(shape, float(g.reshape(())) / n),)

    return _emit("mean", (x,), np.mean(x.data), vjp)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _emit("exp", (x,), out, vjp)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise LogDomain("log of non-positive value")
    xd = x.data

    def vjp(g):
        return (g / xd,)

    return _emit("log", (x,), np.log(xd), vjp)


def concat_rows(parts: Sequence) -> Tensor:
    tensors = [_as_tensor(p) for p in parts]
    if not tensors:
        raise ShapeMismatch("concat_rows: empty input")
    if any(t.ndim != 2 for t in tensors):
        raise ShapeMismatch("concat_rows: all inputs must be 2-D")
    cols = tensors[0].shape[1]
    if any(t.shape[1] != cols for t in tensors):
        raise ShapeMismatch("concat_rows: column counts differ")
    row_counts = [t.shape[0] for t in tensors]
    splits = np.cumsum(row_counts)[:-1]

    def vjp(g):
        return tuple(np.vsplit(g, splits))

    return _emit("concat_rows", tensors,
                 np.vstack([t.data for t in tensors]), vjp)


def l2_norm(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    norm = float(np.sqrt(np.sum(xd * xd)))

    def vjp(g):
        denom = norm if norm > 0.0 else 1.0
        return (float(g.reshape(())) * xd / denom,)

    return _emit("l2_norm", (x,), np.float64(norm), vjp)


PRIMITIVE_KINDS = ("matmul", "add", "sub", "mul", "relu", "scale", "sum",
                   "mean", "exp", "log", "concat_rows", "l2_norm")

_DISPATCH = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "relu": relu,
    "scale": scale, "sum": sum, "mean": mean, "exp": exp, "log": log,
    "concat_rows": concat_rows, "l2_norm": l2_norm,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Dispatch a primitive by kind name (mainly for generic test sweeps)."""
    if kind not in _DISPATCH:
        raise ShapeMismatch(f"unknown primitive kind: {kind}")
    if kind == "concat_rows":
        return concat_rows(list(inputs))
    if kind == "scale":
        return scale(inputs[0], params["c"])
    return _DISPATCH[kind](*inputs)


# ---------------------------------------------------------------------------
# backward pass and SGD
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar loss; consumes the active tape.

    Every watched parameter gets an entry; parameters the loss does not
    reach get exact zeros.
    """
    tape = _active_tape()
    if tape is None or tape._consumed:
        raise NoTape("backward() requires an active, unconsumed GradTape")
    if loss.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")
    tape._consumed = True

    adjoints: dict[int, np.ndarray] = {}
    if loss.node_id is not None:
        adjoints[loss.node_id] = np.ones_like(loss.data)
    for rec in reversed(tape._records):
        g = adjoints.pop(rec.output_id, None)
        if g is None:
            continue
        for nid, gin in zip(rec.input_ids, rec.vjp(g)):
            if nid is None:
                continue
            if nid in adjoints:
                adjoints[nid] = adjoints[nid] + gin
            else:
                adjoints[nid] = np.asarray(gin, dtype=np.float64)

    out = {}
    for nid, shape in tape._watched.items():
        g = adjoints.get(nid)
        out[nid] = Tensor(np.zeros(shape)) if g is None else Tensor(g)
    return Gradients(out)


def sgd_step(params: Sequence[Tensor], grads: Gradients, eta: float) -> list[Tensor]:
    """Plain gradient descent: param' = param - eta * grad."""
    updated = []
    for p in params:
        if p.node_id is None or p.node_id not in grads:
            raise NoTape("sgd_step: parameter has no gradient entry")
        g = grads[p]
        if g.shape != p.shape:
            raise ShapeMismatch(f"sgd_step: grad {g.shape} vs param {p.shape}")
        updated.append(Tensor(p.data - eta * g.data))
    return updated
