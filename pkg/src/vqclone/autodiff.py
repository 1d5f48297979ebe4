"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the active :class:`Graph` (a tape in creation
order, hence already topologically sorted).  Outside a graph the same
functions just compute values, which is what inference and finite-difference
evaluations use.

Two operators exist purely to shape gradient flow:

* :func:`stop_gradient` is a forward identity that blocks the backward pass.
* :func:`straight_through` returns ``q`` in the forward pass and copies the
  output gradient to ``z`` unchanged (the VQ-VAE gradient-copy estimator).

:class:`FrozenReplay` pins the values of those operators (and any registered
discrete choice, such as codebook argmins) so that finite differences of the
surrogate objective can be compared against the analytic backward pass.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "active_graph", default=None
)
_active_replay: contextvars.ContextVar["FrozenReplay | None"] = contextvars.ContextVar(
    "active_replay", default=None
)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the graph: non-scalar loss, loss not on the tape, etc."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "parents", "backward_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not _all_finite(arr):
            raise NonFiniteError(f"non-finite value in leaf tensor {name or '<unnamed>'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, float):
        if not math.isfinite(x):
            raise NonFiniteError("non-finite scalar constant")
        t = Tensor.__new__(Tensor)
        t.data = np.asarray(x)
        t.requires_grad = False
        t.name = None
        t.op = "leaf"
        t.parents = ()
        t.backward_fn = None
        return t
    return Tensor(x)


class Graph:
    """Tape of operation records plus the set of trainable leaves.

    Use as a context manager; every op created inside is appended to
    ``nodes``.  A graph instance must stay on one thread.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.parameters: dict[str, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_graph.reset(self._token)
        self._token = None

    def parameter(self, data, name: str) -> Tensor:
        """Trainable leaf tensor for ``name``; repeated calls share one leaf."""
        if name in self.parameters:
            return self.parameters[name]
        t = Tensor(data, requires_grad=True, name=name)
        self.parameters[name] = t
        return t

    def forward(self, fn: Callable[..., dict[str, Tensor]], **inputs) -> dict[str, Tensor]:
        """Run ``fn(**inputs)`` with this graph recording, return its outputs."""
        with self:
            outputs = fn(**inputs)
        return outputs

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every registered parameter.

        Parameters the loss does not reach get zero arrays.
        """
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if loss.op != "leaf" and not any(n is loss for n in self.nodes):
            raise GraphError("loss node is not on this graph; run forward inside it first")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for name, p in self.parameters.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(p.shape)
        return out


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad


_reduce_add = np.add.reduce


def _all_finite(value: np.ndarray) -> bool:
    # one reduction: NaN/Inf anywhere propagates into the sum
    return math.isfinite(_reduce_add(value, axis=None))


def _make(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    replay = _active_replay.get()
    # a replay re-runs a path that already passed these checks while recording
    if (replay is None or replay.recording) and not _all_finite(value):
        raise NonFiniteError(f"non-finite value produced by {op!r} node")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.name = None
    out.op = op
    graph = _active_graph.get()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        graph.nodes.append(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * s,))


# ------------------------------------------------------------------ linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as one node."""
    return _make(
        "linear",
        x.data @ w.data + b.data,
        (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
    )


# -------------------------------------------------------------- reductions


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    return _make(
        "sum",
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),),
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    value = np.asarray(_reduce_add(a.data, axis=None) / n)
    return _make("mean", value, (a,), lambda g: (np.full(a.shape, g / n),))


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make("slice", np.array(a.data[index]), (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``a[index]``; entries of ``index`` equal to -1 yield zero rows."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and index.min() < 0:
        # padded rows index an appended zero row
        value = np.concatenate([a.data, np.zeros((1,) + a.shape[1:])])[index]
    else:
        value = a.data[index]

    def backward(g):
        valid = index >= 0
        out = np.zeros_like(a.data)
        np.add.at(out, index[valid], g[valid])
        return (out,)

    return _make("gather", value, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ----------------------------------------------------------- probabilities


def softmax(logits: Tensor) -> Tensor:
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make("softmax", p, (logits,), backward)


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (logits,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64)
    n = len(targets)
    if logits.shape[0] != n:
        raise ValueError(f"cross_entropy: {logits.shape[0]} rows vs {n} targets")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    value = np.asarray(-logp[rows, targets].mean())

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return _make("cross_entropy", value, (logits,), backward)


# ------------------------------------------------------------------ losses


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def mae(pred, target) -> Tensor:
    """Mean absolute error over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape("mae", pred, target)
    return mean(abs_(pred - target))


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape("mse", pred, target)
    return mean(square(pred - target))


# ------------------------------------------------------ gradient shaping


def stop_gradient(t: Tensor) -> Tensor:
    """Forward identity, zero gradient backward."""
    replay = _active_replay.get()
    value = t.data if replay is None else replay.pin(t.data)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out.name = None
    out.op = "stop_gradient"
    out.parents = ()
    out.backward_fn = None
    return out


def straight_through(z: Tensor, q: Tensor) -> Tensor:
    """Forward value of ``q``; backward copies the gradient to ``z`` only."""
    if z.shape != q.shape:
        raise ValueError(f"straight_through: shape mismatch {z.shape} vs {q.shape}")
    replay = _active_replay.get()
    if replay is None:
        value = q.data.copy()
    elif replay.recording:
        replay.pin(q.data - z.data)
        value = q.data.copy()
    else:
        # surrogate z + sg(q - z): same value at the base point, identity slope in z
        value = z.data + replay.pin(None)
    return _make("straight_through", value, (z, q), lambda g: (g, None))


def discrete_choice(compute: Callable[[], np.ndarray]) -> np.ndarray:
    """Run a non-differentiable selection, pinned under :class:`FrozenReplay`."""
    replay = _active_replay.get()
    if replay is None:
        return compute()
    if replay.recording:
        return replay.pin(compute())
    return replay.pin(None)


class FrozenReplay:
    """Pin stop-gradient values and discrete choices across evaluations.

    The first ``with`` block records every pinned value in order.  Each later
    ``with`` block hands the stored values back in the same order, so the
    function becomes the smooth surrogate whose exact gradient the backward
    pass computes.  Per-node finiteness checks run only while recording;
    callers of a replay check the values they read out.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.recording = True
        self._cursor = 0
        self._token = None

    def pin(self, value):
        if self.recording:
            self.values.append(np.array(value, copy=True))
            return value
        if self._cursor >= len(self.values):
            raise GraphError("replay ran past the recorded pins; evaluation path changed")
        stored = self.values[self._cursor]
        self._cursor += 1
        return stored

    def __enter__(self) -> "FrozenReplay":
        self._cursor = 0
        self._token = _active_replay.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_replay.reset(self._token)
        self._token = None
        self.recording = False


def current_graph() -> Graph | None:
    """The graph currently recording, if any."""
    return _active_graph.get()
