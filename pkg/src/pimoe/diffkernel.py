"""Minimal reverse-mode differentiation kernel.

Everything is 64-bit floats on numpy arrays. Each op that sees a tensor
requiring gradients records its parents and a backward rule; ``backward``
walks that graph once, depth-first without recursion, and accumulates
gradients into the leaves. The op vocabulary is deliberately small: the
models built on top need affine maps, LSTM gate math, sparse gather/scatter
for top-k gating, softmax, and a handful of reductions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, InvalidArgument, ShapeError

Array = np.ndarray

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A float64 array plus reverse-mode bookkeeping.

    ``_backward`` maps the upstream gradient to a tuple of gradients, one
    per entry of ``_parents`` (``None`` for parents that need nothing).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple["Tensor", ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> Tensor:
    """Wrap a value as a non-differentiable tensor."""
    return x if isinstance(x, Tensor) else Tensor(x)


_coerce = constant


def _node(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data

    def back(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * out / b.data, b.data.shape),
        )

    return _node(out, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def affine(x, w, b) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def relu(x) -> Tensor:
    x = _coerce(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    x = _coerce(x)
    out = np.logaddexp(0.0, x.data)
    # d/dx softplus = sigmoid(x)
    return _node(out, (x,), lambda g: (g * np.exp(-np.logaddexp(0.0, -x.data)),))


def _sigmoid_values(x: Array) -> Array:
    # exp(-x) overflowing to inf still yields the correct limit 0.0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    s = _sigmoid_values(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = _coerce(x)
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def square(x) -> Tensor:
    x = _coerce(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def ssum(x, axis: int | None = None) -> Tensor:
    x = _coerce(x)
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _node(out, (x,), back)


def smean(x, axis: int | None = None) -> Tensor:
    x = _coerce(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(ssum(x, axis=axis), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax with the closed-form Jacobian product."""
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (x,), back)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 1."""
    parts = [_coerce(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def back(g):
        grads = []
        start = 0
        for w in widths:
            grads.append(g[:, start : start + w])
            start += w
        return tuple(grads)

    return _node(out, tuple(parts), back)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _coerce(x)
    out = x.data[:, start:stop]

    def back(g):
        buf = np.zeros_like(x.data)
        buf[:, start:stop] = g
        return (buf,)

    return _node(out, (x,), back)


def gather_cols(x, idx: Array) -> Tensor:
    """Per-row column gather; idx is (rows, k) with distinct columns per row."""
    x = _coerce(x)
    out = np.take_along_axis(x.data, idx, axis=1)

    def back(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, idx, g, axis=1)
        return (buf,)

    return _node(out, (x,), back)


def scatter_cols(vals, idx: Array, width: int) -> Tensor:
    """Inverse of gather_cols: place (rows, k) values into a (rows, width) zero matrix."""
    vals = _coerce(vals)
    buf = np.zeros((vals.data.shape[0], width), dtype=np.float64)
    np.put_along_axis(buf, idx, vals.data, axis=1)
    return _node(buf, (vals,), lambda g: (np.take_along_axis(g, idx, axis=1),))


def dropout(x, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: kept units scaled by 1/(1-p) in training, identity in eval."""
    x = _coerce(x)
    if not 0.0 <= p < 1.0:
        raise InvalidArgument(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, constant(mask))


def lstm_step(x, h_prev, c_prev, w_x, w_h, b) -> tuple[Tensor, Tensor]:
    """One LSTM cell step. Gate order along the fused weight axis: i, f, g, o.

    Implemented as a single fused node (output [h | c]) with a hand-derived
    backward; the sequential cell dominates training cost, so the whole
    step runs as one vectorized rule instead of fifteen small ops.
    """
    x, h_prev, c_prev = _coerce(x), _coerce(h_prev), _coerce(c_prev)
    w_x, w_h, b = _coerce(w_x), _coerce(w_h), _coerce(b)
    hidden = w_h.data.shape[0]
    if w_x.data.shape[1] != 4 * hidden or w_h.data.shape[1] != 4 * hidden:
        raise ShapeError(
            f"fused LSTM weights must have 4*hidden columns, got {w_x.data.shape} / {w_h.data.shape}"
        )
    if x.data.shape[1] != w_x.data.shape[0]:
        raise ShapeError(f"input width {x.data.shape[1]} != {w_x.data.shape[0]}")

    z = x.data @ w_x.data + h_prev.data @ w_h.data + b.data
    i = _sigmoid_values(z[:, :hidden])
    f = _sigmoid_values(z[:, hidden : 2 * hidden])
    g = np.tanh(z[:, 2 * hidden : 3 * hidden])
    o = _sigmoid_values(z[:, 3 * hidden :])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def back(grad):
        dh = grad[:, :hidden]
        dc = grad[:, hidden:]
        dc_total = dc + dh * o * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[:, :hidden] = (dc_total * g) * i * (1.0 - i)
        dz[:, hidden : 2 * hidden] = (dc_total * c_prev.data) * f * (1.0 - f)
        dz[:, 2 * hidden : 3 * hidden] = (dc_total * i) * (1.0 - g * g)
        dz[:, 3 * hidden :] = (dh * tc) * o * (1.0 - o)
        return (
            dz @ w_x.data.T,
            dz @ w_h.data.T,
            dc_total * f,
            x.data.T @ dz,
            h_prev.data.T @ dz,
            dz.sum(axis=0),
        )

    node = _node(np.concatenate([h, c], axis=1), (x, h_prev, c_prev, w_x, w_h, b), back)
    return slice_cols(node, 0, hidden), slice_cols(node, hidden, 2 * hidden)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: "ParamSet | None" = None) -> None:
    """Accumulate gradients of a scalar loss into every reachable tensor.

    When a ParamSet is given, parameters unreachable from the loss get
    zero-filled gradient buffers so optimizers see a complete set.
    """
    if loss._backward is None:
        raise GraphError("no recorded graph below this tensor; run a forward pass first")
    if loss.data.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    state: dict[int, int] = {}
    stack = [loss]
    while stack:
        t = stack[-1]
        st = state.get(id(t), 0)
        if st == 0:
            state[id(t)] = 1
            for p in t._parents:
                if state.get(id(p), 0) == 0 and p._backward is not None:
                    stack.append(p)
        else:
            stack.pop()
            if st == 1:
                state[id(t)] = 2
                topo.append(t)

    for t in topo:
        t.grad = None
    # Leaves are not in topo, so their first touch this pass overwrites any
    # stale gradient from an earlier backward call.
    seen_leaves: set[int] = set()
    loss.grad = np.ones_like(loss.data)
    for t in reversed(topo):
        if t.grad is None:
            continue
        for p, g in zip(t._parents, t._backward(t.grad)):
            if g is None or not p.requires_grad:
                continue
            if p._backward is None and id(p) not in seen_leaves:
                seen_leaves.add(id(p))
                p.grad = g
            else:
                p.grad = g if p.grad is None else p.grad + g

    if params is not None:
        for _, p in params.items():
            if id(p) not in seen_leaves:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class ParamSet:
    """Named trainable tensors with deterministic (sorted) iteration order."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        for name in self.names():
            yield name, self._tensors[name]

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.grad = None

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out.add(name, t.data.copy())
        return out

    def n_values(self) -> int:
        return sum(t.data.size for _, t in self.items())


def params_to_blob(params: ParamSet) -> tuple[list[dict], bytes]:
    """Serialize to (manifest entries, little-endian float64 blob).

    Offsets are in float64 counts, in sorted-name order.
    """
    entries: list[dict] = []
    chunks: list[bytes] = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    return entries, b"".join(chunks)


def params_from_blob(entries: list[dict], blob: bytes) -> ParamSet:
    flat = np.frombuffer(blob, dtype="<f8")
    out = ParamSet()
    for e in entries:
        shape = tuple(e["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        chunk = flat[start : start + size]
        if chunk.size != size:
            raise ShapeError(f"blob too short for parameter {e['name']!r}")
        out.add(e["name"], chunk.reshape(shape).astype(np.float64))
    return out


# ---------------------------------------------------------------------------
# initialization and Adam
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Array:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; weight decay is decoupled."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState) -> None:
    """Standard Adam update with bias correction; missing grads count as zero."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - state.lr * update
