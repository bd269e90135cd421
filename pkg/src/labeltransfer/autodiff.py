"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable op appends a node to a thread-local tape when at least
one input requires a gradient. Nodes are recorded in creation order, so
walking the tape backwards is a valid reverse topological order.
:func:`backward` consumes and clears the tape.

Data are 32-bit floats unless :func:`precision` selects another dtype
(gradient checks run in float64 so finite differences stay meaningful).
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .container import read_arrays, write_arrays

CHECKPOINT_MAGIC = b"LTCKPT01"

# Incremented once per executed op, keyed by op name. Tests use it to count
# trunk passes.
op_counts: Counter = Counter()


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: list[_Node] = []
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


def default_dtype() -> type:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterable[None]:
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterable[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def tape_length() -> int:
    return len(_state.tape)


def clear_tape() -> None:
    _state.tape.clear()


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: "Tensor", inputs: tuple["Tensor", ...], backward) -> None:
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense array with an optional gradient accumulator."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.asarray(data, dtype=_state.dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    op_counts[op] += 1
    out = Tensor(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, inputs, backward)
        out._node = node
        _state.tape.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; no gradient flows where the floor wins."""
    a = as_tensor(a)
    keep = a.data > floor
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * keep,), "maximum")


# ---------------------------------------------------------------------------
# elementwise unary ops

def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0, a.data), (a,), lambda g: (g * expit(a.data),), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ---------------------------------------------------------------------------
# reductions and normalisers

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return div(sum_(a, axis, keepdims), float(max(n, 1)))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), backward, "cumsum")


# ---------------------------------------------------------------------------
# shape and indexing

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off the concat axis")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _is_basic_key(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (slice, int, np.integer)) for k in keys)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]
    basic = _is_basic_key(key)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def scatter_rows(a, index: np.ndarray, n: int) -> Tensor:
    """Place row ``i`` of ``a`` at row ``index[i]`` of an ``n``-row zero array.

    ``index`` must not repeat; the backward pass is then a plain gather.
    """
    a = as_tensor(a)
    index = np.asarray(index)
    if index.shape != a.shape[:1]:
        raise ShapeError(f"scatter_rows: index shape {index.shape} vs rows {a.shape}")
    out = np.zeros((n,) + a.shape[1:], dtype=a.data.dtype)
    out[index] = a.data
    return _make(out, (a,), lambda g: (g[index],), "scatter_rows")


def one_hot(index: np.ndarray, n: int) -> Tensor:
    index = np.asarray(index)
    out = np.zeros(index.shape + (n,), dtype=_state.dtype)
    valid = (index >= 0) & (index < n)
    out[valid, index[valid]] = 1
    return Tensor(out)


# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires a gradient.

    Leaf gradients accumulate into an existing ``.grad``. The tape is cleared
    afterwards, also when the loss does not depend on any parameter.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if loss._node is None:
        tape.clear()
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise GradientError("loss does not depend on any tensor that requires a gradient")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.data.dtype)
                    else:
                        inp.grad = inp.grad + gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class Adam:
    """Adam with bias correction over a named parameter dict.

    ``clip_norm`` rescales the global gradient norm when set; off by default.
    """

    params: dict[str, Tensor]
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise GradientError(f"adam_step: no gradient for {', '.join(sorted(missing))}")
        names = sorted(self.params)
        scale = 1.0
        if self.clip_norm is not None:
            total = float(np.sqrt(sum(float(np.sum(self.params[n].grad.astype(np.float64) ** 2)) for n in names)))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in names:
            p = self.params[name]
            g = p.grad if scale == 1.0 else p.grad * p.data.dtype.type(scale)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.grad = np.zeros_like(p.data)

    def hyper(self) -> dict[str, Any]:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "clip_norm": self.clip_norm}


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int
    adam: dict[str, Any] | None = None
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: str | Path, params: dict[str, Tensor | np.ndarray], step: int,
                    optimizer: Adam | None = None, meta: dict[str, Any] | None = None) -> None:
    arrays = {f"param/{k}": (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}
    header: dict[str, Any] = {"step": int(step), "meta": meta or {}, "adam": None}
    if optimizer is not None:
        header["adam"] = optimizer.hyper()
        arrays.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
    write_arrays(path, arrays, header, CHECKPOINT_MAGIC)


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, header = read_arrays(path, CHECKPOINT_MAGIC)
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for key, arr in arrays.items():
        prefix, name = key.split("/", 1)
        groups[prefix][name] = arr
    return Checkpoint(params=groups["param"], step=header["step"], adam=header["adam"],
                      adam_m=groups["adam_m"], adam_v=groups["adam_v"], meta=header["meta"])


def restore_adam(ckpt: Checkpoint, params: dict[str, Tensor]) -> Adam:
    if ckpt.adam is None:
        raise ValueError("checkpoint carries no optimizer state")
    h = ckpt.adam
    return Adam(params, lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"],
                clip_norm=h["clip_norm"], t=h["t"],
                m={k: v.copy() for k, v in ckpt.adam_m.items()},
                v={k: v.copy() for k, v in ckpt.adam_v.items()})
