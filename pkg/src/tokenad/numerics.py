"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op below records a node on the current thread's tape
whenever one of its inputs requires a gradient. ``backward`` walks that tape
once in reverse creation order (which is a valid topological order) and then
clears it, so a second ``backward`` without a fresh forward pass is rejected.
"""
from __future__ import annotations

import contextlib
import math
import threading
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, DimensionError, NormalizationError

EPS_NORM = 1e-12
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = threading.local()


def _get(name, default):
    value = getattr(_state, name, None)
    if value is None:
        value = default() if callable(default) else default
        setattr(_state, name, value)
    return value


def default_dtype() -> np.dtype:
    return _get("dtype", lambda: np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for tensors built from Python data."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the recorded ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_item(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


class Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of the ops executed since the last backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._index: dict[int, int] = {}

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(Node(out, parents, backward))

    def position(self, t: Tensor) -> int | None:
        pos = self._index.get(id(t))
        if pos is not None and self.nodes[pos].out is t:
            return pos
        return None

    def clear(self) -> None:
        self.nodes.clear()
        self._index.clear()

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape:
    return _get("tape", Tape)


def reset_tape() -> None:
    current_tape().clear()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(np.asarray(data))
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.size == 1 and a.ndim <= b.ndim:
        return
    if b.size == 1 and b.ndim <= a.ndim:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only scalar broadcasting)")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "mul")

    def bw(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _reduce_to(g / b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def pow(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p == 0.0:
        return _make(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(g),))

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) without overflow."""
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * expit(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(a.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), bw)


_UNARY = {"gelu": gelu, "sigmoid": sigmoid, "exp": exp, "log": log, "relu": relu, "softplus": softplus}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *args) -> Tensor:
    if kind in _UNARY:
        (x,) = args
        return _UNARY[kind](x)
    if kind in _BINARY:
        return _BINARY[kind](*args)
    if kind == "scale":
        return scale(*args)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` explicitly (leading or size-1 axes)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot expand {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast like numpy."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (weight.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw)


softmax_rows = softmax


def l2_normalize(a: Tensor, axis: int = -1, eps: float = EPS_NORM, name: str | None = None) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(~(norm > eps)):
        label = name or a.name or "tensor"
        raise NormalizationError(f"cannot l2-normalize {label}: norm {float(norm.min()):.3g} <= {eps}")
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ordered by (value desc, index asc)."""
    order = np.argsort(-values, axis=-1, kind="stable")
    return order[..., :k]


def topk_mean(a: Tensor, k: int) -> Tensor:
    """Mean of the k largest entries along the last axis."""
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise DimensionError(f"topk_mean: k={k} outside [1, {n}]")
    idx = topk_indices(a.data, k)
    picked = np.take_along_axis(a.data, idx, axis=-1)
    out = picked.mean(axis=-1)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.repeat(g[..., None] / k, k, axis=-1), axis=-1)
        return (full,)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, store: "ParameterStore | None" = None) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every reachable leaf and consume the tape.

    Entries of ``store`` that the loss does not reach get a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if store is not None:
        for t in store.values():
            t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    pos = tape.position(loss)
    if pos is None:
        raise ContractError("loss is not on the current tape (already backpropagated or recorded elsewhere)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    nodes = tape.nodes
    for i in range(pos, -1, -1):
        node = nodes[i]
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if tape.position(p) is None:
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is not None:
            leaf.grad = np.array(g, dtype=leaf.dtype).reshape(leaf.shape)
    tape.clear()


# ---------------------------------------------------------------- parameters and optimizer


class ParameterStore:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.step_count = 0
        self.adam_state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.entries:
            raise KeyError(f"parameter {name!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def values(self) -> Iterable[Tensor]:
        return self.entries.values()

    def items(self):
        return self.entries.items()

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def astype(self, dtype) -> None:
        for t in self.entries.values():
            t.data = t.data.astype(dtype)
            if t.grad is not None:
                t.grad = t.grad.astype(dtype)
        self.adam_state = {k: (m.astype(dtype), v.astype(dtype)) for k, (m, v) in self.adam_state.items()}

    def num_scalars(self) -> int:
        return int(np.sum([t.size for t in self.entries.values()]))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.entries.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.entries.items():
            arr = np.asarray(arrays[k])
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {k}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype, copy=True)


def adam_step(store: ParameterStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied in place; clears gradients afterwards."""
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.entries.items():
        g = p.grad
        if g is None:
            continue
        m, v = store.adam_state.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        store.adam_state[name] = (m, v)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------- gradient checks


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return np.abs(analytic - numeric) / denom


def central_difference(f: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-4) -> np.ndarray:
    x = np.array(point, dtype=np.float64 if point.dtype.kind != "f" else point.dtype, copy=True)
    flat = x.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def finite_diff_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-4) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps a tensor to a scalar tensor using the ops in this module. A
    non-finite value anywhere yields ``inf`` (a failed check).
    """
    point = np.asarray(point)
    if point.dtype.kind != "f":
        point = point.astype(default_dtype())
    reset_tape()
    x = Tensor(point.copy(), requires_grad=True)
    loss = f(x)
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(point)

    def value(arr):
        with no_grad():
            return float(f(Tensor(arr)).data.reshape(-1)[0])

    numeric = central_difference(value, point, h)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        return math.inf
    err = relative_error(analytic, numeric)
    return float(err.max()) if err.size else 0.0


def checksum(arrays: Iterable[np.ndarray]) -> int:
    """CRC32 over the raw bytes of a sequence of arrays (order-sensitive)."""
    crc = 0
    for arr in arrays:
        crc = zlib.crc32(np.ascontiguousarray(arr).tobytes(), crc)
    return crc
