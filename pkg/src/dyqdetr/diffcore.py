"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure on the output tensor that maps the upstream
gradient to one gradient per parent. :func:`backward` walks the recorded
graph in reverse topological order and then drops the tape.

Randomness goes through :func:`spawn_rng`, which derives independent
PCG64 streams (numpy ``SeedSequence``) from a run seed plus string names.
"""
from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NumericalError", "tensor", "parameter", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape", "getitem",
    "concat", "relu", "sigmoid", "exp", "log", "abs_", "maximum", "minimum",
    "masked_softmax", "log_softmax", "layer_norm", "sum_", "mean",
    "backward", "finite_diff_check", "spawn_rng", "OPS",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NumericalError(RuntimeError):
    """A loss or activation went NaN or infinite."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, pseudo-labelling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def relu(self): return relu(self)
    def sigmoid(self): return sigmoid(self)
    def exp(self): return exp(self)
    def log(self): return log(self)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)
    return _result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log; defined for strictly positive inputs."""
    a = _as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("maximum", a, b)
    first = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)
    return _result(np.where(first, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("minimum", a, b)
    first = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)
    return _result(np.where(first, a.data, b.data), (a, b), bw, "minimum")


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    if b.ndim == 2 and a.ndim > 2:
        # fold batch axes into rows: one GEMM each way instead of a batched product
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            return ((g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None,
                    a2.T @ g2 if b.requires_grad else None)
        return _result(out, (a, b), bw_folded, "matmul")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _result(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; ``axes=None`` swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a, idx) -> Tensor:
    """Basic slicing or integer-array gathering; repeated indices accumulate."""
    a = _as_tensor(a)
    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros(a.shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)
    return _result(np.array(a.data[idx], dtype=np.float64), (a,), bw, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: empty input")
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))
    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return _result(out, (a,), bw, "mean")


# ---------------------------------------------------------------- fused nn ops

def masked_softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an additive mask.

    ``mask`` broadcasts against ``a``; entries equal to ``-inf`` are blocked
    and receive exactly zero weight, finite entries are added to the logits.
    Rows with every entry blocked come out as zeros.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is None:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        out = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        try:
            np.broadcast_shapes(x.shape, mask.shape)
        except ValueError:
            raise ShapeError(f"masked_softmax: mask shape {mask.shape} does not fit {x.shape}") from None
        blocked = np.isneginf(mask)
        x = np.where(blocked, -np.inf, x + np.where(blocked, 0.0, mask))
        m = np.max(x, axis=-1, keepdims=True)
        dead = np.isneginf(m)
        e = np.exp(x - np.where(dead, 0.0, m))
        s = e.sum(axis=-1, keepdims=True)
        out = np.where(dead, 0.0, e / np.where(dead, 1.0, s))

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _result(out, (a,), bw, "masked_softmax")


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return _result(out, (a,), bw, "log_softmax")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match feature dim of {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gx = g * gamma.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(a.ndim - 1))
        return ga, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _result(xhat * gamma.data + beta.data, (a, gamma, beta), bw, "layer_norm")


OPS = ("add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape", "getitem",
       "concat", "relu", "sigmoid", "exp", "log", "abs", "maximum", "minimum",
       "masked_softmax", "log_softmax", "layer_norm", "sum", "mean")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``root``.

    Returns a map from tensor to gradient. Intermediate nodes get their
    ``.grad`` too, and the recorded graph is released afterwards.
    """
    if root.data.size != 1 or root.ndim > 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if not p.requires_grad or gp is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    out: dict[Tensor, np.ndarray] = {}
    for node in order:
        g = grads.get(id(node))
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        out[node] = g
        node._parents = ()
        node._backward = None
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x.requires_grad = True
    x.grad = None
    y = f(x)
    grads = backward(y)
    analytic = grads.get(x, np.zeros_like(x.data))
    flat = x.data.reshape(-1)
    saved = x.data.copy()
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            flat[i] = saved.reshape(-1)[i] + step
            hi = float(f(x).data)
            flat[i] = saved.reshape(-1)[i] - step
            lo = float(f(x).data)
            flat[i] = saved.reshape(-1)[i]
            a = float(analytic.reshape(-1)[i])
            num = (hi - lo) / (2.0 * step)
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


def spawn_rng(seed: int, *names: str) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *names)``.

    The names are hashed (CRC-32) into the ``SeedSequence`` entropy, so
    ``spawn_rng(7, "data")`` and ``spawn_rng(7, "init")`` never overlap and
    the same pair always replays the same stream.
    """
    key = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(n.encode("utf-8")) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
