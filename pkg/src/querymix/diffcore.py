"""Minimal reverse-mode differentiation on top of numpy.

Every op builds a new :class:`Tensor` that remembers its parents and a local
backward rule. :func:`backward` records the reachable graph into a
:class:`Tape` (topologically ordered) and replays it in reverse.

Values are float64 throughout. Tensors are at most rank 3.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Module", "tensor", "no_grad", "is_grad_enabled", "backward",
    "finite_diff_check", "matmul", "add", "sub", "mul", "div", "scale", "neg",
    "relu", "sigmoid", "abs", "exp", "log", "power", "mean_all", "sum_all",
    "sum_axis", "mean_axis", "reshape", "transpose", "take", "concat", "maximum",
    "minimum", "softmax_rows", "logsumexp_rows", "l2_normalize_rows", "cosine_rows",
    "nearest_upsample2x", "layer_norm", "dilated_stencil",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array with optional participation in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ValueError(f"tensors are limited to rank 3, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

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
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data: np.ndarray, requires_grad: bool, parents: tuple, rule, op: str) -> Tensor:
    # fast path for op outputs: data is already a fresh float64 array
    t = Tensor.__new__(Tensor)
    t.data = data if data.dtype == np.float64 else data.astype(np.float64)
    t.requires_grad = requires_grad
    t.grad = None
    t._parents = parents
    t._backward = rule
    t.op = op
    return t


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule: Callable, op: str) -> Tensor:
    data = np.asarray(data)
    if getattr(_state, "enabled", True):
        for p in parents:
            if p.requires_grad:
                return _wrap(data, True, parents, rule, op)
    return _wrap(data, False, (), None, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    for x, y in zip(sa[::-1], sb[::-1]):
        if x != y and x != 1 and y != 1:
            raise ValueError(f"{name}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Topologically ordered record of the operations reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def replay(self, seed: np.ndarray) -> None:
        """Propagate ``seed`` (dL/droot) from the last node back to every leaf."""
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.record(loss).replay(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# Linear algebra and arithmetic
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), rule, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), rule, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at the origin
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # two-branch form avoids exp overflow on large |x|
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def power(x: Tensor, k: float) -> Tensor:
    xd = x.data
    k = float(k)
    return _result(xd ** k, (x,), lambda g: (g * k * xd ** (k - 1.0),), "power")


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data

    def rule(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _result(np.where(pick_a, a.data, b.data), (a, b), rule, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data

    def rule(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _result(np.where(pick_a, a.data, b.data), (a, b), rule, "minimum")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),),
                   "sum_all")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(np.array(x.data.mean()), (x,),
                   lambda g: (np.full(shape, float(g) / n),), "mean_all")


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), rule, "sum_axis")


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return scale(sum_axis(x, axis, keepdims), 1.0 / x.shape[axis])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def take(x: Tensor, index) -> Tensor:
    """numpy-style indexing; repeated indices accumulate in backward."""
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), rule, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), rule, "concat")


# ---------------------------------------------------------------------------
# Row-wise ops (last axis)
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), rule, "softmax_rows")


def logsumexp_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """log Σ exp over the last axis, optionally restricted to ``mask`` entries.

    Every row must keep at least one entry.
    """
    xd = x.data
    keep = np.ones_like(xd, dtype=bool) if mask is None else np.broadcast_to(mask, xd.shape)
    if not keep.any(axis=-1).all():
        raise ValueError("logsumexp_rows: a row has every entry masked out")
    masked = np.where(keep, xd, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(masked - top), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    out = (np.log(total) + top)[..., 0]
    weights = e / total
    return _result(out, (x,), lambda g: (weights * g[..., None],), "logsumexp_rows")


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.maximum(np.linalg.norm(x.data, axis=-1, keepdims=True), eps)
    out = x.data / norm

    def rule(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _result(out, (x,), rule, "l2_normalize_rows")


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity between matching rows of ``a`` and ``b``."""
    if a.shape != b.shape:
        raise ValueError(f"cosine_rows: shapes differ {a.shape} vs {b.shape}")
    return sum_axis(mul(l2_normalize_rows(a), l2_normalize_rows(b)), axis=-1)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    out = centered * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _result(out, (x,), rule, "layer_norm")


# ---------------------------------------------------------------------------
# Feature-map ops (h x w x d)
# ---------------------------------------------------------------------------


def nearest_upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ValueError(f"nearest_upsample2x expects h x w x d, got shape {x.shape}")
    h, w, d = x.shape
    out = x.data.repeat(2, axis=0).repeat(2, axis=1)
    return _result(out, (x,), lambda g: (g.reshape(h, 2, w, 2, d).sum(axis=(1, 3)),),
                   "nearest_upsample2x")


_STENCIL = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def dilated_stencil(x: Tensor, taps: Tensor, rate: int = 2) -> Tensor:
    """Depthwise 3x3 aggregation with dilation ``rate`` and zero padding.

    ``taps`` is 9 x d, one learnable weight per (offset, channel).
    """
    if x.ndim != 3 or taps.shape != (9, x.shape[2]):
        raise ValueError(f"dilated_stencil: bad shapes {x.shape}, {taps.shape}")
    h, w, _ = x.shape
    pad = np.pad(x.data, ((rate, rate), (rate, rate), (0, 0)))
    windows = [pad[rate + dy * rate: rate + dy * rate + h, rate + dx * rate: rate + dx * rate + w]
               for dy, dx in _STENCIL]
    kd = taps.data
    out = np.zeros_like(x.data)
    for t, win in enumerate(windows):
        out += win * kd[t]

    def rule(g):
        gk = np.stack([(g * win).sum(axis=(0, 1)) for win in windows])
        gpad = np.zeros_like(pad)
        for t, (dy, dx) in enumerate(_STENCIL):
            gpad[rate + dy * rate: rate + dy * rate + h, rate + dx * rate: rate + dx * rate + w] += g * kd[t]
        return gpad[rate:rate + h, rate:rate + w], gk

    return _result(out, (x, taps), rule, "dilated_stencil")


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


class Module:
    """Base class collecting Tensor parameters from attributes (recursively)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], params: Tensor | Iterable[Tensor],
                      eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads ``params`` (perturbed in place).
    Returns the max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = [params] if isinstance(params, Tensor) else list(params)

    with no_grad():
        first, second = f().item(), f().item()
    if first != second:
        raise ValueError("f is not deterministic: repeated evaluation differs")

    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)  # view; edits land in p.data
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                err = np.abs(af[i] - numeric) / max(1.0, np.abs(af[i]))
                worst = max(worst, float(err))
    return worst
