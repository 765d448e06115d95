"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a tensor that requires gradients records a node holding
its parents and a closure mapping the output gradient to parent gradients.
Nodes carry a global sequence number, so the graph of one loss is the set of
nodes reachable from it and ``backward`` replays them in reverse creation
order, each exactly once.

Broadcasting rule: elementwise binary ops accept operands of equal shape, or
one 0-d (scalar) operand combined with a tensor of any shape. Anything else
must be spelled out with :func:`expand`, :func:`reshape` or :func:`concat`.
The one exception is :func:`affine`, whose bias vector is added to every row.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "DimensionError", "NumericError", "DegenerateError",
    "NonDeterminismError", "tensor", "constant", "no_grad", "detach",
    "add", "sub", "mul", "div", "neg", "scalar_mul", "matmul", "affine",
    "relu", "sigmoid", "exp", "log", "sqrt", "clip", "sum", "mean",
    "concat", "concat_rows", "reshape", "transpose", "getitem", "expand",
    "apply_primitive", "softmax_rows", "log_softmax_rows", "pairwise_distance",
    "row_sq_distance", "cross_entropy", "distance_ce", "cosine_gram",
    "frobenius_sq", "backward", "grad_check", "SGD",
]


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class DegenerateError(ValueError):
    pass


class NonDeterminismError(RuntimeError):
    pass


_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, metrics)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(value: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only fall back to the full scan otherwise
    total = value.sum()
    if not np.isfinite(total) and not np.all(np.isfinite(value)):
        raise NumericError(f"{op}: non-finite value produced")


class Tensor:
    """A float64 array, an optional gradient buffer and its graph linkage."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents",
                 "_backward", "_op", "_seq")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.array(value, dtype=np.float64)
        _check_finite(value, "tensor")
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
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
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(value, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    _check_finite(value, op)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = op
    return out


# Values produced by ``detach`` are replayed from this list (when set) so that
# finite differences see the same constants the analytic gradient assumes.
def _detach_hook():
    return getattr(_state, "replay", None)


def detach(x: Tensor) -> Tensor:
    """Identity forward, zero backward (the stop-gradient marker)."""
    x = _as_tensor(x)
    hook = _detach_hook()
    if hook is not None:
        return Tensor(hook(x.value))
    return Tensor(x.value)


# ---------------------------------------------------------------- elementwise

def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("elementwise_mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)),
                 "elementwise_mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_reduce_to(g / bv, av.shape),
                            _reduce_to(-g * out / bv, bv.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scalar_mul")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise NumericError("log: non-positive input")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(x)
    safe = np.where(out > 0, out, 1.0)
    return _make(out, (a,), lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),), "sqrt")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.value.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    out = a.value.sum(axis=axis)
    return _make(out, (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scalar_mul(sum(a, axis), 1.0 / n)


# ------------------------------------------------------------------- shaping

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with the bias vector added to every row."""
    if (x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]
            or b.shape != (w.shape[1],)):
        raise DimensionError(
            f"affine: incompatible shapes {x.shape}, {w.shape} and {b.shape}")
    xv, wv = x.value, w.value
    return _make(xv @ wv + b.value, (x, w, b),
                 lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)), "affine")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        shapes = [p.shape for p in parts]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, tuple(parts),
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=0)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    return _make(a.value.T, (a,), lambda g: (g.T,), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    basic = all(isinstance(i, (slice, int)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.value[idx]), (a,), bw, "getitem")


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules); grads are summed back."""
    old = a.shape
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {old} to {shape}") from exc
    lead = len(shape) - len(old)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), bw, "expand")


_PRIMITIVES = {
    "matmul": matmul, "add": add, "sub": sub, "elementwise_mul": mul,
    "scalar_mul": scalar_mul, "relu": relu, "sigmoid": sigmoid, "exp": exp,
    "log": log, "sum": sum, "mean": mean, "concat_rows": lambda *p: concat(p, 0),
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------ fused kernels

def log_softmax_rows(z: Tensor) -> Tensor:
    if z.value.ndim != 2:
        raise DimensionError(f"log_softmax_rows: expected a matrix, got {z.shape}")
    shifted = z.value - z.value.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _make(out, (z,), lambda g: (g - p * g.sum(axis=1, keepdims=True),),
                 "log_softmax_rows")


def softmax_rows(z: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    if z.value.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got {z.shape}")
    e = np.exp(z.value - z.value.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return _make(p, (z,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),),
                 "softmax_rows")


def pairwise_distance(a: Tensor, p: Tensor) -> Tensor:
    """Euclidean distance between every row of ``a`` and every row of ``p``.

    The gradient at a zero distance is taken as zero.
    """
    if a.value.ndim != 2 or p.value.ndim != 2 or a.shape[1] != p.shape[1]:
        raise DimensionError(
            f"pairwise_distance: incompatible shapes {a.shape} and {p.shape}")
    diff = a.value[:, None, :] - p.value[None, :, :]
    dist = np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))

    def bw(g):
        coef = np.divide(g, dist, out=np.zeros_like(dist), where=dist > 0)
        ga = np.einsum("nk,nkd->nd", coef, diff)
        gp = -np.einsum("nk,nkd->kd", coef, diff)
        return ga, gp

    return _make(dist, (a, p), bw, "pairwise_distance")


row_sq_distance = pairwise_distance


def _one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    oh = np.zeros((labels.size, k))
    oh[np.arange(labels.size), labels] = 1.0
    return oh


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    n, k = logits.shape
    oh = _one_hot(labels, k)
    if oh.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} rows but {oh.shape[0]} labels")
    return scalar_mul(sum(mul(log_softmax_rows(logits), constant(oh))), -1.0 / n)


def distance_ce(dist: Tensor, labels) -> Tensor:
    """Cross-entropy of the softmax over negated distances.

    Accepts a single distance row (K,) with one label, or a (n, K) matrix
    with n labels, in which case the batch mean is returned.
    """
    if dist.value.ndim == 1:
        if dist.shape[0] < 2:
            raise ValueError("distance_ce needs at least two classes")
        dist = reshape(dist, (1, -1))
    return cross_entropy(neg(dist), labels)


def cosine_gram(p: Tensor) -> Tensor:
    """Cosine similarity between all pairs of rows of ``p``."""
    norms = np.sqrt((p.value ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise DegenerateError("cosine_gram: zero-norm row (degenerate prototype)")
    k, d = p.shape
    row_norm = sqrt(sum(mul(p, p), axis=1))
    unit = div(p, expand(reshape(row_norm, (k, 1)), (k, d)))
    gram = matmul(unit, transpose(unit))
    return gram


def frobenius_sq(m: Tensor) -> Tensor:
    return sum(mul(m, m))


# ------------------------------------------------------------------ backward

def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes, seen, stack = [], set(), [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.value)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _check_finite(pg, f"backward through {node._op}")
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


@contextmanager
def _replaying(values: list, record: bool):
    it = iter(values)

    def hook(v):
        if record:
            values.append(v.copy())
            return v
        return next(it)

    prev = getattr(_state, "replay", None)
    _state.replay = hook
    try:
        yield
    finally:
        _state.replay = prev


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` builds a scalar loss from the current values of ``params``. Values
    passed through :func:`detach` are held at their base-point values during
    the perturbed evaluations, so the check measures the gradient the
    stop-gradient markers define.
    """
    params = list(params)
    frozen: list = []
    for p in params:
        p.grad = None
    with _replaying(frozen, record=True):
        loss = f()
    base = loss.item()
    backward(loss)
    with no_grad(), _replaying(frozen, record=False):
        again = f().item()
    if again != base:
        raise NonDeterminismError(f"f re-evaluated to {again!r}, expected {base!r}")

    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad(), _replaying(frozen, record=False):
                up = f().item()
            flat[i] = orig - eps
            with no_grad(), _replaying(frozen, record=False):
                down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


# ----------------------------------------------------------------- optimizer

class SGD:
    """SGD with heavy-ball momentum: v = mu*v + g; p -= lr*v."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if v.shape != p.value.shape:
                raise DimensionError(f"sgd: velocity {v.shape} vs parameter {p.shape}")
            if p.grad is not None:
                v *= self.momentum
                v += p.grad
            elif self.momentum:
                v *= self.momentum
            p.value -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
