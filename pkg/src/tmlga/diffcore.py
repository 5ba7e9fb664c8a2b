"""Small reverse-mode autodiff core over float64 numpy arrays.

Every differentiable operation builds its output through :func:`make_op`,
which records a :class:`TapeNode` holding the op tag, its inputs and a
closure mapping the output gradient to one gradient per input. Nodes carry
a global, monotonically increasing sequence number, so sorting the nodes
reachable from a loss by that number reproduces the order in which they were
appended during the forward pass; :func:`backward` sweeps them in reverse.

Arrays may carry a leading batch dimension. Elementwise ops broadcast like
numpy and reduce the gradient back to each input's shape.

Randomness goes through :class:`Rng`, a thin wrapper over numpy's Philox
counter-based generator keyed by ``(seed, stream)``.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, EmptyInputError, ParameterError

_seq = itertools.count()
_state = threading.local()

UNARY_KINDS = ("tanh", "sigmoid", "log", "exp", "neg")


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """Dense float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return apply_unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, inputs: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap ``data`` as the output of ``op``; record a tape node if needed.

    ``backward_fn`` receives the output gradient and returns one array (or
    None) per input, each shaped like that input.
    """
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``leaves`` that the loss does not depend on end up with
    an all-zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = loss.grad + np.ones_like(loss.data)
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(i for i in t.node.inputs if i.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda x: x.node.seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b), "add",
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b), "sub",
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b), "mul",
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(out, (a, b), "div",
                   lambda g: (unbroadcast(g / b.data, a.shape),
                              unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics for 2-D and batched operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_op(a.data @ b.data, (a, b), "matmul", bw)


def apply_unary(kind: str, t, floor: float | None = None) -> Tensor:
    """Elementwise tanh, sigmoid, log, exp or neg.

    ``floor`` only applies to ``log``: inputs below it are replaced by it
    and receive zero gradient. Without a floor, non-positive inputs raise.
    """
    t = as_tensor(t)
    x = t.data
    if kind == "tanh":
        y = np.tanh(x)
        return make_op(y, (t,), kind, lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = _sigmoid(x)
        return make_op(y, (t,), kind, lambda g: (g * y * (1.0 - y),))
    if kind == "exp":
        y = np.exp(x)
        return make_op(y, (t,), kind, lambda g: (g * y,))
    if kind == "neg":
        return make_op(-x, (t,), kind, lambda g: (-g,))
    if kind == "log":
        if floor is None:
            bad = np.argwhere(~(x > 0))
            if bad.size:
                idx = tuple(int(i) for i in bad[0])
                raise DomainError(f"log of non-positive entry {x[idx]!r} at index {idx}")
            return make_op(np.log(x), (t,), kind, lambda g: (g / x,))
        live = x > floor
        xc = np.where(live, x, floor)
        return make_op(np.log(xc), (t,), kind, lambda g: (np.where(live, g / xc, 0.0),))
    raise ParameterError(f"unknown unary op {kind!r}; expected one of {UNARY_KINDS}")


def tanh(t):
    return apply_unary("tanh", t)


def sigmoid(t):
    return apply_unary("sigmoid", t)


def exp(t):
    return apply_unary("exp", t)


def log(t, floor: float | None = None):
    return apply_unary("log", t, floor=floor)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ------------------------------------------------------------------ shaping

def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    return make_op(t.data.reshape(shape), (t,), "reshape", lambda g: (g.reshape(old),))


def transpose(t) -> Tensor:
    """Swap the last two axes."""
    t = as_tensor(t)
    return make_op(np.swapaxes(t.data, -1, -2), (t,), "transpose",
                   lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return make_op(np.concatenate([t.data for t in ts], axis=axis), ts, "concat",
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(t, index: np.ndarray) -> Tensor:
    """Gather along axis 1: ``out[b, i] = t[b, index[b, i]]`` for ``t`` of shape (B, T, ...)."""
    t = as_tensor(t)
    index = np.asarray(index, dtype=np.intp)
    bidx = np.arange(t.shape[0])[:, None]
    out = t.data[bidx, index]

    def bw(g):
        gt = np.zeros_like(t.data)
        np.add.at(gt, (bidx, index), g)
        return (gt,)

    return make_op(out, (t,), "take_rows", bw)


# --------------------------------------------------------------- reductions

def tsum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    shape = t.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(t.data, axis=axis, keepdims=keepdims), (t,), "sum", bw)


def reduce_mean_rows(t, lengths: Sequence[int] | None = None) -> Tensor:
    """Mean over the row axis (-2) of an (m, d) or (B, m, d) tensor.

    With ``lengths``, batch element b averages only its first ``lengths[b]``
    rows; padded rows get zero gradient.
    """
    t = as_tensor(t)
    if t.ndim < 2:
        raise DimensionError(f"reduce_mean_rows needs a matrix, got shape {t.shape}")
    m = t.shape[-2]
    if m == 0:
        raise EmptyInputError("reduce_mean_rows over zero rows")
    if lengths is None:
        w = np.full((m, 1), 1.0 / m)
    else:
        lengths = np.asarray(lengths)
        if t.ndim != 3 or lengths.shape != (t.shape[0],):
            raise DimensionError(f"lengths {lengths.shape} do not match batch shape {t.shape}")
        if np.any(lengths < 1):
            raise EmptyInputError("reduce_mean_rows over zero rows")
        w = (np.arange(m)[None, :] < lengths[:, None]) / lengths[:, None]
        w = w[..., None]
    out = np.sum(t.data * w, axis=-2)
    return make_op(out, (t,), "mean_rows", lambda g: (np.expand_dims(g, -2) * w,))


def _masked(x: np.ndarray, mask, axis: int):
    if mask is None:
        return x, None
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if np.any(~mask.any(axis=axis)):
        raise EmptyInputError("softmax over an all-masked slice")
    return np.where(mask, x, -np.inf), mask


def softmax(t, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax; masked-out positions get probability 0."""
    t = as_tensor(t)
    if t.size == 0 or t.shape[axis] == 0:
        raise EmptyInputError("softmax of an empty tensor")
    x, mask = _masked(t.data, mask, axis)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return make_op(y, (t,), "softmax", bw)


def log_softmax(t, axis: int = -1, mask=None) -> Tensor:
    """Log of :func:`softmax`; masked-out positions hold 0 and get no gradient."""
    t = as_tensor(t)
    if t.size == 0 or t.shape[axis] == 0:
        raise EmptyInputError("log_softmax of an empty tensor")
    x, mask = _masked(t.data, mask, axis)
    z = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    if mask is not None:
        y = np.where(mask, y, 0.0)

    def bw(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return make_op(y, (t,), "log_softmax", bw)


# ------------------------------------------------------------------ dropout

def dropout(t, p: float, rng: "Rng", training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p), eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    t = as_tensor(t)
    if not training or p == 0.0:
        return t
    keep = rng.random(t.shape) >= p
    scale = keep / (1.0 - p)
    return make_op(t.data * scale, (t,), "dropout", lambda g: (g * scale,))


# ---------------------------------------------------------------------- rng

class Rng:
    """Seeded Philox stream keyed by ``(seed, stream)``.

    Philox is counter based, so a given key and counter produce the same
    draws on every platform. ``state`` / ``from_state`` round-trip the exact
    stream position through plain JSON-compatible values.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
                       dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self.gen = np.random.Generator(self._bitgen)

    def random(self, shape=None) -> np.ndarray:
        return self.gen.random(shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self.gen.uniform(low, high, shape)

    def normal(self, scale: float = 1.0, shape=None) -> np.ndarray:
        return self.gen.normal(0.0, scale, shape)

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in the closed range [low, high]."""
        return int(self.gen.integers(low, high, endpoint=True))

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    @property
    def state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], state["stream"])
        rng._bitgen.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array(state["counter"], dtype=np.uint64),
                      "key": np.array(state["key"], dtype=np.uint64)},
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng


# --------------------------------------------------------------- grad check

def grad_check(f: Callable[[list[Tensor]], Tensor], inputs: Sequence[np.ndarray],
               h: float = 1e-5, coords: int | None = None, rng: Rng | None = None) -> float:
    """Max relative error between backward() and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. With
    ``coords``, only that many coordinates, drawn uniformly from all inputs
    together, are perturbed (analytic gradients are still computed in full).
    A NaN in either estimate returns ``inf``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(leaves)
    backward(out, leaves)
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    picks = np.arange(total)
    if coords is not None and total > coords:
        picks = np.sort((rng or Rng(0)).gen.choice(total, size=coords, replace=False))
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    with no_grad():
        for g in picks:
            k = int(np.searchsorted(offsets, g, side="right") - 1)
            i = int(g - offsets[k])
            flat = arrays[k].reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = f([Tensor(a) for a in arrays]).item()
            flat[i] = orig - h
            fm = f([Tensor(a) for a in arrays]).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = leaves[k].grad.reshape(-1)[i]
            if not (np.isfinite(num) and np.isfinite(ana)):
                return float("inf")
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    return worst
