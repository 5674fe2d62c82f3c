"""
Tape-based reverse-mode differentiation over numpy arrays.

Every operation appends a node (output, parents, backward function) to the
tape of its inputs; `Tape.backward` walks the nodes in reverse creation
order, which is a valid topological order for a Wengert list.
"""
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import ShapeMismatchError

GELU_C = math.sqrt(2.0 / math.pi)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("value", "grad", "tape", "requires_grad", "name")

    def __init__(self, value: np.ndarray, tape: Optional["Tape"] = None, requires_grad: bool = False,
                 name: Optional[str] = None):
        self.value = np.asarray(value, dtype=float)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape})"


class Tape:
    """Wengert list of recorded operations. A disabled tape records nothing."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.nodes: List[Tuple[Tensor, Tuple[Tensor, ...], BackwardFn]] = []

    def param(self, value: np.ndarray, name: Optional[str] = None) -> Tensor:
        return Tensor(value, self, requires_grad=self.enabled, name=name)

    def constant(self, value: np.ndarray) -> Tensor:
        return Tensor(value, self)

    def record(self, value: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        needs = self.enabled and any(p.requires_grad for p in parents)
        out = Tensor(value, self, requires_grad=needs)
        if needs:
            self.nodes.append((out, tuple(parents), backward))
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into `.grad` of every tensor that requires it."""
        if loss.value.size != 1:
            raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.value)
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            for parent, g in zip(parents, fn(out.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _tape_of(*tensors: Tensor) -> Tape:
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return Tape(enabled=False)


def _lift(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(np.asarray(x, dtype=float))


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    tape = _tape_of(*(x for x in (a, b) if isinstance(x, Tensor)))
    a, b = _lift(a, tape), _lift(b, tape)
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    tape = _tape_of(*(x for x in (a, b) if isinstance(x, Tensor)))
    a, b = _lift(a, tape), _lift(b, tape)
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    tape = _tape_of(*(x for x in (a, b) if isinstance(x, Tensor)))
    a, b = _lift(a, tape), _lift(b, tape)
    return tape.record(a.value * b.value, (a, b),
                       lambda g: (unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _tape_of(a, b).record(a.value @ b.value, (a, b), backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _tape_of(x).record(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _tape_of(x).record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),))


def take_rows(x: Tensor, stop: int) -> Tensor:
    """x[:stop] along the first axis."""

    def backward(g):
        full = np.zeros_like(x.value)
        full[:stop] = g
        return (full,)

    return _tape_of(x).record(x.value[:stop], (x,), backward)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """
    Softmax over the last axis where `mask` is true; masked entries are exactly 0.

    Every row must keep at least one entry.
    """
    z = np.where(mask, x.value, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _tape_of(x).record(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.value.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.value.var(axis=-1, keepdims=True) + eps)
    xhat = (x.value - mu) * inv

    def backward(g):
        gxhat = g * gamma.value
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return _tape_of(x, gamma, beta).record(xhat * gamma.value + beta.value, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    v = x.value
    t = np.tanh(GELU_C * (v + 0.044715 * v ** 3))

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _tape_of(x).record(0.5 * v * (1.0 + t), (x,), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _tape_of(x).record(x.value * keep, (x,), lambda g: (g * keep,))


def total(x: Tensor) -> Tensor:
    return _tape_of(x).record(np.asarray(x.value.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def scale(x: Tensor, factor: float) -> Tensor:
    return _tape_of(x).record(x.value * factor, (x,), lambda g: (g * factor,))
