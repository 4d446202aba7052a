"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active and at least
one operand requires a gradient; otherwise they run as plain numpy code.  This
keeps evaluation-only forward passes free of bookkeeping.

Example
-------
>>> w = Tensor([2.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = (w * Tensor([3.0])).sum()
>>> tape.gradient(loss, [w])[0]
array([3.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def sum(self):
        return sum_(self)


@dataclass
class Node:
    """One recorded primitive: operands, output and the vector-Jacobian rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Records primitive operations in execution order.

    Use as a context manager; nested tapes each receive the nodes created
    while they are active.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Reverse-accumulate d(loss)/d(source) for every source tensor.

        Sources that do not influence ``loss`` receive a zero array.
        """
        if loss.size != 1:
            raise ContractError(f"gradient root must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            for operand, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not operand.requires_grad:
                    continue
                key = id(operand)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    result = Tensor(out)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = Node(op, inputs, result, backward)
        for tape in _ACTIVE_TAPES:
            tape.record(node)
    return result


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not match")

    def backward(g):
        ga = g if a.size == g.size else np.sum(g).reshape(a.shape)
        gb = g if b.size == g.size else np.sum(g).reshape(b.shape)
        return ga, gb

    return _emit("add", (a, b), a.data + b.data, backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not match")

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = np.sum(ga).reshape(a.shape)
        if gb.shape != b.shape:
            gb = np.sum(gb).reshape(b.shape)
        return ga, gb

    return _emit("mul", (a, b), a.data * b.data, backward)


def sum_(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum()), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _emit("reshape", (a,), a.data.reshape(shape), backward)


def flatten(a: Tensor, batched: bool) -> Tensor:
    """Collapse feature axes, keeping the leading batch axis when ``batched``."""
    shape = (a.shape[0], -1) if batched else (-1,)
    return reshape(a, shape)


def affine_transform(w: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """Return ``W x + b`` for a single input or ``X W^T + b`` for a batch."""
    if w.data.ndim != 2 or b.shape != (w.shape[0],):
        raise DimensionError(f"affine: weight {w.shape} and bias {b.shape} do not conform")
    if x.data.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T + b.data

    def backward(g):
        if x.data.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gw, gb, g @ w.data

    return _emit("affine", (w, b, x), out, backward)


def elementwise_relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def backward(g):
        return (g * active,)

    return _emit("relu", (x,), np.where(active, x.data, 0.0), backward)


relu = elementwise_relu


def conv2d(kernels: Tensor, x: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) stride-1 cross-correlation.

    ``kernels`` has shape (c_out, c_in, k, k); ``x`` is (c_in, H, W) or
    (n, c_in, H, W).  The output spatial size is (H - k + 1, W - k + 1).
    """
    if kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be 4-d, got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernels {kernels.shape}")
    height, width = xd.shape[2:]
    if kh > height or kw > width:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {height}x{width}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {c_out} filters")

    windows = sliding_window_view(xd, (kh, kw), axis=(2, 3))
    out = np.einsum("ncijab,ocab->noij", windows, kernels.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    oh, ow = out.shape[2:]

    def backward(g):
        g4 = g[None] if single else g
        gk = np.einsum("noij,ncijab->ocab", g4, windows, optimize=True)
        gx = np.zeros_like(xd)
        for a in range(kh):
            for b_ in range(kw):
                gx[:, :, a:a + oh, b_:b_ + ow] += np.einsum(
                    "noij,oc->ncij", g4, kernels.data[:, :, a, b_], optimize=True
                )
        if single:
            gx = gx[0]
        grads = [gk, gx]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (kernels, x) if bias is None else (kernels, x, bias)
    return _emit("conv2d", inputs, out[0] if single else out, backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    A 1-d ``logits`` with an integer label gives the single-sample loss.
    The log-sum-exp is evaluated after subtracting the row maximum.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels))
    if z2.ndim != 2 or y.shape != (z2.shape[0],):
        raise DimensionError(f"cross-entropy: logits {z.shape} vs labels {y.shape}")
    k = z2.shape[1]
    if not np.issubdtype(y.dtype, np.integer):
        raise IndexError("class labels must be integers")
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"class label out of range for {k} classes")
    n = z2.shape[0]
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(log_norm - shifted[rows, y])

    def backward(g):
        p = np.exp(shifted - log_norm[:, None])
        p[rows, y] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return _emit("softmax_xent", (logits,), np.asarray(loss), backward)


def gradients(tape: Tape, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional alias for :meth:`Tape.gradient`."""
    return tape.gradient(loss, sources)


def finite_difference_oracle(f: Callable[[np.ndarray], float], theta, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    ``theta`` may be an array or anything exposing a ``flat`` array (such as a
    ParameterStore).  Each coordinate costs two evaluations of ``f``.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    base = np.array(getattr(theta, "flat", theta), dtype=np.float64).ravel()
    grad = np.empty_like(base)
    probe = base.copy()
    for i in range(base.size):
        probe[i] = base[i] + h
        up = f(probe)
        probe[i] = base[i] - h
        down = f(probe)
        probe[i] = base[i]
        grad[i] = (up - down) / (2.0 * h)
    return grad
