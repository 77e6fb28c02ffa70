"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive is a small class with a ``forward`` that maps numpy arrays to
an output array (plus whatever it needs to remember) and a ``backward`` that
maps the upstream gradient to one gradient per input.  Calling a primitive
while a :class:`Tape` is active appends a node to that tape; ``backward``
then walks the nodes in reverse, visiting each exactly once.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_all(matmul(x, Tensor([[3.0], [4.0]])))
    >>> grads = backward(tape, y)
    >>> grads[x].tolist()
    [[3.0, 4.0]]

Only bias-add broadcasts; all other binary ops require equal shapes.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ValidationError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "backward",
    "matmul",
    "bmm",
    "add",
    "add_bias",
    "scale",
    "reshape",
    "transpose",
    "layer_norm",
    "gelu",
    "softmax",
    "mean",
    "sum_all",
    "embedding",
    "softmax_cross_entropy",
]


class Tensor:
    """Immutable float64 array, optionally marked trainable.

    Identity (not value) is used for hashing, so tensors can key gradient
    dictionaries.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Takes ownership of ``arr`` without copying.
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self, requires_grad: bool = False) -> "Tensor":
        """Same values, fresh identity, no history."""
        return Tensor._wrap(self.data, requires_grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Node:
    op: type
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict[str, Any]
    saved: Any = None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Used as a context manager; nested tapes are allowed and only the
    innermost one records.
    """

    nodes: list[Node] = field(default_factory=list)
    _produced: dict[int, int] = field(default_factory=dict, repr=False)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self._produced[id(node.output)] = len(self.nodes)
        self.nodes.append(node)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def leaves(self) -> list[Tensor]:
        """Tensors consumed by some node but produced by none, in first-use order."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if id(t) not in self._produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the recorded leaves.

        Returns the recomputed outputs in node order; they must equal the
        recorded ones bit for bit.
        """
        values: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            y, _ = node.op.forward(*args, **node.attrs)
            values[id(node.output)] = y
            out.append(y)
        return out


def _apply(op: type, inputs: Sequence[Tensor], **attrs) -> Tensor:
    y, saved = op.forward(*(t.data for t in inputs), **attrs)
    out = Tensor._wrap(y, any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None:
        tape.record(Node(op, tuple(inputs), out, attrs, saved))
    return out


def backward(
    tape: Tape,
    loss: Tensor,
    grad: np.ndarray | Tensor | None = None,
    wrt: Iterable[Tensor] = (),
) -> dict[Tensor, np.ndarray]:
    """Reverse pass over ``tape`` starting from ``loss``.

    ``loss`` must be a scalar unless an explicit upstream ``grad`` of the same
    shape is given (used when resuming a split backward pass at the cut).
    Returns a gradient for every trainable leaf on the tape, plus any tensor
    listed in ``wrt``; trainable leaves the loss does not depend on get zeros.
    Frozen leaves get nothing.
    """
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=np.float64)
        if seed.shape != loss.shape:
            raise DimensionError(f"upstream grad {seed.shape} does not match output {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): seed}
    stop = tape._produced[id(loss)]
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        wanted = [t.requires_grad for t in node.inputs]
        if not any(wanted):
            continue
        in_grads = node.op.backward(g, node.saved, *(t.data for t in node.inputs), **node.attrs)
        for t, need, gi in zip(node.inputs, wanted, in_grads):
            if not need or gi is None:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    result: dict[Tensor, np.ndarray] = {}
    for t in list(tape.leaves()) + list(wrt):
        if t.requires_grad and t not in result:
            g = grads.get(id(t))
            result[t] = np.zeros_like(t.data) if g is None else g
    return result


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


class _MatMul:
    @staticmethod
    def forward(a, b):
        return a @ b, None

    @staticmethod
    def backward(g, saved, a, b):
        return g @ b.T, a.T @ g


class _BatchMatMul:
    @staticmethod
    def forward(a, b):
        return np.matmul(a, b), None

    @staticmethod
    def backward(g, saved, a, b):
        return np.matmul(g, b.transpose(0, 2, 1)), np.matmul(a.transpose(0, 2, 1), g)


class _Add:
    @staticmethod
    def forward(a, b):
        return a + b, None

    @staticmethod
    def backward(g, saved, a, b):
        return g, g


class _AddBias:
    @staticmethod
    def forward(x, b):
        return x + b, None

    @staticmethod
    def backward(g, saved, x, b):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)


class _Scale:
    @staticmethod
    def forward(x, *, c):
        return x * c, None

    @staticmethod
    def backward(g, saved, x, *, c):
        return (g * c,)


class _Reshape:
    @staticmethod
    def forward(x, *, shape):
        return x.reshape(shape).copy(), None

    @staticmethod
    def backward(g, saved, x, *, shape):
        return (g.reshape(x.shape),)


class _Transpose:
    @staticmethod
    def forward(x, *, axes):
        return np.ascontiguousarray(x.transpose(axes)), None

    @staticmethod
    def backward(g, saved, x, *, axes):
        return (np.ascontiguousarray(g.transpose(np.argsort(axes))),)


class _LayerNorm:
    @staticmethod
    def forward(x, gamma, beta, *, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return xhat * gamma + beta, (xhat, inv)

    @staticmethod
    def backward(g, saved, x, gamma, beta, *, eps):
        xhat, inv = saved
        h = x.shape[-1]
        gx = g * gamma
        dx = inv * (gx - gx.sum(axis=-1, keepdims=True) / h
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / h)
        dgamma = (g * xhat).reshape(-1, h).sum(axis=0)
        dbeta = g.reshape(-1, h).sum(axis=0)
        return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class _Gelu:
    @staticmethod
    def forward(x):
        t = np.tanh(_GELU_C * (x + _GELU_K * (x * x * x)))
        return 0.5 * x * (1.0 + t), t

    @staticmethod
    def backward(g, t, x):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class _Softmax:
    @staticmethod
    def forward(x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    @staticmethod
    def backward(g, y, x):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


class _Mean:
    @staticmethod
    def forward(x, *, axis):
        return x.mean(axis=axis), None

    @staticmethod
    def backward(g, saved, x, *, axis):
        n = x.shape[axis]
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)


class _SumAll:
    @staticmethod
    def forward(x):
        return np.asarray(x.sum()), None

    @staticmethod
    def backward(g, saved, x):
        return (np.full(x.shape, float(g)),)


class _Embedding:
    @staticmethod
    def forward(table, *, ids):
        return table[ids], None

    @staticmethod
    def backward(g, saved, table, *, ids):
        out = np.zeros_like(table)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)


class _SoftmaxCrossEntropy:
    @staticmethod
    def forward(logits, *, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(logits.shape[0])
        loss = (lse - z[rows, labels]).mean()
        return np.asarray(loss), (z, lse)

    @staticmethod
    def backward(g, saved, logits, *, labels):
        z, lse = saved
        p = np.exp(z - lse[:, None])
        p[np.arange(logits.shape[0]), labels] -= 1.0
        return (p * (float(g) / logits.shape[0]),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _apply(_MatMul, (a, b))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading dimension: (n,m,k)·(n,k,p)."""
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    return _apply(_BatchMatMul, (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _apply(_Add, (a, b))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis of ``x``."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    return _apply(_AddBias, (x, b))


def scale(x: Tensor, c: float) -> Tensor:
    return _apply(_Scale, (x,), c=float(c))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return _apply(_Reshape, (x,), shape=shape)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for {x.shape}")
    return _apply(_Transpose, (x,), axes=axes)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs input {x.shape}")
    if not eps > 0:
        raise ValidationError("layer_norm: eps must be positive")
    return _apply(_LayerNorm, (x, gamma, beta), eps=float(eps))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    return _apply(_Gelu, (x,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    return _apply(_Softmax, (x,))


def mean(x: Tensor, axis: int) -> Tensor:
    return _apply(_Mean, (x,), axis=axis % x.data.ndim)


def sum_all(x: Tensor) -> Tensor:
    return _apply(_SumAll, (x,))


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: ``table[ids]`` with shape ``ids.shape + (H,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ValidationError(f"embedding: ids must lie in [0, {v})")
    return _apply(_Embedding, (table,), ids=ids)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"cross entropy: labels must lie in [0, {c})")
    return _apply(_SoftmaxCrossEntropy, (logits,), labels=labels)
