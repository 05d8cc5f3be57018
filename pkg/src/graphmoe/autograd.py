"""A small reverse-mode autodiff engine over numpy arrays.

Recording is explicit: operations are taped only inside a ``with Tape():``
block and only when at least one operand requires a gradient. Outside a
tape every op is a plain numpy computation, which is what inference and
finite-difference probes use.

There is no implicit broadcasting. Operands of the elementwise ops must
share a shape or be scalars; use :func:`expand` to broadcast explicitly.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DegenerateInputError, DimensionError

_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("tensor was not produced on a tape; nothing to differentiate")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar, all routed through the explicit ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended in execution order, so reversing the list is a valid
    topological order for the backward sweep. A tape can be swept once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, parents: tuple, backward: Callable) -> Tensor:
        if self.consumed:
            raise ContractError("cannot record on a tape that has already been swept")
        out.requires_grad = True
        out.tape_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(out, parents, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise ContractError("loss does not belong to this tape")
        if self.consumed:
            raise ContractError("tape already swept; run a fresh forward pass")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
        for idx in range(loss.tape_id, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if p.tape_id is not None and p._tape is self:
                    prev = grads.get(p.tape_id)
                    grads[p.tape_id] = pg if prev is None else prev + pg
                else:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
        # free saved activations
        self.nodes = []


def _tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _op(out_data: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        tape._record(out, tuple(parents), backward)
    return out


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # scalar operand: its gradient is the sum over the other operand
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, p] @ b[p, q]``."""
    a, b = _tensor(a), _tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, b.data.T) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = np.matmul(a2.T, g.reshape(-1, g.shape[-1]))
        return ga, gb

    return _op(out, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a[..., m, p] @ b[..., p, q]`` with identical leading dims."""
    a, b = _tensor(a), _tensor(b)
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _op(out, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = _tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs >= 2 dims, got {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {a.shape} -> {tuple(shape)}") from exc
    return _op(out, (a,), lambda g: (g.reshape(a.shape),))


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _tensor(a, b if isinstance(b, Tensor) else None)
    b = _tensor(b, a)
    _check_same(a, b, "add")
    return _op(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _tensor(a, b if isinstance(b, Tensor) else None)
    b = _tensor(b, a)
    _check_same(a, b, "sub")
    return _op(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def hadamard(a, b) -> Tensor:
    a = _tensor(a, b if isinstance(b, Tensor) else None)
    b = _tensor(b, a)
    _check_same(a, b, "hadamard")

    def backward(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _op(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_same(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _reduce_to(g / b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _op(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _tensor(a)
    c = float(c)  # a python float never widens the array dtype
    return _op(a.data * c, (a,), lambda g: (g * c,))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules)."""
    a = _tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"expand: {a.shape} -> {shape}") from exc

    lead = len(shape) - a.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(a.shape) if s == 1 and shape[lead + i] != 1
    )

    def backward(g):
        return (g.sum(axis=axes).reshape(a.shape) if axes else g,)

    return _op(np.ascontiguousarray(out), (a,), backward)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (dropout masks etc.)."""
    a = _tensor(a)
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise DimensionError(f"mul_const: {a.shape} vs {c.shape}")
    return _op(a.data * c, (a,), lambda g: (g * c,))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    a = _tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"masked_fill: mask {mask.shape} vs {a.shape}")
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _op(out, (a,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


def detach(a: Tensor) -> Tensor:
    return Tensor(_tensor(a).data)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    a = _tensor(a)
    out = _sigmoid(a.data)
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    a = _tensor(a)
    out = np.tanh(a.data)
    return _op(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a: Tensor) -> Tensor:
    a = _tensor(a)
    sig = _sigmoid(a.data)
    out = a.data * sig

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _op(out, (a,), backward)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis with a sequential normaliser."""
    a = _tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_last needs a nonempty last axis, got {a.shape}")
    x = a.data.reshape(-1, a.shape[-1])
    e = np.exp(x - x.max(axis=1, keepdims=True))
    out = (e / _kernels.row_sum(e)[:, None]).reshape(a.shape)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _op(out, (a,), backward)


ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "silu": silu, "softmax_last": softmax_last}


def activation(kind: str, x: Tensor) -> Tensor:
    return ACTIVATIONS[kind](x)


# --------------------------------------------------------------------------
# shape plumbing
# --------------------------------------------------------------------------


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last: leading shapes {a.shape} and {b.shape} differ")
    p = a.shape[-1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=-1)
    return _op(out, (a, b), lambda g: (g[..., :p], g[..., p:]))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    a = _tensor(a)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _op(a.data[..., start:stop].copy(), (a,), backward)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather ``a[idx]`` along axis 0; ``idx`` may repeat."""
    a = _tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        _kernels.scatter_add_rows(full.reshape(a.shape[0], -1), idx, g.reshape(idx.shape[0], -1))
        return (full,)

    return _op(a.data[idx], (a,), backward)


def scatter_rows(src: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Zeros of ``n_rows`` rows with ``src`` placed at distinct rows ``idx``."""
    src = _tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    out[idx] = src.data
    return _op(out, (src,), lambda g: (g[idx],))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _tensor(a)
    if axis is None:
        out = np.asarray(a.data.sum(dtype=a.dtype))
        return _op(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    ax = axis % a.ndim
    if ax == a.ndim - 1:
        out = _kernels.row_sum(a.data.reshape(-1, a.shape[-1])).reshape(a.shape[:-1])
    else:
        out = a.data.sum(axis=ax)
    if keepdims:
        out = np.expand_dims(out, ax)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _op(out, (a,), backward)


def mean(a: Tensor) -> Tensor:
    a = _tensor(a)
    return scale(sum(a), 1.0 / a.data.size)


# --------------------------------------------------------------------------
# fused layers
# --------------------------------------------------------------------------


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    x, gain = _tensor(x), _tensor(gain)
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise DimensionError(f"rms_norm: gain {gain.shape} vs input {x.shape}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    y, inv = _kernels.rms_norm_fwd(x2, gain.data, eps)

    def backward(g):
        gx, gg = _kernels.rms_norm_bwd(np.ascontiguousarray(g.reshape(x2.shape)), x2, gain.data, inv)
        return gx.reshape(x.shape), (gg if gain.requires_grad else None)

    return _op(y.reshape(x.shape), (x, gain), backward)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position embedding on the last axis (half-split pairing).

    ``cos``/``sin`` have shape ``[P, dh/2]`` matching ``x``'s last two axes.
    """
    x = _tensor(x)
    h = x.shape[-1] // 2
    if cos.shape != (x.shape[-2], h):
        raise DimensionError(f"rope: tables {cos.shape} vs input {x.shape}")
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _op(out, (x,), backward)


def cross_entropy(
    logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None, denom: float | None = None
) -> Tensor:
    """Mean token NLL over unmasked positions.

    ``denom`` overrides the divisor; gradient accumulation passes the token
    count of the whole optimizer step so micro-batches average per token.
    """
    logits = _tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise DimensionError(f"cross_entropy: targets outside [0, {v})")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise DegenerateInputError("cross_entropy: every position is masked")
    d = float(count if denom is None else denom)
    flat = np.ascontiguousarray(logits.data.reshape(-1, v))
    t = targets.reshape(-1)
    m = mask.reshape(-1)
    total, probs = _kernels.cross_entropy(flat, t, m)
    out = np.asarray(total / d, dtype=logits.dtype)

    def backward(g):
        grad = probs.copy()
        grad[np.arange(t.shape[0]), t] -= 1.0
        grad *= (m[:, None] * (float(g) / d)).astype(grad.dtype)
        return (grad.reshape(logits.shape),)

    return _op(out, (logits,), backward)
