"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Only the primitives the DiT graph needs are provided. Every primitive has a
hand-written backward; ``finite_difference_check`` is the independent oracle
used to verify them.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mean(square(matmul(x, w)))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed primitives.

    ``backward`` walks the record in reverse, visiting each node once.
    Tapes nest; the innermost active tape records.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=DTYPE)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    stack = _tape_stack()
    tape = stack[-1] if stack else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient 0 at the kink
    active = a.data > 0
    return _record(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _record(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    """Basic (non-overlapping) indexing. Use ``take`` for gathers with repeats."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(np.array(a.data[index]), (a,), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        return (full,)

    if indices.ndim != 1 and axis != 0:
        raise DimensionError("multi-dimensional gathers are only supported along axis 0")
    return _record(np.take(a.data, indices, axis=axis), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# ---------------------------------------------------------------------------
# linear algebra and normalizations
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes so both passes are single GEMMs
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), backward_folded)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    y = _softmax_np(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), backward)


def layer_norm(x, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record(xhat, (x,), backward)


def _swap_pairs(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]
    return out


def rotate_pairs(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs ``(x[2k], x[2k+1])``.

    ``cos``/``sin`` broadcast against ``x`` and repeat each angle for both
    members of a pair.
    """
    x = as_tensor(x)
    out = x.data * cos + _swap_pairs(x.data) * sin

    def backward(g):
        # the pair-swap map is antisymmetric, so its transpose is its negation
        return (g * cos - _swap_pairs(g * sin),)

    return _record(out, (x,), backward)


def minmax_normalize(x) -> Tensor:
    """Rescale the last axis to [0, 1]; a constant row maps to zeros."""
    x = as_tensor(x)
    lo = x.data.min(axis=-1, keepdims=True)
    hi = x.data.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span <= 0
    safe = np.where(flat, 1.0, span)
    y = np.where(flat, 0.0, (x.data - lo) / safe)
    i_lo = x.data.argmin(axis=-1)[..., None]
    i_hi = x.data.argmax(axis=-1)[..., None]

    def backward(g):
        g = np.where(flat, 0.0, g)
        s = g.sum(axis=-1, keepdims=True)
        sy = (g * y).sum(axis=-1, keepdims=True)
        gx = g / safe
        np.put_along_axis(gx, i_lo, np.take_along_axis(gx, i_lo, -1) + (sy - s) / safe, -1)
        np.put_along_axis(gx, i_hi, np.take_along_axis(gx, i_hi, -1) - sy / safe, -1)
        return (gx,)

    return _record(y, (x,), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState | None = None,
    lr: float = 2e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update. Pure: inputs are left untouched.

    Decay is decoupled and applied as ``p * (1 - lr * wd)`` before the
    bias-corrected moment step. Missing gradients count as zero.
    """
    state = state or AdamState()
    step = state.step + 1
    b1, b2 = betas
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"adamw: shape mismatch for {name!r}: {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        decayed = p * (1.0 - lr * weight_decay)
        new_params[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step, new_m, new_v)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheck:
    errors: dict[str, float]
    tol: float | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.tol is None or self.max_error <= self.tol


def _scalar(value) -> float:
    out = float(np.asarray(value.data if isinstance(value, Tensor) else value))
    if not np.isfinite(out):
        raise NumericError("objective evaluated to a non-finite value")
    return out


def finite_difference_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheck:
    """Compare tape gradients of scalar ``f`` with central differences.

    The error for each parameter tensor is
    ``max |analytic - numeric| / max(max |analytic|, 1e-8)`` over the checked
    entries. ``max_entries`` samples that many entries per tensor.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
    with Tape() as tape:
        out = f(leaves)
    _scalar(out)
    tape.backward(out)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, value in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        numeric = np.empty(flat_idx.size)
        for n, idx in enumerate(flat_idx):
            vals = []
            for sign in (1.0, -1.0):
                probe = dict(base)
                bumped = value.copy()
                bumped.flat[idx] += sign * h
                probe[name] = bumped
                with no_grad():
                    vals.append(_scalar(f({k: Tensor(v) for k, v in probe.items()})))
            numeric[n] = (vals[0] - vals[1]) / (2.0 * h)
        picked = analytic.reshape(-1)[flat_idx]
        denom = max(float(np.abs(picked).max(initial=0.0)), 1e-8)
        errors[name] = float(np.abs(picked - numeric).max(initial=0.0)) / denom
    return GradCheck(errors, tol)


def grads_of(tensors: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Collect leaf gradients; leaves unused by the graph get zeros."""
    return {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()
    }


def parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def stack_scalars(values: Iterable[Tensor]) -> Tensor:
    return concat([reshape(v, (1,)) for v in values], axis=0)
