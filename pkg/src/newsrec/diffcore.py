"""Dense-array substrate with taped reverse-mode differentiation.

Tensors wrap numpy arrays (float32 by default) and record every operation
on a per-expression tape; calling :meth:`Tensor.backward` on a scalar
result walks the tape in reverse and accumulates gradients into the
``grad`` slot of every tensor that requires them.  The tape is rebuilt
from scratch on every forward pass, so there is no persistent graph and
no graph-reset API: dropping the result drops the tape.

Conventions:

* Array data is float32.  Feeding float64 arrays through is supported
  (the ops follow numpy promotion), which the gradient-verification
  harness uses to get a clean noise floor.
* Scalar loss reductions that need more headroom than float32 offers
  accumulate in float64 (see the fused ops in :mod:`newsrec.objectives`).
* Softmax-style ops are stabilized by max-subtraction.

``exp`` is left unclamped: like ``log`` it has an effective domain
(inputs above ~88 overflow float32) and callers are expected to shift
inputs first, which every internal user does.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateMaskError,
    DegenerateVectorError,
    DomainError,
    ShapeError,
)

Array = np.ndarray

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the ``with`` block (read-only inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value) -> Array:
    arr = np.asarray(value)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense array with an optional same-shape gradient accumulator.

    Tensors are immutable after construction except for gradient
    accumulation; parameters are additionally mutated in place by
    :func:`adam_step` between training steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __float__(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"cannot convert tensor of shape {self.shape} to a scalar")
        return float(self.data.reshape(()))

    def item(self) -> float:
        return float(self)

    def numpy(self) -> Array:
        """The underlying array (a view; treat as read-only)."""
        return self.data

    # -- gradients -----------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(tensor) into ``grad`` for every reachable tensor.

        ``self`` must be a scalar.  Repeated calls without clearing grads
        accumulate.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        # Run this pass on cleared slots, then fold any pre-existing grads
        # back in, so repeated calls accumulate instead of compounding.
        stash = [node.grad for node in topo]
        for node in topo:
            node.grad = None
        _add_grad(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node, previous in zip(topo, stash):
            if previous is not None:
                node.grad = previous if node.grad is None else node.grad + previous

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_coerce(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return scale(_sum(self, axis=axis), 1.0 / max(n, 1))

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _add_grad(t: Tensor, g: Array) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def make_node(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    """Record a custom (fused) operation on the tape.

    ``backward`` receives the output gradient and must push gradients into
    the parents via ``_add_grad``.  This is the extension point used by the
    fused loss ops.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- core operations ----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style leading-dimension broadcasting.

    Both operands must have at least two dimensions and agree on the
    inner dimension.
    """
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}") from exc

    def backward(g: Array) -> None:
        _add_grad(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _add_grad(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return make_node(data, (a, b), backward)


def softmax_masked(x, mask=None) -> Tensor:
    """Exp-normalize the last axis over unmasked positions.

    Masked positions produce exactly 0.  ``mask`` is a boolean array
    broadcastable to ``x``; ``None`` means all positions are live.  Every
    row must keep at least one live position.
    """
    x = _coerce(x)
    if mask is None:
        mask_b = np.ones(x.shape, dtype=bool)
    else:
        mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if x.data.size and not mask_b.any(axis=-1).all():
        raise DegenerateMaskError("softmax row with every position masked")
    shifted = np.where(mask_b, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True) if x.data.size else shifted
    z = np.exp(shifted, where=mask_b, out=np.zeros_like(x.data))
    denom = z.sum(axis=-1, keepdims=True, dtype=np.float64)
    y = np.divide(z, denom, dtype=np.float64).astype(x.dtype) if x.data.size else z

    def backward(g: Array) -> None:
        inner = (g * y).sum(axis=-1, keepdims=True)
        _add_grad(x, y * (g - inner))

    return make_node(y, (x,), backward)


def tanh(x) -> Tensor:
    x = _coerce(x)
    y = np.tanh(x.data)

    def backward(g: Array) -> None:
        _add_grad(x, g * (1.0 - y * y))

    return make_node(y, (x,), backward)


def exp(x) -> Tensor:
    x = _coerce(x)
    y = np.exp(x.data)

    def backward(g: Array) -> None:
        _add_grad(x, g * y)

    return make_node(y, (x,), backward)


def log(x) -> Tensor:
    x = _coerce(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    y = np.log(x.data)

    def backward(g: Array) -> None:
        _add_grad(x, g / x.data)

    return make_node(y, (x,), backward)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shapes do not broadcast: {a.shape} + {b.shape}") from exc

    def backward(g: Array) -> None:
        _add_grad(a, _unbroadcast(g, a.shape))
        _add_grad(b, _unbroadcast(g, b.shape))

    return make_node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul shapes do not broadcast: {a.shape} * {b.shape}") from exc

    def backward(g: Array) -> None:
        _add_grad(a, _unbroadcast(g * b.data, a.shape))
        _add_grad(b, _unbroadcast(g * a.data, b.shape))

    return make_node(data, (a, b), backward)


def scale(a, factor: float) -> Tensor:
    a = _coerce(a)
    factor = float(factor)
    data = a.data * factor

    def backward(g: Array) -> None:
        _add_grad(a, g * factor)

    return make_node(data, (a,), backward)


_ELEMENTWISE = {"tanh": tanh, "exp": exp, "log": log, "add": add, "mul": mul, "scale": scale}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name to one of tanh/exp/log/add/mul/scale."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


def concat_last(parts: Iterable) -> Tensor:
    """Concatenate along the last axis; gradients split back to the parts."""
    ts = [_coerce(p) for p in parts]
    if not ts:
        raise ContractError("concat_last needs at least one part")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last parts disagree off the last axis: {ts[0].shape} vs {t.shape}"
            )
    data = np.concatenate([t.data for t in ts], axis=-1)
    widths = [t.shape[-1] for t in ts]

    def backward(g: Array) -> None:
        offset = 0
        for t, w in zip(ts, widths):
            _add_grad(t, g[..., offset : offset + w])
            offset += w

    return make_node(data, ts, backward)


def stack(parts: Iterable, axis: int = 0) -> Tensor:
    """Stack equal-shape tensors along a new axis."""
    ts = [_coerce(p) for p in parts]
    if not ts:
        raise ContractError("stack needs at least one part")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack parts disagree: {ts[0].shape} vs {t.shape}")
    data = np.stack([t.data for t in ts], axis=axis)

    def backward(g: Array) -> None:
        for i, t in enumerate(ts):
            _add_grad(t, np.take(g, i, axis=axis))

    return make_node(data, ts, backward)


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    data = x.data.reshape(shape)

    def backward(g: Array) -> None:
        _add_grad(x, g.reshape(x.shape))

    return make_node(data, (x,), backward)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _coerce(x)
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: Array) -> None:
        _add_grad(x, np.transpose(g, inverse))

    return make_node(data, (x,), backward)


def swap_last(x) -> Tensor:
    """Transpose the last two axes."""
    x = _coerce(x)
    if x.ndim < 2:
        raise ShapeError(f"swap_last needs >=2-D input, got {x.shape}")
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def _sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if axis is None:
            _add_grad(x, np.broadcast_to(g, x.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _add_grad(x, np.broadcast_to(ge, x.shape))

    return make_node(data, (x,), backward)


def l2_normalize(x) -> Tensor:
    """Scale the last axis to unit Euclidean norm.

    Norms are accumulated in float64 so large inputs do not overflow.
    Rows with norm <= 1e-12 are rejected.
    """
    x = _coerce(x)
    sq = np.sum(np.square(x.data, dtype=np.float64), axis=-1, keepdims=True)
    norm = np.sqrt(sq)
    if np.any(norm <= 1e-12):
        raise DegenerateVectorError("cannot normalize a (near-)zero vector")
    y = np.divide(x.data, norm, dtype=np.float64).astype(x.dtype)

    def backward(g: Array) -> None:
        inner = np.sum(g * y, axis=-1, keepdims=True)
        _add_grad(x, (g - y * inner) / norm)

    return make_node(y, (x,), backward)


def mean_pool(rows, mask=None) -> Tensor:
    """Mean of unmasked rows along the second-to-last axis.

    ``rows`` is ``(..., n, d)``; ``mask`` is boolean ``(..., n)`` (``None``
    means all rows live).  Rows with an all-false mask pool to zeros.
    """
    rows = _coerce(rows)
    if rows.ndim < 2:
        raise ShapeError(f"mean_pool needs >=2-D input, got {rows.shape}")
    n = rows.shape[-2]
    if mask is None:
        mask_b = np.ones(rows.shape[:-1], dtype=bool)
    else:
        mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), rows.shape[:-1])
    maskf = mask_b.astype(rows.dtype)
    count = maskf.sum(axis=-1, keepdims=True)
    safe = np.maximum(count, 1.0)
    data = (rows.data * maskf[..., None]).sum(axis=-2) / safe

    def backward(g: Array) -> None:
        _add_grad(rows, g[..., None, :] * (maskf / safe)[..., None])

    return make_node(data, (rows,), backward)


def take_rows(table, indices) -> Tensor:
    """Gather ``table[indices]`` along the first axis (embedding lookup).

    ``indices`` may have any shape; the result has shape
    ``indices.shape + table.shape[1:]``.  Gradients scatter-add back.
    """
    table = _coerce(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(
            f"index out of range for table with {table.shape[0]} rows: "
            f"[{idx.min()}, {idx.max()}]"
        )
    data = table.data[idx]

    def backward(g: Array) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _add_grad(table, gt)

    return make_node(data, (table,), backward)


# -- verification harness -------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Compare analytic gradients of ``f`` at ``x`` against central differences.

    Returns the max over coordinates of
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)``.

    The perturbed evaluations reuse the storage dtype of ``x``; pass a
    float64 tensor to check the math at a float64 noise floor.
    """
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    worst = 0.0
    base = leaf.data
    with no_grad():
        for i in range(base.size):
            xp = base.copy()
            xm = base.copy()
            xp.reshape(-1)[i] += eps
            xm.reshape(-1)[i] -= eps
            # Effective step from the values actually stored, so dtype
            # rounding of eps itself does not pollute the quotient.
            h = (float(xp.reshape(-1)[i]) - float(xm.reshape(-1)[i])) / 2.0
            fp = float(f(Tensor(xp)))
            fm = float(f(Tensor(xm)))
            central = (fp - fm) / (2.0 * h)
            a = float(analytic[i])
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            worst = max(worst, err)
    return worst


# -- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus a step counter."""

    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam update with bias correction; mutates params and state in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise ShapeError(
                f"adam_step shape mismatch for {name!r}: param {p.data.shape}, grad {g.shape}"
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return params, state
