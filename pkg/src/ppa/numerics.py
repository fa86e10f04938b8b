"""Dense float32 tensors with reverse-mode automatic differentiation.

Small by design: just enough operations for a transformer encoder, a
contrastive loss head and a masked-token prediction head, all running on
numpy. Tensors are immutable values once created; the autograd graph built
during one forward pass belongs to a single training step on a single
thread. Everything computes in float32; float64 appears only inside the
finite-difference oracle of ``grad_check``.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateInputError(ValueError):
    """Input is outside the operation's domain (e.g. zero-norm vector)."""


class TensorFileError(ValueError):
    """Tensor container file is malformed, truncated or inconsistent."""


_GRAD_ENABLED = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (momentum-encoder passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus an optional position in the autograd graph.

    ``data`` is float32 unless the caller explicitly passes float64 (the
    finite-difference oracle does). ``grad`` accumulates across uses: a
    parameter consumed by several branches of one loss receives the sum of
    all contributions.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, fresh: bool = False) -> None:
        """Add a gradient contribution.

        ``fresh`` promises that ``g`` was newly allocated by the caller and
        is retained nowhere else, so it may be stored without a defensive
        copy. Stored gradients must never alias another node's gradient.
        """
        if self.grad is None:
            if fresh and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> list["Tensor"]:
        """Backpropagate from this (scalar) tensor.

        Returns the tape: the list of graph nodes visited, in the order
        their backward rules ran (reverse topological). Each recorded
        operation runs exactly once.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        tape = [n for n in reversed(topo) if n._backward is not None]
        for node in tape:
            node._backward()
        return tape

    # Operator sugar; full rules live in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None] | None) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            a._accumulate(ga, fresh=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            b._accumulate(gb, fresh=gb is not g)

    out = _make(out_data, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            a._accumulate(ga, fresh=ga is not g)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape), fresh=True)

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), fresh=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), fresh=True)

    out = _make(out_data, (a, b), backward)
    return out


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data * a.data.dtype.type(s)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * a.data.dtype.type(s), fresh=True)

    out = _make(out_data, (a,), backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.transpose(inv))

    out = _make(out_data, (a,), backward)
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    out = _make(out_data, parts, backward)
    return out


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported: both operands 2-D; both N-D with identical batch dims
    (stacked matmul); or N-D times a shared 2-D right operand (a linear
    layer applied over leading axes).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    shared_rhs = b.data.ndim == 2 and a.data.ndim > 2
    if a.data.shape[-1] != b.data.shape[-2] or (
        not shared_rhs and a.data.shape[:-2] != b.data.shape[:-2]
    ):
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)), fresh=True)
        if b.requires_grad:
            if shared_rhs:
                k, m = b.data.shape
                b._accumulate(np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, m)), fresh=True)
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g), fresh=True)

    out = _make(out_data, (a, b), backward)
    return out


# ---------------------------------------------------------------------------
# Nonlinearities and normalizations
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0), fresh=True)

    out = _make(out_data, (a,), backward)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Smooth tanh-form gelu (keeps the finite-difference oracle happy).

    Written with in-place array arithmetic: this sits on the feed-forward
    hot path and transcendental passes dominate the toy training budget.
    """
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    u = x2 * x.dtype.type(_GELU_A)
    u += 1.0
    u *= x
    u *= x.dtype.type(_GELU_C)
    t = np.tanh(u)
    out_data = t + 1.0
    out_data *= x
    out_data *= 0.5

    def backward():
        if not a.requires_grad:
            return
        # d/dx = 0.5 * [(1 + t) + x * (1 - t^2) * c * (1 + 3k x^2)]
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        da = x2 * x.dtype.type(3 * _GELU_A * _GELU_C)
        da += x.dtype.type(_GELU_C)
        da *= sech2
        da *= x
        da += t
        da += 1.0
        da *= 0.5
        da *= out.grad
        a._accumulate(da, fresh=True)

    out = _make(out_data, (a,), backward)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        if not a.requires_grad:
            return
        g = out.grad
        y = out_data
        a._accumulate(y * (g - (y * g).sum(axis=axis, keepdims=True)), fresh=True)

    out = _make(out_data, (a,), backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward():
        g = out.grad
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0), fresh=True)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0), fresh=True)
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * term, fresh=True)

    out = _make(out_data, (x, gain, bias), backward)
    return out


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("l2_normalize: zero-norm input")
    y = x.data / norm
    out_data = y

    def backward():
        if not x.requires_grad:
            return
        g = out.grad
        x._accumulate((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm, fresh=True)

    out = _make(out_data, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logits vector."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    n = logits.data.shape[0]
    if not 0 <= target_index < n:
        raise IndexError(f"cross_entropy target {target_index} out of range for {n} logits")
    m = logits.data.max()
    e = np.exp(logits.data - m)
    lse = m + np.log(e.sum())
    out_data = np.asarray(lse - logits.data[target_index], dtype=logits.data.dtype)

    def backward():
        if not logits.requires_grad:
            return
        p = e / e.sum()
        p[target_index] -= 1
        logits._accumulate(out.grad * p.astype(logits.data.dtype), fresh=True)

    out = _make(out_data, (logits,), backward)
    return out


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of per-row -log softmax(logits)[target] over a 2-D batch."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_rows expects 2-D logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} rows")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
        raise IndexError("cross_entropy_rows: target index out of range")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    losses = lse - logits.data[np.arange(n), targets]
    out_data = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def backward():
        if not logits.requires_grad:
            return
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), targets] -= 1
        logits._accumulate(out.grad * p.astype(logits.data.dtype) / logits.data.dtype.type(n), fresh=True)

    out = _make(out_data, (logits,), backward)
    return out


# ---------------------------------------------------------------------------
# Lookups
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward():
        if not table.requires_grad:
            return
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.data.shape[-1]))
        table._accumulate(g, fresh=True)

    out = _make(out_data, (table,), backward)
    return out


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; scatter-adds gradient back."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects 2-D input, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out_data = x.data[idx]

    def backward():
        if not x.requires_grad:
            return
        g = np.zeros_like(x.data)
        np.add.at(g, idx, out.grad)
        x._accumulate(g, fresh=True)

    out = _make(out_data, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# Fused ops (hot paths in the encoder; same math as their composed forms)
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x (..., k), w (k, m), b (m,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    k, m = w.data.shape
    if x.data.shape[-1] != k or b.data.shape != (m,):
        raise ShapeError(f"linear shape mismatch: {x.shape} x {w.shape} + {b.shape}")
    out_data = np.matmul(x.data, w.data)
    out_data += b.data

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.data.T), fresh=True)
        if w.requires_grad:
            w._accumulate(np.matmul(x.data.reshape(-1, k).T, g.reshape(-1, m)), fresh=True)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, m).sum(axis=0), fresh=True)

    out = _make(out_data, (x, w, b), backward)
    return out


def embedding_sum(tables: Sequence[Tensor], ids_list: Sequence[np.ndarray]) -> Tensor:
    """Sum of row lookups (token + position + segment in one node)."""
    tables = [_as_tensor(t) for t in tables]
    ids_list = [np.asarray(i, dtype=np.int64) for i in ids_list]
    out_data = tables[0].data[ids_list[0]].copy()
    for tbl, ids in zip(tables[1:], ids_list[1:]):
        out_data += tbl.data[ids]

    def backward():
        g = out.grad
        d = g.shape[-1]
        for tbl, ids in zip(tables, ids_list):
            if tbl.requires_grad:
                gt = np.zeros_like(tbl.data)
                np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
                tbl._accumulate(gt, fresh=True)

    out = _make(out_data, tuple(tables), backward)
    return out


def residual_layer_norm(x: Tensor, y: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """layer_norm(x + y): the transformer's residual-then-normalize step."""
    x, y = _as_tensor(x), _as_tensor(y)
    gain, bias = _as_tensor(gain), _as_tensor(bias)
    if x.data.shape != y.data.shape:
        raise ShapeError(f"residual shapes differ: {x.shape} vs {y.shape}")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    s = x.data + y.data
    mu = s.mean(axis=-1, keepdims=True)
    sc = s - mu
    var = (sc * sc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + s.dtype.type(eps))
    xhat = sc * inv
    out_data = xhat * gain.data + bias.data

    def backward():
        g = out.grad
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0), fresh=True)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0), fresh=True)
        if x.requires_grad or y.requires_grad:
            dxhat = g * gain.data
            ds = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            if x.requires_grad and y.requires_grad:
                x._accumulate(ds, fresh=True)
                y._accumulate(ds.copy(), fresh=True)
            elif x.requires_grad:
                x._accumulate(ds, fresh=True)
            else:
                y._accumulate(ds, fresh=True)

    out = _make(out_data, (x, y, gain, bias), backward)
    return out


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """(B, T, D) -> (B, heads, T, D/heads) in one node."""
    b, t, d = x.data.shape
    hd = d // num_heads
    out_data = x.data.reshape(b, t, num_heads, hd).transpose(0, 2, 1, 3)

    def backward():
        if x.requires_grad:
            g = np.ascontiguousarray(out.grad.transpose(0, 2, 1, 3)).reshape(b, t, d)
            x._accumulate(g, fresh=True)

    out = _make(out_data, (x,), backward)
    return out


def merge_heads(x: Tensor) -> Tensor:
    """(B, heads, T, hd) -> (B, T, heads*hd), inverse of split_heads."""
    b, a, t, hd = x.data.shape
    out_data = np.ascontiguousarray(x.data.transpose(0, 2, 1, 3)).reshape(b, t, a * hd)

    def backward():
        if x.requires_grad:
            g = np.ascontiguousarray(out.grad.reshape(b, t, a, hd).transpose(0, 2, 1, 3))
            x._accumulate(g, fresh=True)

    out = _make(out_data, (x,), backward)
    return out


def masked_softmax(x: Tensor, additive_bias: np.ndarray | None, axis: int = -1) -> Tensor:
    """softmax(x + constant additive bias); the bias carries no gradient."""
    x = _as_tensor(x)
    z = x.data if additive_bias is None else x.data + additive_bias
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        y = out_data
        x._accumulate(y * (g - (y * g).sum(axis=axis, keepdims=True)), fresh=True)

    out = _make(out_data, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one reverse-mode vs finite-difference comparison."""

    max_rel_err: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.1e})"


def grad_check(
    op: Callable[..., Tensor],
    input_shapes: Sequence[tuple[int, ...]],
    tolerance: float = 1e-3,
    seed: int = 0,
    step: float = 1e-3,
    max_coords: int = 48,
    frozen: Sequence[int] = (),
    input_scale: float = 1.0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``op`` with central differences.

    The analytic pass runs the production float32 path; finite differences
    re-evaluate the op in float64 so the oracle stays independent of
    float32 round-off. When an input has more than ``max_coords`` elements
    a random coordinate subset is perturbed. The relative error uses a
    0.01 denominator floor so float32 noise on near-zero gradients does
    not dominate. Failures are reported in the returned record, never
    raised.
    """
    rng = np.random.default_rng(seed)
    base = [rng.standard_normal(s).astype(np.float32) * np.float32(input_scale) for s in input_shapes]
    frozen = set(frozen)

    tensors = [Tensor(b.copy(), requires_grad=(i not in frozen)) for i, b in enumerate(base)]
    out = op(*tensors)
    loss = reduce_sum(out)
    loss.backward()

    def f64_eval(values: list[np.ndarray]) -> float:
        with no_grad():
            y = op(*[Tensor(v.astype(np.float64)) for v in values])
        return float(y.data.sum())

    max_err = 0.0
    per_input: list[float] = []
    for i, t in enumerate(tensors):
        if i in frozen:
            per_input.append(0.0)
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = analytic.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[i].reshape(-1)[c] += step
            minus[i].reshape(-1)[c] -= step
            numeric = (f64_eval(plus) - f64_eval(minus)) / (2 * step)
            a = float(flat[c])
            err = abs(a - numeric) / max(0.01, abs(a), abs(numeric))
            worst = max(worst, err)
        per_input.append(worst)
        max_err = max(max_err, worst)
    return GradCheckReport(max_rel_err=max_err, tolerance=tolerance, per_input=per_input)


# ---------------------------------------------------------------------------
# Parameter serialization: textual manifest + raw little-endian float32 blob
# ---------------------------------------------------------------------------

_MAGIC = "tensorfile v1"


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 arrays as a manifest followed by one raw blob.

    Manifest lines: name, comma-joined shape, float offset into the blob,
    float count. ``meta`` is stored as a single JSON line.
    """
    import json

    lines = [_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    blobs: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise TensorFileError(f"tensor name may not contain whitespace: {name!r}")
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        if a.ndim == 0:
            raise TensorFileError(f"tensor {name!r} must have rank >= 1")
        shape_s = ",".join(str(d) for d in a.shape)
        lines.append(f"tensor {name} {shape_s} {offset} {a.size}")
        blobs.append(a.tobytes())
        offset += a.size
    lines.append(f"blob {offset}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a tensor container; raises TensorFileError before any partial result."""
    import json

    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0 or raw[:nl].decode("utf-8", "replace") != _MAGIC:
        raise TensorFileError(f"{path}: not a tensor container (bad magic)")
    pos = nl + 1
    meta: dict | None = None
    entries: list[tuple[str, tuple[int, ...], int, int]] = []
    total = None
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise TensorFileError(f"{path}: truncated manifest")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if line.startswith("meta "):
            try:
                meta = json.loads(line[5:])
            except json.JSONDecodeError as e:
                raise TensorFileError(f"{path}: bad meta line: {e}") from e
        elif line.startswith("tensor "):
            parts = line.split(" ")
            if len(parts) != 5:
                raise TensorFileError(f"{path}: malformed tensor line: {line!r}")
            name, shape_s, off_s, cnt_s = parts[1], parts[2], parts[3], parts[4]
            try:
                shape = tuple(int(d) for d in shape_s.split(","))
                off, cnt = int(off_s), int(cnt_s)
            except ValueError as e:
                raise TensorFileError(f"{path}: malformed tensor line: {line!r}") from e
            if int(np.prod(shape)) != cnt or any(d <= 0 for d in shape):
                raise TensorFileError(f"{path}: shape/count mismatch for {name!r}")
            entries.append((name, shape, off, cnt))
        elif line.startswith("blob "):
            try:
                total = int(line.split(" ")[1])
            except (IndexError, ValueError) as e:
                raise TensorFileError(f"{path}: malformed blob line") from e
            break
        else:
            raise TensorFileError(f"{path}: unexpected manifest line: {line!r}")
    if meta is None or total is None:
        raise TensorFileError(f"{path}: incomplete manifest")
    expect = 0
    for name, shape, off, cnt in entries:
        if off != expect:
            raise TensorFileError(f"{path}: non-contiguous offset for {name!r}")
        expect += cnt
    if expect != total:
        raise TensorFileError(f"{path}: blob length {total} does not match entries ({expect})")
    blob = raw[pos:]
    if len(blob) != total * 4:
        raise TensorFileError(f"{path}: blob truncated ({len(blob)} bytes, expected {total * 4})")
    data = np.frombuffer(blob, dtype="<f4")
    out: dict[str, np.ndarray] = {}
    for name, shape, off, cnt in entries:
        if name in out:
            raise TensorFileError(f"{path}: duplicate tensor name {name!r}")
        out[name] = data[off : off + cnt].reshape(shape).astype(np.float32)
    return out, meta
