"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Operations execute eagerly on numpy arrays. While a :class:`GradTape` is
active (used as a context manager), every operation whose inputs require
gradients records a node holding references to its input/output tensors and
a backward rule. ``tape.backward(loss)`` replays the recorded nodes in
reverse execution order, accumulating gradients into every ``requires_grad``
tensor exactly once per use.

Tensors are float32 by default; build them from float64 arrays to run the
engine in 64-bit mode (finite-difference checks are unreliable in 32-bit).
Tensors are immutable after construction except for gradient accumulation.
A tape must not be shared across threads; the active-tape stack is
thread-local.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "matmul",
    "linear",
    "add",
    "mul",
    "scale",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "mean",
    "softmax",
    "attention_probs",
    "layernorm",
    "relu",
    "gelu",
    "dropout",
    "softmax_cross_entropy",
]

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """A dense array plus an optional accumulated-gradient buffer.

    ``data`` is a row-major numpy array. ``grad`` stays ``None`` until a
    backward pass deposits into it; it always has the same shape and dtype
    as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data)
            if arr.dtype.kind == "f":
                arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype.kind not in "fiu":
            raise TypeError(f"tensors hold numeric data, got dtype {arr.dtype}")
        if requires_grad and arr.dtype.kind != "f":
            raise TypeError("requires_grad tensors must be floating point")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype) -> "Tensor":
        """Dtype-converted leaf copy (not connected to any tape)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.out = out
        self.backward_fn = backward_fn


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of executed operations for one backward replay.

    Use as a context manager around the forward computation, then call
    :meth:`backward` once on the (scalar) output. The tape is consumed by
    the replay; intermediate gradient buffers are released as soon as the
    node that produced them has run.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("GradTape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append(_Node(out, backward_fn))

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Replay recorded operations in reverse, accumulating gradients.

        ``root`` must be scalar unless ``seed`` supplies an explicit output
        gradient of the same shape.
        """
        if self._consumed:
            raise RuntimeError("GradTape already consumed by a previous backward")
        self._consumed = True
        if seed is None:
            if root.size != 1:
                raise ShapeError(
                    f"backward root must be scalar, got shape {root.shape}"
                )
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=root.data.dtype)
            if seed.shape != root.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} != root shape {root.data.shape}"
                )
        if root.grad is None:
            root.grad = seed.copy()
        else:
            root.grad = root.grad + seed
        nodes = self._nodes
        for i in range(len(nodes) - 1, -1, -1):
            node = nodes[i]
            nodes[i] = None  # release captured buffers as soon as possible
            g = node.out.grad
            if g is None:
                continue
            node.backward_fn(g)
            node.out.grad = None  # outputs are intermediates; free eagerly
        self._nodes.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Deposit ``g`` into ``t.grad``.

    ``fresh`` means the caller constructed ``g`` (or an exclusive view) for
    this deposit, so an empty grad slot may adopt it without copying; a
    shared array (e.g. the consumer's grad passed through unchanged) must
    be copied to keep grad buffers independent.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _make_out(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape._record(out, backward_fn(out))
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    """Matrix product.

    Accepted shapes: [m,k]x[k,n]; stacked [...,m,k]x[...,k,n] with identical
    leading dimensions; or stacked [...,m,k] against a plain [k,n] matrix.
    Anything else raises :class:`ShapeError` naming both shapes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {da.shape} and {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {da.shape} x {db.shape}")
    if db.ndim > 2:
        if da.shape[:-2] != db.shape[:-2]:
            raise ShapeError(
                f"matmul leading dimensions disagree: {da.shape} x {db.shape}"
            )
    if db.ndim == 2 and da.ndim > 2:
        # collapse the stack into one BLAS call
        out_data = (da.reshape(-1, da.shape[-1]) @ db).reshape(da.shape[:-1] + (db.shape[-1],))
    else:
        out_data = da @ db

    def backward_fn(out):
        def run(g):
            if a.requires_grad:
                if db.ndim == 2 and g.ndim > 2:
                    ga = (g.reshape(-1, g.shape[-1]) @ db.T).reshape(da.shape)
                else:
                    ga = g @ db.swapaxes(-1, -2)
                _accumulate(a, ga, fresh=True)
            if b.requires_grad:
                if db.ndim == 2 and da.ndim > 2:
                    k = da.shape[-1]
                    n = g.shape[-1]
                    gb = da.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = da.swapaxes(-1, -2) @ g
                _accumulate(b, gb, fresh=True)

        return run

    return _make_out(out_data, (a, b), backward_fn)


def linear(x, w, b) -> Tensor:
    """Affine map ``x @ w + b``: one fused op so only the single output
    (not a separate pre-bias product) stays on the tape."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    dx, dw = x.data, w.data
    if dw.ndim != 2 or dx.ndim < 2 or dx.shape[-1] != dw.shape[0]:
        raise ShapeError(f"linear shapes disagree: {dx.shape} x {dw.shape}")
    if b.data.shape != (dw.shape[1],):
        raise ShapeError(f"linear bias shape {b.data.shape} != ({dw.shape[1]},)")
    k, n = dw.shape
    out_data = dx.reshape(-1, k) @ dw
    out_data += b.data
    out_data = out_data.reshape(dx.shape[:-1] + (n,))

    def backward_fn(out):
        def run(g):
            g2 = g.reshape(-1, n)
            if x.requires_grad:
                _accumulate(x, (g2 @ dw.T).reshape(dx.shape), fresh=True)
            if w.requires_grad:
                _accumulate(w, dx.reshape(-1, k).T @ g2, fresh=True)
            if b.requires_grad:
                _accumulate(b, g2.sum(axis=0), fresh=True)

        return run

    return _make_out(out_data, (x, w, b), backward_fn)


def _suffix_broadcast(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def add(a, b) -> Tensor:
    """Elementwise sum. Shapes must match exactly, or one operand's shape
    must be a trailing suffix of the other's (bias-style broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb and not _suffix_broadcast(sa, sb) and not _suffix_broadcast(sb, sa):
        raise ShapeError(f"add shapes incompatible: {sa} vs {sb}")
    out_data = a.data + b.data

    def backward_fn(out):
        def run(g):
            for t in (a, b):
                if not t.requires_grad:
                    continue
                if t.data.ndim < g.ndim:
                    gt = g.sum(axis=tuple(range(g.ndim - t.data.ndim)))
                    _accumulate(t, gt, fresh=True)
                else:
                    _accumulate(t, g)

        return run

    return _make_out(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors (use scale for scalars)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def backward_fn(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, g * b.data, fresh=True)
            if b.requires_grad:
                _accumulate(b, g * a.data, fresh=True)

        return run

    return _make_out(out_data, (a, b), backward_fn)


def scale(t, s: float) -> Tensor:
    """Multiply by a python scalar."""
    t = _as_tensor(t)
    s = float(s)
    out_data = t.data * s

    def backward_fn(out):
        def run(g):
            _accumulate(t, g * s, fresh=True)

        return run

    return _make_out(out_data, (t,), backward_fn)


def reshape(t, shape) -> Tensor:
    """Row-major reshape; element count must be preserved."""
    t = _as_tensor(t)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}")
    out_data = t.data.reshape(shape)
    in_shape = t.data.shape

    def backward_fn(out):
        def run(g):
            _accumulate(t, g.reshape(in_shape), fresh=True)

        return run

    return _make_out(out_data, (t,), backward_fn)


def transpose(t, axes) -> Tensor:
    """Permute axes; backward applies the inverse permutation."""
    t = _as_tensor(t)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(t.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for shape {t.shape}")
    out_data = np.transpose(t.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(out):
        def run(g):
            _accumulate(t, np.transpose(g, inverse), fresh=True)

        return run

    return _make_out(out_data, (t,), backward_fn)


def concat(tensors: Sequence, axis: int) -> Tensor:
    """Concatenate along ``axis``; other dimensions must agree."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % ts[0].ndim
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat shapes incompatible: {ts[0].shape} vs {t.shape}")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(out):
        def run(g):
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)], fresh=True)

        return run

    return _make_out(out_data, ts, backward_fn)


def slice_axis(t, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    t = _as_tensor(t)
    axis = axis % t.ndim
    n = t.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis {axis} of {t.shape}")
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(start, stop)
    out_data = t.data[tuple(idx)].copy()

    def backward_fn(out):
        def run(g):
            full = np.zeros_like(t.data)
            full[tuple(idx)] = g
            _accumulate(t, full, fresh=True)

        return run

    return _make_out(out_data, (t,), backward_fn)


def mean(t, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over one axis (or all elements)."""
    t = _as_tensor(t)
    if axis is not None:
        axis = axis % t.ndim
    out_data = t.data.mean(axis=axis, keepdims=keepdims)
    count = t.size if axis is None else t.shape[axis]
    in_shape = t.data.shape

    def backward_fn(out):
        def run(g):
            if axis is None:
                gt = np.broadcast_to(g / count, in_shape)
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                gt = np.broadcast_to(g / count, in_shape)
            _accumulate(t, np.ascontiguousarray(gt), fresh=True)

        return run

    return _make_out(out_data, (t,), backward_fn)


def softmax(t, axis: int = -1) -> Tensor:
    """Normalized exponentials along ``axis``, computed with max-subtraction
    so arbitrarily large finite inputs cannot overflow."""
    t = _as_tensor(t)
    axis = axis % t.ndim
    # one working buffer: subtract max, exponentiate, normalize in place
    probs = t.data - t.data.max(axis=axis, keepdims=True)
    np.exp(probs, out=probs)
    probs /= probs.sum(axis=axis, keepdims=True)

    def backward_fn(out):
        p = out.data  # backward needs only the output distribution

        def run(g):
            tmp = g * p
            inner = tmp.sum(axis=axis, keepdims=True)
            np.subtract(g, inner, out=tmp)
            tmp *= p
            _accumulate(t, tmp, fresh=True)

        return run

    return _make_out(probs, (t,), backward_fn)


def attention_probs(q, k, scale_factor: float) -> Tensor:
    """softmax(scale * q k^T) over the last axis, fused so the raw score
    matrix is normalized in place and never retained."""
    q, k = _as_tensor(q), _as_tensor(k)
    dq, dk = q.data, k.data
    if dq.ndim < 2 or dq.shape != dk.shape:
        raise ShapeError(
            f"attention operands must share shape [..., n, d]: {dq.shape} vs {dk.shape}"
        )
    scale_factor = float(scale_factor)
    probs = dq @ dk.swapaxes(-1, -2)
    probs *= scale_factor
    probs -= probs.max(axis=-1, keepdims=True)
    np.exp(probs, out=probs)
    probs /= probs.sum(axis=-1, keepdims=True)

    def backward_fn(out):
        p = out.data

        def run(g):
            ds = g * p
            inner = ds.sum(axis=-1, keepdims=True)
            np.subtract(g, inner, out=ds)
            ds *= p
            ds *= scale_factor
            if q.requires_grad:
                _accumulate(q, ds @ dk, fresh=True)
            if k.requires_grad:
                _accumulate(k, ds.swapaxes(-1, -2) @ dq, fresh=True)

        return run

    return _make_out(probs, (q, k), backward_fn)


def layernorm(t, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then apply
    an affine gain and bias. Variance is the population variance; ``eps``
    keeps constant rows finite."""
    t, gain, bias = _as_tensor(t), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    d = t.shape[-1] if t.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xhat = x - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat *= inv  # normalize in place; retained for backward
    out_data = xhat * gain.data
    out_data += bias.data

    def backward_fn(out):
        def run(g):
            reduce_axes = tuple(range(g.ndim - 1))
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=reduce_axes), fresh=True)
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).sum(axis=reduce_axes), fresh=True)
            if t.requires_grad:
                gx = g * gain.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                gx -= m1
                gx -= xhat * m2
                gx *= inv
                _accumulate(t, gx, fresh=True)

        return run

    return _make_out(out_data, (t, gain, bias), backward_fn)


def relu(t) -> Tensor:
    t = _as_tensor(t)
    out_data = np.maximum(t.data, 0)

    def backward_fn(out):
        positive = t.data > 0

        def run(g):
            _accumulate(t, g * positive, fresh=True)

        return run

    return _make_out(out_data, (t,), backward_fn)


def gelu(t) -> Tensor:
    """Gaussian error linear unit, exact erf form: 0.5*x*(1 + erf(x/sqrt(2)))."""
    t = _as_tensor(t)
    x = t.data
    cdf = erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype))
    cdf += 1.0
    cdf *= 0.5
    out_data = x * cdf

    def backward_fn(out):
        def run(g):
            pdf = np.exp(-0.5 * x * x)
            pdf *= np.asarray(_INV_SQRT_2PI, dtype=x.dtype)
            pdf *= x
            pdf += cdf
            pdf *= g
            _accumulate(t, pdf, fresh=True)

        return run

    return _make_out(out_data, (t,), backward_fn)


def dropout(t, rate: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout with an explicit RNG. Identity when ``training`` is
    false or ``rate`` is zero."""
    t = _as_tensor(t)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = 1.0 - rate
    draw_dtype = t.dtype if t.dtype in (np.float32, np.float64) else np.float64
    mask = (rng.random(t.shape, dtype=draw_dtype) >= rate).astype(t.dtype)
    mask /= np.asarray(keep, dtype=t.dtype)
    out_data = t.data * mask

    def backward_fn(out):
        def run(g):
            _accumulate(t, g * mask, fresh=True)

        return run

    return _make_out(out_data, (t,), backward_fn)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean categorical cross-entropy, fused with softmax for stability.

    ``labels`` are integer class ids. The gradient w.r.t. the logits is
    (softmax(logits) - onehot) / batch_size.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    if isinstance(labels, Tensor):
        labels = labels.data
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    if labels.dtype.kind not in "iu":
        if not np.all(labels == labels.astype(np.int64)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range [0, {k})")

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    e = np.exp(z)
    sums = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(sums[:, 0])
    picked = x[np.arange(x.shape[0]), labels]
    out_data = np.asarray((lse - picked).mean(), dtype=x.dtype)

    def backward_fn(out):
        probs = e / sums
        batch = x.shape[0]

        def run(g):
            d = probs.copy()
            d[np.arange(batch), labels] -= 1.0
            d *= g / batch
            _accumulate(logits, d, fresh=True)

        return run

    return _make_out(out_data, (logits,), backward_fn)
