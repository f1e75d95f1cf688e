"""Reverse-mode autodiff over float64 numpy arrays.

Every operation appends a record to a thread-local tape; execution order is
the topological order, so the backward pass is a single reversed walk. Ops
are recorded only while the tape is enabled and at least one operand requires
a gradient, which means a frozen teacher network leaves no trace on the tape
and cannot receive gradient by construction.

All forward outputs and all backward gradients are checked for NaN/Inf and
fail loudly with the name of the offending operation.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError


class _TapeState(threading.local):
    def __init__(self):
        self.records = []
        self.enabled = True
        self.epoch = 0


_TAPE = _TapeState()


def reset_tape():
    """Drop all records and invalidate losses built before this call."""
    _TAPE.records = []
    _TAPE.epoch += 1


def tape_size() -> int:
    return len(_TAPE.records)


@contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _check_finite(arr: np.ndarray, op: str, kind: str = "output"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {kind} in op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_epoch")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._epoch = -1

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "parents", "grad_fn", "op")

    def __init__(self, out, parents, grad_fn, op):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out_data: np.ndarray, parents, grad_fn, op: str) -> Tensor:
    _check_finite(out_data, op)
    track = _TAPE.enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._epoch = _TAPE.epoch
        _TAPE.records.append(_Record(out, parents, grad_fn, op))
    return out


def backward(loss: Tensor, params=None):
    """Accumulate dloss/dp into p.grad for every tensor reachable on the tape.

    Params listed but unreachable from the loss get an explicit zero gradient
    rather than None, so the optimizer never has to special-case them.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tracked parameter")
    if loss._epoch != _TAPE.epoch:
        raise ContractError("loss was built before the last tape reset")

    records = _TAPE.records
    for rec in records:
        rec.out.grad = None
        for p in rec.parents:
            p.grad = None
    if params is not None:
        for p in params:
            p.grad = None

    loss.grad = np.ones_like(loss.data)
    for rec in reversed(records):
        g = rec.out.grad
        if g is None:
            continue
        parent_grads = rec.grad_fn(g)
        for p, pg in zip(rec.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            _check_finite(pg, rec.op, kind="gradient")
            if p.grad is None:
                p.grad = pg
            else:
                p.grad = p.grad + pg

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    # same shape, or either side a scalar; anything fancier is a bug upstream
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.data.shape} vs {b.data.shape}")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    return np.sum(grad).reshape(shape) if np.prod(shape) == 1 else grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data

    def grad_fn(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _record(out, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def grad_fn(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _record(out, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data

    def grad_fn(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _record(out, (a, b), grad_fn, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, 0.0), (a,), grad_fn, "relu")


def abs_(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (g * np.sign(a.data),)

    return _record(np.abs(a.data), (a,), grad_fn, "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _record(out, (a,), grad_fn, "exp")


def sqrt_(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def grad_fn(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), grad_fn, "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for stability at large |x|
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), grad_fn, "sigmoid")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-d tensor")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), grad_fn, "matmul")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record(out, tuple(tensors), grad_fn, "concat")


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError("take_rows expects a 2-d tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DimensionError("take_rows: index out of range")

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)  # repeated indices must accumulate
        return (ga,)

    return _record(a.data[idx], (a,), grad_fn, "take_rows")


def take_cols(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError("take_cols expects a 2-d tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise DimensionError("take_cols: index out of range")

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga.T, idx, g.T)
        return (ga,)

    return _record(a.data[:, idx], (a,), grad_fn, "take_cols")


def sum_(a: Tensor, axis=None) -> Tensor:
    def grad_fn(g):
        if axis is None:
            return (np.full_like(a.data, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _record(np.sum(a.data, axis=axis), (a,), grad_fn, "sum")


def mean_(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]

    def grad_fn(g):
        if axis is None:
            return (np.full_like(a.data, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape) / n,)

    return _record(np.mean(a.data, axis=axis), (a,), grad_fn, "mean")


def segment_mean(x: Tensor, seg_ids, num_segments: int) -> Tensor:
    """Mean of the rows of x within each segment; empty segments give zeros."""
    seg = np.asarray(seg_ids, dtype=np.int64)
    if x.data.ndim != 2 or seg.shape != (x.data.shape[0],):
        raise DimensionError("segment_mean expects x (T, D) with one id per row")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise DimensionError("segment id out of range")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    divisor = np.maximum(counts, 1.0)
    out = np.zeros((num_segments, x.data.shape[1]))
    np.add.at(out, seg, x.data)
    out /= divisor[:, None]

    def grad_fn(g):
        return (g[seg] / divisor[seg, None],)

    return _record(out, (x,), grad_fn, "segment_mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (a,), grad_fn, "softmax")


# ---------------------------------------------------------------------------
# fused network pieces


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: (N, D) + (D,)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"add_bias: {x.data.shape} + {b.data.shape}")

    def grad_fn(g):
        return g, g.sum(axis=0)

    return _record(x.data + b.data, (x, b), grad_fn, "add_bias")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_bias(matmul(x, w), b)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer perceptron with a ReLU between the affine maps."""
    return affine(relu(affine(x, w1, b1)), w2, b2)


def conv1d_seq(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1-d convolution along the row axis with same-size zero padding.

    x is (M, C_in), w is (k, C_in, C_out) with odd k, b is (C_out,).
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise DimensionError("conv1d_seq: expected x (M, Cin) and w (k, Cin, Cout)")
    k, cin, cout = w.data.shape
    if k % 2 == 0:
        raise DimensionError("conv1d_seq kernel width must be odd")
    if x.data.shape[1] != cin or b.data.shape != (cout,):
        raise DimensionError("conv1d_seq: channel mismatch")
    m = x.data.shape[0]
    half = k // 2
    xp = np.zeros((m + 2 * half, cin))
    xp[half:half + m] = x.data
    out = np.zeros((m, cout)) + b.data
    for j in range(k):
        out += xp[j:j + m] @ w.data[j]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gxp[j:j + m] += g @ w.data[j].T
            gw[j] = xp[j:j + m].T @ g
        return gxp[half:half + m], gw, g.sum(axis=0)

    return _record(out, (x, w, b), grad_fn, "conv1d_seq")


def l1_sum(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (float(g) * np.sign(a.data),)

    return _record(np.sum(np.abs(a.data)), (a,), grad_fn, "l1_sum")


def sq_l2_sum(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (float(g) * 2.0 * a.data,)

    return _record(np.sum(a.data * a.data), (a,), grad_fn, "sq_l2_sum")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two 1-d vectors; a zero vector gives 0 with zero gradient."""
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise DimensionError("cosine_similarity expects matching 1-d vectors")
    na = float(np.sqrt(np.sum(a.data * a.data)))
    nb = float(np.sqrt(np.sum(b.data * b.data)))
    denom = na * nb
    if denom < 1e-12:
        def zero_fn(g):
            return np.zeros_like(a.data), np.zeros_like(b.data)

        return _record(np.float64(0.0), (a, b), zero_fn, "cosine_similarity")
    cos = float(a.data @ b.data) / denom

    def grad_fn(g):
        ga = float(g) * (b.data / denom - cos * a.data / (na * na))
        gb = float(g) * (a.data / denom - cos * b.data / (nb * nb))
        return ga, gb

    return _record(np.float64(cos), (a, b), grad_fn, "cosine_similarity")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Negative log-likelihood of integer targets under row softmax.

    Plain mean over rows, or a weight-normalized mean when per-row weights
    are given (weights carry no gradient).
    """
    y = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.data.shape[0]:
        raise DimensionError("cross_entropy: logits (N, C) with targets (N,)")
    if y.size == 0:
        raise DimensionError("cross_entropy: empty target batch")
    if y.min() < 0 or y.max() >= logits.data.shape[1]:
        raise DimensionError("cross_entropy: target id out of range")
    n = y.shape[0]
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != y.shape:
            raise DimensionError("cross_entropy: one weight per target row")
        wsum = float(w.sum())
        if wsum <= 0:
            raise DimensionError("cross_entropy: weights must sum to a positive value")
        w = w / wsum
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    loss = np.sum(w * (lse - shifted[np.arange(n), y]))
    probs = np.exp(shifted) / np.sum(np.exp(shifted), axis=1, keepdims=True)

    def grad_fn(g):
        gl = probs.copy()
        gl[np.arange(n), y] -= 1.0
        return (float(g) * w[:, None] * gl,)

    return _record(np.float64(loss), (logits,), grad_fn, "cross_entropy")


def kl_softened(student_logits: Tensor, teacher_logits: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Temperature-softened KL(teacher || student), averaged over rows.

    The teacher side is a plain array and receives no gradient. The usual
    T^2 factor keeps gradient magnitude comparable across temperatures.
    """
    t = float(temperature)
    if t <= 0:
        raise DimensionError("kl_softened: temperature must be positive")
    tl = np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.data.shape != tl.shape or tl.ndim != 2:
        raise DimensionError("kl_softened: shape mismatch between score tables")
    n = tl.shape[0]

    def soft(z):
        s = z / t
        s = s - np.max(s, axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    p_t = soft(tl)
    p_s = soft(student_logits.data)
    kl_rows = np.sum(p_t * (np.log(p_t + 1e-300) - np.log(p_s + 1e-300)), axis=1)
    loss = t * t * float(np.mean(kl_rows))

    def grad_fn(g):
        return (float(g) * t * (p_s - p_t) / n,)

    return _record(np.float64(loss), (student_logits,), grad_fn, "kl_softened")


def weighted_bce_logits(logits: Tensor, targets, weights) -> Tensor:
    """Binary cross-entropy from raw scores, weight-normalized.

    Uses the max(l,0) - l*y + log1p(exp(-|l|)) form so large scores of either
    sign stay finite.
    """
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    x = logits.data
    if x.shape != y.shape or x.shape != w.shape:
        raise DimensionError("weighted_bce_logits: logits/targets/weights must match")
    wsum = float(w.sum())
    if wsum <= 0:
        raise DimensionError("weighted_bce_logits: weights must sum to a positive value")
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = float(np.sum(w * per)) / wsum
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def grad_fn(g):
        return (float(g) * w * (sig - y) / wsum,)

    return _record(np.float64(loss), (logits,), grad_fn, "weighted_bce_logits")
