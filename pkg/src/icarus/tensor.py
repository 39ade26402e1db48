"""Dense tensors and a reverse-mode gradient tape.

Shapes are explicit everywhere: matrices are 2-D, per-row gains are 1-D,
losses are 0-D. The only broadcast is the per-row gain inside rms_norm.

Reductions that back bitwise-reproducibility claims (the matmul inner
sum, softmax denominators) run through `_lsum`, a strict left-to-right
accumulation. That makes a sum over [x0..xk, 0, 0, ...] bitwise equal to
the sum over [x0..xk], which is what lets a masked attention row be
independent of how much padding sits behind it. Do not replace `_lsum`
with np.sum: numpy's pairwise blocking regroups terms by reduction
length and silently breaks cross-length identities.

Runtime arithmetic is float32 by default; gradient oracles run the same
code at float64. Ops never mutate their inputs; the optimizer is the
only writer of parameter data.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, StateError

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)

# Additive mask value. exp(-1e30 - rowmax) underflows to exactly +0.0 in
# both supported dtypes, so masked positions contribute exact zeros.
NEG_MASK = -1e30


def _lsum(prod: np.ndarray, axis: int) -> np.ndarray:
    # np.add.accumulate applies the ufunc as a sequential recurrence, so
    # taking the last slice reproduces a left-to-right scalar loop bitwise
    # (pinned by a triple-loop oracle in the tests).
    total = np.add.accumulate(prod, axis=axis)
    index: list = [slice(None)] * total.ndim
    index[axis] = -1
    return total[tuple(index)]


class Tensor:
    """A dense array plus autodiff bookkeeping.

    ``trainable`` marks a leaf parameter. Frozen leaves never receive a
    ``.grad`` buffer; the tape does not even record operations whose
    inputs are all frozen, so the guarantee is structural rather than a
    zero-fill.
    """

    __slots__ = ("data", "trainable", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, trainable: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (F32, F64):
            raise ConfigError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.trainable = trainable
        self.requires_grad = trainable
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = "train" if self.trainable else "const"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, {flag})"


def as_tensor(data, dtype=F32, trainable: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), trainable=trainable)


_TAPES: list["GradTape"] = []


class GradTape:
    """Records differentiable ops while active (context manager).

    Replaying the tape backward populates ``.grad`` on every trainable
    leaf that contributed to the loss. Intermediate adjoints live in a
    transient dict and are dropped when backward returns.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not loss.requires_grad:
            raise StateError("loss is not connected to this tape")
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, backward in reversed(self._entries):
            grad_out = adjoints.get(id(out))
            if grad_out is None:
                continue
            for tensor, grad in zip(inputs, backward(grad_out)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + grad
                else:
                    adjoints[key] = grad
                    holders[key] = tensor
        for key, tensor in holders.items():
            if tensor.trainable:
                tensor.grad = adjoints[key] if tensor.grad is None else tensor.grad + adjoints[key]


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1]._entries.append((out, inputs, backward))
    return out


def _check_dtypes(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt.name} vs {t.dtype.name}")
    return dt


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulate in place over the product buffer; same recurrence, one
    # fewer [m,k,n] allocation on a very hot path.
    prod = a[:, :, None] * b[None, :, :]
    np.add.accumulate(prod, axis=1, out=prod)
    return prod[:, -1, :].copy()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed left-to-right inner accumulation."""
    _check_dtypes(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects [m,k] @ [k,n], got {a.shape} @ {b.shape}")
    if a.shape[1] == 0:
        raise ShapeError(f"matmul over empty inner dimension: {a.shape} @ {b.shape}")
    out = Tensor(_mm(a.data, b.data))
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray):
        ga = _mm(g, b_data.T) if a.requires_grad else None
        gb = _mm(a_data.T, g) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add expects identical shapes, got {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul expects identical shapes, got {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    factor = a.data.dtype.type(s)
    out = Tensor(a.data * factor)
    return _record(out, (a,), lambda g: (g * factor,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), finite for any finite input."""
    sig = _sigmoid(x.data)
    out = Tensor(x.data * sig)
    x_data = x.data

    def backward(g: np.ndarray):
        return (g * (sig + x_data * sig * (1.0 - sig)),)

    return _record(out, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by gain.

    x is [rows, d], gain is [d]. The eps guard keeps the denominator
    strictly positive for all-zero rows.
    """
    _check_dtypes(x, gain)
    if eps <= 0.0:
        raise ConfigError(f"rms_norm eps must be positive, got {eps}")
    if x.data.ndim != 2 or gain.data.ndim != 1 or x.shape[1] != gain.shape[0]:
        raise ShapeError(f"rms_norm expects [rows,d] with gain [d], got {x.shape} and {gain.shape}")
    dt = x.dtype.type
    mean_sq = np.mean(x.data * x.data, axis=1, keepdims=True)
    inv = dt(1.0) / np.sqrt(mean_sq + dt(eps))
    normed = x.data * inv
    out = Tensor(normed * gain.data)
    x_data, gain_data = x.data, gain.data
    d = x.shape[1]

    def backward(g: np.ndarray):
        gg = g * gain_data
        if x.requires_grad:
            inner = np.sum(gg * x_data, axis=1, keepdims=True)
            gx = inv * gg - (inv ** 3 / d) * x_data * inner
        else:
            gx = None
        ggain = np.sum(g * normed, axis=0) if gain.requires_grad else None
        return gx, ggain

    return _record(out, (x, gain), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis with a left-to-right denominator.

    Rows whose tail was masked with NEG_MASK get exact-zero weights
    there, so the result does not depend on how long the masked tail is.
    """
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    den = _lsum(e, axis=-1)[..., None]
    out = Tensor(e / den)
    y = out.data

    def backward(g: np.ndarray):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _record(out, (x,), backward)


@lru_cache(maxsize=4096)
def _rope_trig_cached(pos_key: tuple, head_dim: int, theta: float, dtype_str: str):
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(0, half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.asarray(pos_key, dtype=np.float64)[:, None] * inv_freq[None, :]
    dtype = np.dtype(dtype_str)
    cos = np.cos(angles).astype(dtype)
    sin = np.sin(angles).astype(dtype)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def _rope_trig(positions: np.ndarray, head_dim: int, theta: float, dtype: np.dtype):
    # Angles in float64, cast once; every call site shares this path so
    # prefill and decode agree bitwise on the same absolute position.
    # Decode replays the same single positions constantly, hence the cache.
    return _rope_trig_cached(tuple(int(p) for p in positions), head_dim,
                             float(theta), dtype.str)


def rope_apply(x: Tensor, positions, theta: float) -> Tensor:
    """Rotate adjacent feature pairs by position-dependent angles.

    x is [rows, head_dim] for a single head; positions is one index or a
    sequence of per-row absolute indices. Position 0 is the identity.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"rope_apply expects [rows, head_dim], got {x.shape}")
    head_dim = x.shape[1]
    if head_dim % 2 != 0:
        raise ConfigError(f"rope head dim must be even, got {head_dim}")
    pos = np.atleast_1d(np.asarray(positions, dtype=np.int64))
    if pos.shape[0] == 1 and x.shape[0] > 1:
        pos = np.repeat(pos, x.shape[0])
    if pos.shape[0] != x.shape[0]:
        raise ShapeError(f"rope positions {pos.shape[0]} do not match rows {x.shape[0]}")
    cos, sin = _rope_trig(pos, head_dim, theta, x.dtype)

    def rotate(arr: np.ndarray, flip: bool) -> np.ndarray:
        even, odd = arr[:, 0::2], arr[:, 1::2]
        s = -sin if flip else sin
        out = np.empty_like(arr)
        out[:, 0::2] = even * cos - odd * s
        out[:, 1::2] = even * s + odd * cos
        return out

    out = Tensor(rotate(x.data, flip=False))
    return _record(out, (x,), lambda g: (rotate(g, flip=True),))


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup for embeddings. The table must be frozen."""
    if table.requires_grad:
        raise ConfigError("gather_rows through a trainable table is not supported")
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("gather_rows needs at least one id")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise IndexError(f"ids outside [0, {table.shape[0]}): min {idx.min()}, max {idx.max()}")
    return Tensor(table.data[idx].copy())


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {x.shape}")
    out = Tensor(x.data[:, start:stop].copy())
    cols = x.shape[1]

    def backward(g: np.ndarray):
        full = np.zeros((g.shape[0], cols), dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (x,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {x.shape}")
    out = Tensor(x.data[start:stop].copy())
    rows = x.shape[0]

    def backward(g: np.ndarray):
        full = np.zeros((rows, g.shape[1]), dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _record(out, (x,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    _check_dtypes(*parts)
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def backward(g: np.ndarray):
        grads, at = [], 0
        for w in widths:
            grads.append(g[:, at:at + w])
            at += w
        return tuple(grads)

    return _record(out, tuple(parts), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    _check_dtypes(*parts)
    cols = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise ShapeError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    heights = [p.shape[0] for p in parts]

    def backward(g: np.ndarray):
        grads, at = [], 0
        for h in heights:
            grads.append(g[at:at + h])
            at += h
        return tuple(grads)

    return _record(out, tuple(parts), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")
    out = Tensor(x.data.T.copy())
    return _record(out, (x,), lambda g: (g.T.copy(),))


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-softmax probability of one target id; logits is [V]."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    vocab = logits.shape[0]
    if not (0 <= target < vocab):
        raise IndexError(f"target {target} outside vocab [0, {vocab})")
    # Route through the row variant so both share one numeric path.
    return _ce_rows_raw(logits, logits.data[None, :], np.asarray([target]))


def cross_entropy_rows(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean next-token loss over rows; logits is [rows, V]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_rows expects 2-D logits, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.ndim != 1 or tgt.shape[0] != logits.shape[0]:
        raise ShapeError(f"targets shape {tgt.shape} does not match logits rows {logits.shape[0]}")
    vocab = logits.shape[1]
    if tgt.min() < 0 or tgt.max() >= vocab:
        raise IndexError(f"target outside vocab [0, {vocab}): min {tgt.min()}, max {tgt.max()}")
    return _ce_rows_raw(logits, logits.data, tgt)


def _ce_rows_raw(source: Tensor, rows: np.ndarray, targets: np.ndarray) -> Tensor:
    n = rows.shape[0]
    m = np.max(rows, axis=1, keepdims=True)
    e = np.exp(rows - m)
    den = _lsum(e, axis=1)
    lse = m[:, 0] + np.log(den)
    picked = rows[np.arange(n), targets]
    losses = lse - picked
    total = _lsum(losses, axis=0)
    out = Tensor(np.asarray(total / rows.dtype.type(n), dtype=rows.dtype))
    soft = e / den[:, None]

    def backward(g: np.ndarray):
        grad = soft.copy()
        grad[np.arange(n), targets] -= 1.0
        grad *= g / rows.dtype.type(n)
        if source.data.ndim == 1:
            return (grad[0],)
        return (grad,)

    return _record(out, (source,), backward)


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element.

    Defined only at float64; this is the oracle side of every gradient
    check, so it refuses to run at reduced precision.
    """
    x = np.asarray(x)
    if x.dtype != F64:
        raise ConfigError(f"finite differences require float64 input, got {x.dtype}")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.shape[0]):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad
