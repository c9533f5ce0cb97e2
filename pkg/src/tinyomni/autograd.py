"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive checks its input shapes and finiteness, computes the forward
value with numpy and, when any input requires a gradient and recording is
enabled, appends one node to the active tape. ``backward`` replays the tape
in reverse order and clears it.

Broadcasting is limited to a trailing-shape operand over leading batch axes
(biases, norm gains) and to scalar tensors of shape ``(1,)``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

IGNORE_INDEX = -100

_default_dtype: type = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the default floating dtype (32 or 64 bits)."""
    previous = _default_dtype
    set_default_dtype({32: np.float32, 64: np.float64}[bits])
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def backward(self) -> None:
        backward(self)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ComputationTape:
    """Ordered record of primitive applications since the last backward."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()


_tape = ComputationTape()


def current_tape() -> ComputationTape:
    return _tape


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(_tape.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi
    finally:
        _tape.clear()


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, fn) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op}: overflow to non-finite output of shape {out_data.shape}")
    out = Tensor(out_data, dtype=out_data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.record(TapeNode(op, inputs, out, fn))
    return out


def _finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: non-finite values in input of shape {t.shape}")


def _mismatch(op: str, a, b, detail: str = "") -> ShapeError:
    extra = f" ({detail})" if detail else ""
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}{extra}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1,):
        return np.sum(g).reshape(1)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _broadcastable(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or b.shape == (1,):
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise _mismatch(op, a.shape, b.shape, "only trailing-shape or scalar operands broadcast")


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable("add", a, b)
    _finite("add", a, b)

    def fn(g):
        return (g if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return _record("add", (a, b), a.data + b.data, fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable("mul", a, b)
    _finite("mul", a, b)

    def fn(g):
        ga = g * b.data if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), a.data * b.data, fn)


def scale(a: Tensor, c: float) -> Tensor:
    _finite("scale", a)
    if not math.isfinite(c):
        raise NonFiniteError(f"scale: non-finite factor {c}")
    return _record("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    _finite("gelu", x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return _record("gelu", (x,), (x.data * cdf).astype(x.dtype),
                   lambda g: (g * (cdf + x.data * pdf),))


def silu(x: Tensor) -> Tensor:
    _finite("silu", x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _record("silu", (x,), x.data * sig,
                   lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),))


def square(x: Tensor) -> Tensor:
    _finite("square", x)
    return _record("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def sum_all(x: Tensor) -> Tensor:
    _finite("sum", x)
    return _record("sum", (x,), np.sum(x.data).reshape(1),
                   lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


# --------------------------------------------------------------------------
# linear algebra and indexing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., n, k] @ b[k, m]`` or batched ``a[..., n, k] @ b[..., k, m]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _mismatch("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise _mismatch("matmul", a.shape, b.shape, "batch dimensions differ")
    _finite("matmul", a, b)

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), a.data @ b.data, fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: ids out of range [0, {table.shape[0]}) for table {table.shape}")
    _finite("embedding", table)

    def fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _record("embedding", (table,), table.data[ids], fn)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (non-advanced) slicing; the selected view is copied."""
    out = x.data[index]

    def fn(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _record("getitem", (x,), np.array(out), fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _mismatch("reshape", x.shape, shape) from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.ndim)):
        raise _mismatch("transpose", x.shape, axes, "axes must permute all dimensions")
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                   lambda g: (g.transpose(inverse),))


def scatter_rows(base: Tensor, rows: tuple[np.ndarray, ...], values: Tensor) -> Tensor:
    """Replace ``base[rows]`` (leading-axis index arrays) with ``values``.

    Rows must be unique; all other entries pass through untouched.
    """
    rows = tuple(np.asarray(r, dtype=np.int64) for r in rows)
    n = len(rows[0]) if rows else 0
    expected = (n,) + base.shape[len(rows):]
    if values.shape != expected:
        raise _mismatch("scatter_rows", base.shape, values.shape,
                        f"expected values of shape {expected}")
    _finite("scatter_rows", base, values)
    out = base.data.copy()
    out[rows] = values.data

    def fn(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            gb[rows] = 0.0
        gv = g[rows] if values.requires_grad else None
        return gb, gv

    return _record("scatter_rows", (base, values), out, fn)


def stack_sum(xs: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors (one tape node)."""
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise _mismatch("stack_sum", shape, x.shape)
    _finite("stack_sum", *xs)
    out = np.sum([x.data for x in xs], axis=0)
    return _record("stack_sum", tuple(xs), out,
                   lambda g: tuple(g if x.requires_grad else None for x in xs))


# --------------------------------------------------------------------------
# normalisation and softmax


def softmax(x: Tensor) -> Tensor:
    _finite("softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax", (x,), y,
                   lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:]:
        raise _mismatch("rmsnorm", x.shape, gain.shape)
    _finite("rmsnorm", x, gain)
    with np.errstate(over="ignore"):
        rms = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    if not np.isfinite(rms).all():
        raise NonFiniteError(f"rmsnorm: mean square overflows for input of shape {x.shape}")
    n = x.data / rms

    def fn(g):
        gx = ggain = None
        if x.requires_grad:
            gy = g * gain.data
            gx = (gy - n * np.mean(gy * n, axis=-1, keepdims=True)) / rms
        if gain.requires_grad:
            ggain = _reduce_to(g * n, gain.shape)
        return gx, ggain

    return _record("rmsnorm", (x, gain), n * gain.data, fn)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise _mismatch("layernorm", x.shape, gain.shape)
    _finite("layernorm", x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    with np.errstate(over="ignore"):
        std = np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    if not np.isfinite(std).all():
        raise NonFiniteError(f"layernorm: variance overflows for input of shape {x.shape}")
    n = xc / std

    def fn(g):
        gx = None
        if x.requires_grad:
            gy = g * gain.data
            gx = (gy - gy.mean(axis=-1, keepdims=True)
                  - n * np.mean(gy * n, axis=-1, keepdims=True)) / std
        ggain = _reduce_to(g * n, gain.shape) if gain.requires_grad else None
        gbias = _reduce_to(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return _record("layernorm", (x, gain, bias), n * gain.data + bias.data, fn)


# --------------------------------------------------------------------------
# attention


def rope_tables(positions: np.ndarray, head_dim: int, theta: float = 1e6, dtype=None):
    """cos/sin tables of shape (len(positions), head_dim), rotate-half layout."""
    if head_dim % 2:
        raise ShapeError(f"rope: head_dim must be even, got {head_dim}")
    inv = 1.0 / theta ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(np.asarray(positions, dtype=np.float64), inv)
    ang = np.concatenate([ang, ang], axis=-1)
    dtype = dtype or _default_dtype
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(y: np.ndarray) -> np.ndarray:
    h = y.shape[-1] // 2
    return np.concatenate([y[..., h:], -y[..., :h]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position application to ``x[..., T, d]`` with tables ``(T, d)``."""
    if cos.shape != x.shape[-2:] or sin.shape != x.shape[-2:]:
        raise _mismatch("rope", x.shape, cos.shape)
    _finite("rope", x)
    out = x.data * cos + _rotate_half(x.data) * sin
    return _record("rope", (x,), out, lambda g: (g * cos + _rotate_half_t(g * sin),))


def _causal_mask(t: int, s: int, offset: int) -> np.ndarray:
    # query i sits at absolute position offset + i, key j at position j
    return np.arange(s)[None, :] > (offset + np.arange(t))[:, None]


def attention_weights(q: np.ndarray, k: np.ndarray, offset: int = 0) -> np.ndarray:
    """Causal softmax weights, shape (B, Hq, T, S); future keys get exactly 0."""
    b, hq, t, d = q.shape
    hk, s = k.shape[1], k.shape[2]
    qg = q.reshape(b, hk, hq // hk, t, d)
    scores = qg @ np.swapaxes(k, -1, -2)[:, :, None] / math.sqrt(d)
    scores = np.where(_causal_mask(t, s, offset), -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(b, hq, t, s)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, offset: int = 0) -> Tensor:
    """Grouped-query causal attention.

    q: (B, Hq, T, d); k, v: (B, Hkv, S, d) with Hq a multiple of Hkv.
    Query head h reads key/value head h // (Hq // Hkv).
    """
    if q.ndim != 4 or k.shape != v.shape or k.ndim != 4:
        raise _mismatch("causal_attention", q.shape, k.shape)
    b, hq, t, d = q.shape
    hk, s = k.shape[1], k.shape[2]
    if k.shape[0] != b or k.shape[3] != d or hq % hk or offset + t > s:
        raise _mismatch("causal_attention", q.shape, k.shape)
    _finite("causal_attention", q, k, v)
    grp = hq // hk
    p = attention_weights(q.data, k.data, offset).reshape(b, hk, grp, t, s)
    out = (p @ v.data[:, :, None]).reshape(b, hq, t, d)
    qg = q.data.reshape(b, hk, grp, t, d)
    c = 1.0 / math.sqrt(d)

    def fn(g):
        g5 = g.reshape(b, hk, grp, t, d)
        dp = g5 @ np.swapaxes(v.data, -1, -2)[:, :, None]
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * c
        gq = (ds @ k.data[:, :, None]).reshape(q.shape) if q.requires_grad else None
        gk = (np.swapaxes(ds, -1, -2) @ qg).sum(axis=2) if k.requires_grad else None
        gv = (np.swapaxes(p, -1, -2) @ g5).sum(axis=2) if v.requires_grad else None
        return gq, gk, gv

    return _record("causal_attention", (q, k, v), out, fn)


# --------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean token cross-entropy over labels != ignore_index.

    ``logits`` is (..., V) and ``labels`` has the leading shape. With no
    labelled position the loss is 0 and so is every gradient.
    """
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise _mismatch("cross_entropy", logits.shape, labels.shape)
    if ignore_index >= 0:
        raise ValueError("cross_entropy: ignore_index must be negative")
    _finite("cross_entropy", logits)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    lab = labels.reshape(-1)
    valid = lab != ignore_index
    if np.any((lab[valid] < 0) | (lab[valid] >= v)):
        raise ShapeError(f"cross_entropy: labels out of range [0, {v})")
    n = int(valid.sum())
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    safe = np.where(valid, lab, 0)
    nll = lse - z[np.arange(len(lab)), safe]
    loss = nll[valid].sum() / n if n else 0.0

    def fn(g):
        if n == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(z - lse[:, None])
        p[np.arange(len(lab)), safe] -= 1.0
        p[~valid] = 0.0
        return ((p * (g.reshape(()) / n)).reshape(logits.shape),)

    return _record("cross_entropy", (logits,), np.asarray([loss], dtype=logits.dtype), fn)
