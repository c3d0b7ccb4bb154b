"""Dense arrays with a reverse-mode gradient tape.

Values live in contiguous row-major numpy buffers (float32 for training,
float64 for verification).  Operations are only recorded while a
:class:`Tape` is active, so code outside a ``with Tape():`` block runs as
plain inference.

Broadcasting is limited to scalar-with-array and same-shape operands.  The
few places the model needs a per-feature gain (RMSNorm, head-wise RMSNorm)
use the fused :func:`rmsnorm` op instead of general broadcasting.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only supported by a python scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Operations are appended in execution order, which is already a
    topological order of the graph; :meth:`backward` walks it in reverse.
    A tape is single-use and single-threaded.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.records.append(_Record(out, tuple(inputs), backward))

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar ``root`` w.r.t. every leaf that requires grad.

        Returns a mapping ``id(leaf) -> gradient`` and also stores the
        gradient on ``leaf.grad`` (overwriting it).
        """
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if self._closed:
            raise ContractError("tape was already consumed by backward()")
        self._closed = True
        produced = {id(r.out) for r in self.records}
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        out = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g
            out[key] = g
        self.records.clear()
        return out


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Run backward on the innermost active tape."""
    if not _TAPES:
        raise ContractError("no active tape; wrap the forward pass in `with Tape():`")
    return _TAPES[-1].backward(root)


def grad_enabled() -> bool:
    return bool(_TAPES)


def _check_finite(arr: np.ndarray, op: str):
    # one reduction is enough in the common case; a non-finite sum may still be finite-value overflow
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(arr, axis=None)
    if not math.isfinite(total) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, inputs: Sequence, backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _TAPES and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _binary_shapes(a, b, op: str):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
            raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, x) -> np.ndarray | None:
    if not isinstance(x, Tensor):
        return None
    if x.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=x.dtype)
    return g


def _val(x, like: np.ndarray):
    if isinstance(x, Tensor):
        return x.data
    return like.dtype.type(x)


def _ref(a, b) -> np.ndarray:
    if isinstance(a, Tensor) and a.ndim:
        return a.data
    if isinstance(b, Tensor) and b.ndim:
        return b.data
    return a.data if isinstance(a, Tensor) else b.data


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    _binary_shapes(a, b, "add")
    ref = _ref(a, b)
    out = _val(a, ref) + _val(b, ref)
    return _make(np.asarray(out), (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    _binary_shapes(a, b, "sub")
    ref = _ref(a, b)
    out = _val(a, ref) - _val(b, ref)
    return _make(np.asarray(out), (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    _binary_shapes(a, b, "mul")
    ref = _ref(a, b)
    av, bv = _val(a, ref), _val(b, ref)
    out = np.asarray(av * bv)

    def bw(g):
        return _reduce_to(g * bv, a), _reduce_to(g * av, b)

    return _make(out, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def ln(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "ln")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.float32:
        # training path: fewer passes; the tail precision loss is irrelevant in f32
        return np.float32(0.5) * (np.tanh(np.float32(0.5) * x) + np.float32(1))
    # exp(-|x|) never overflows and keeps full relative precision in both tails
    e = np.exp(-np.abs(x))
    r = 1 / (1 + e)
    return np.where(x >= 0, r, e * r)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    out = x * s

    def bw(g):
        return (g * (s * (1 + x * (1 - s))),)

    return _make(out, (a,), bw, "silu")


# -- reductions and layout -----------------------------------------------------


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum(dtype=a.dtype))
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(dtype=a.dtype))
    return _make(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    if out.size != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes, materialising a contiguous copy."""
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has exactly
    the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# -- fused ops -----------------------------------------------------------------


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), bw, "softmax")


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is True.

    ``mask`` covers the trailing axes of ``a`` (e.g. T x T or H x T x T).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("attention mask has a fully masked row")
    x = np.where(mask, a.data, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), bw, "masked_softmax")


def masked_sigmoid(a: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    s = np.where(mask, _sigmoid(a.data), 0).astype(a.dtype)

    def bw(g):
        return (g * s * (1 - s),)

    return _make(s, (a,), bw, "masked_sigmoid")


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise DimensionError(f"rmsnorm gain {gain.shape} does not match input {x.shape}")
    xv = x.data
    d = xv.shape[-1]
    inv = 1.0 / np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    xhat = xv * inv
    out = xhat * gain.data

    def bw(g):
        gg = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gx = None
        if x.requires_grad:
            gy = g * gain.data
            gx = inv * (gy - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return gx, gg

    return _make(out, (x, gain), bw, "rmsnorm")


def rope_tables(seq_len: int, dim: int, base: float, dtype=np.float64):
    half = np.arange(dim // 2, dtype=np.float64)
    freqs = base ** (-2.0 * half / dim)
    ang = np.arange(seq_len, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, base: float, tables=None) -> Tensor:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` by ``t * base**(-2i/d)``.

    ``x`` has shape ``(..., T, d)`` with ``d`` even; position ``t`` is the
    index along the second-to-last axis.
    """
    T, d = x.shape[-2], x.shape[-1]
    if d % 2:
        raise DimensionError(f"rotary embedding needs an even head dimension, got {d}")
    cos, sin = tables if tables is not None else rope_tables(T, d, base, x.dtype)
    cos, sin = cos[:T], sin[:T]

    def rot(v, s):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = ev * cos - s * od * sin
        out[..., 1::2] = s * ev * sin + od * cos
        return out

    out = rot(x.data, 1)
    return _make(out, (x,), lambda g: (rot(g, -1),), "rope")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(out, (weight,), bw, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood via log-sum-exp."""
    targets = np.asarray(targets).reshape(-1)
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    if targets.shape[0] != z.shape[0]:
        raise DimensionError(f"{targets.shape[0]} targets for {z.shape[0]} logit rows")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(se))[:, 0]
    rows = np.arange(z.shape[0])
    n = z.shape[0]
    loss = np.asarray((lse - z[rows, targets]).mean(), dtype=logits.dtype)

    def bw(g):
        p = e / se
        p[rows, targets] -= 1
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype),)

    return _make(loss, (logits,), bw, "cross_entropy")


def position_affine(o: Tensor, position: int, factor: float, shift: np.ndarray | None,
                    heads: Sequence[int] | None = None) -> Tensor:
    """Replace ``o[:, h, position]`` by ``factor * o + shift[h]`` for the chosen heads.

    ``o`` is ``(B, H, T, d_k)``; ``shift`` is ``(H, d_k)`` or None.
    """
    hs = list(range(o.shape[1])) if heads is None else list(heads)
    out = o.data.copy()
    f = o.dtype.type(factor)
    sel = out[:, hs, position, :] * f
    if shift is not None:
        sel = sel + np.asarray(shift, dtype=o.dtype)[hs][None]
    out[:, hs, position, :] = sel

    def bw(g):
        g = g.copy()
        g[:, hs, position, :] *= f
        return (g,)

    return _make(out, (o,), bw, "position_affine")


def finite_difference_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g
