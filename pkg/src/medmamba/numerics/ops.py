"""Dense-array reverse-mode differentiation core.

A Tensor wraps a numpy array. Primitives compute eagerly and, when a Tape
is active, append a record (output, inputs, vjp). Replaying the records in
reverse order visits every node after all of its consumers, so a single
backward sweep accumulates exact gradients for all participating tensors.

Only basic slicing is supported by ``getitem``; gradients of broadcast
operands are reduced back to the operand shape.
"""
from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf as _erf

from ..errors import ShapeError

_DEFAULT_DTYPE = np.float64
_SOFTPLUS_CUTOFF = 30.0

_debug_nonfinite = False


def debug_nonfinite(enabled: bool) -> None:
    """Toggle warnings when ``div`` produces non-finite values."""
    global _debug_nonfinite
    _debug_nonfinite = bool(enabled)


class Tensor:
    """A real array with identity used for gradient bookkeeping.

    ``data`` is always a numpy float32/float64 array; the element count of
    ``data`` equals the product of ``shape`` by construction.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # operators delegate to module-level primitives
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean_(self, axis=axis, keepdims=keepdims)


def astensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(x, dtype=dtype)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one differentiation.

    Single-writer: ops executed while the tape is active (in the same
    thread) append records in execution order. ``gradients`` replays them
    backward; tensors that never fed the output receive zero gradients.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._records)

    def gradients(self, output: Tensor, sources: Sequence[Tensor],
                  seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Gradient of ``output`` w.r.t. each source tensor.

        ``output`` must be scalar unless an explicit ``seed`` cotangent of
        the same shape is given.
        """
        if seed is None:
            if output.size != 1:
                raise ShapeError(
                    f"gradients needs a scalar output, got shape {output.shape}")
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(seed)}
        for rec in reversed(self._records):
            g_out = grads.get(id(rec.out))
            if g_out is None:
                continue
            partials = rec.vjp(g_out)
            for tensor, g in zip(rec.inputs, partials):
                if g is None:
                    continue
                acc = grads.get(id(tensor))
                grads[id(tensor)] = g if acc is None else acc + g
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]

    def grad_dict(self, output: Tensor, named: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        names = list(named)
        gs = self.gradients(output, [named[n] for n in names])
        return dict(zip(names, gs))


def _record(out: Tensor, inputs: Iterable[Tensor], vjp) -> None:
    tape = _active_tape()
    if tape is not None:
        tape._records.append(_Record(out, tuple(inputs), vjp))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# binary arithmetic

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data + b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data - b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    _record(out, (a, b), vjp)
    return out


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(a.data / b.data)
    if _debug_nonfinite and not np.all(np.isfinite(out.data)):
        warnings.warn("div produced non-finite values", RuntimeWarning, stacklevel=2)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    _record(out, (a, b), vjp)
    return out


def neg(a) -> Tensor:
    a = astensor(a)
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: (-g,))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product; supports numpy matmul batching on leading axes."""
    a, b = astensor(a), astensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes "
                         f"{a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        ad, bd = a.data, b.data
        if a.ndim == 1 and b.ndim == 1:
            return (g * bd, g * ad)
        if b.ndim == 1:  # [.., m, k] @ [k] -> [.., m]
            ga = g[..., :, None] * bd
            gb = np.matmul(np.swapaxes(ad, -1, -2), g[..., None])[..., 0]
        elif a.ndim == 1:  # [k] @ [.., k, n] -> [.., n]
            ga = np.matmul(bd, g[..., None])[..., 0]
            gb = ad[:, None] * g[..., None, :]
        else:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    _record(out, (a, b), vjp)
    return out


# ---------------------------------------------------------------------------
# unary elementwise

def _unary(x, out_data, dfdx) -> Tensor:
    x = astensor(x)
    out = Tensor(out_data)
    _record(out, (x,), lambda g: (g * dfdx,))
    return out


def exp(x) -> Tensor:
    x = astensor(x)
    e = np.exp(x.data)
    return _unary(x, e, e)


def log(x) -> Tensor:
    x = astensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
        d = 1.0 / x.data
    return _unary(x, out, d)


def sqrt(x) -> Tensor:
    x = astensor(x)
    s = np.sqrt(x.data)
    with np.errstate(divide="ignore"):
        d = 0.5 / s
    return _unary(x, s, d)


def tanh(x) -> Tensor:
    x = astensor(x)
    t = np.tanh(x.data)
    return _unary(x, t, 1.0 - t * t)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x) -> Tensor:
    """ln(1 + e^x) with the overflow-safe branch x > 30 -> x."""
    x = astensor(x)
    big = x.data > _SOFTPLUS_CUTOFF
    safe = np.where(big, 0.0, x.data)
    out = np.where(big, x.data, np.log1p(np.exp(safe)))
    return _unary(x, out, _sigmoid(x.data))


def sigmoid(x) -> Tensor:
    x = astensor(x)
    s = _sigmoid(x.data)
    return _unary(x, s, s * (1.0 - s))


def silu(x) -> Tensor:
    x = astensor(x)
    s = _sigmoid(x.data)
    return _unary(x, x.data * s, s * (1.0 + x.data * (1.0 - s)))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact-erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = astensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
    return _unary(x, x.data * cdf, cdf + x.data * pdf)


_EXPM1X_CUTOFF = 1e-4


def expm1_over_x(x) -> Tensor:
    """(e^x - 1) / x with the second-order series 1 + x/2 for |x| < 1e-4.

    Used by the zero-order-hold discretization where x = delta * a can
    approach zero; the series branch avoids the 0/0 form.
    """
    x = astensor(x)
    small = np.abs(x.data) < _EXPM1X_CUTOFF
    xs = np.where(small, 1.0, x.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = np.expm1(xs) / xs
        dexact = (np.exp(xs) * (xs - 1.0) + 1.0) / (xs * xs)
    out = np.where(small, 1.0 + 0.5 * x.data, exact)
    d = np.where(small, 0.5 + x.data / 3.0, dexact)
    return _unary(x, out, d)


_ELEMENTWISE = {}


def elementwise(name: str, *args) -> Tensor:
    """Name-dispatched elementwise application (unary or binary)."""
    try:
        fn = _ELEMENTWISE[name]
    except KeyError:
        raise KeyError(f"unknown elementwise op {name!r}; "
                       f"choose from {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# structural

def reshape(x, shape) -> Tensor:
    x = astensor(x)
    out = Tensor(x.data.reshape(shape))
    _record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def transpose(x, axes=None) -> Tensor:
    x = astensor(x)
    out = Tensor(np.transpose(x.data, axes))
    inv = None if axes is None else np.argsort(axes)
    _record(out, (x,), lambda g: (np.transpose(g, inv),))
    return out


def swapaxes(x, a: int, b: int) -> Tensor:
    x = astensor(x)
    out = Tensor(np.swapaxes(x.data, a, b))
    _record(out, (x,), lambda g: (np.swapaxes(g, a, b),))
    return out


def flip(x, axis: int) -> Tensor:
    x = astensor(x)
    out = Tensor(np.flip(x.data, axis=axis).copy())
    _record(out, (x,), lambda g: (np.flip(g, axis=axis),))
    return out


def getitem(x, idx) -> Tensor:
    """Basic (slice/integer) indexing; positions are assumed unique."""
    x = astensor(x)
    out = Tensor(np.ascontiguousarray(x.data[idx]))

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        return (gx,)

    _record(out, (x,), vjp)
    return out


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [astensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        parts = []
        for i in range(len(ts)):
            parts.append(np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, axis))
        return tuple(parts)

    _record(out, ts, vjp)
    return out


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = astensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    _record(out, (x,), vjp)
    return out


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = astensor(x)
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))
    count = x.size if axis is None else (
        np.prod([x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# normalization / softmax

def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax; outputs are positive and sum to one on ``axis``."""
    x = astensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record(out, (x,), vjp)
    return out


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply the affine pair.

    Population variance; ``eps`` guards the zero-variance (constant row)
    case, which maps to ``beta``.
    """
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    mu = mean_(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean_(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(xc, sqrt(add(var, eps)))
    return add(mul(inv, gamma), beta)


@dataclass
class BnState:
    """Learnable affine plus running statistics for batch normalization.

    ``batches`` counts training updates; running tensors are buffers that
    must be checkpointed but never optimized.
    """
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    batches: Tensor  # scalar counter

    @staticmethod
    def create(num_features: int, dtype=np.float64) -> "BnState":
        return BnState(
            gamma=Tensor(np.ones(num_features, dtype=dtype)),
            beta=Tensor(np.zeros(num_features, dtype=dtype)),
            running_mean=Tensor(np.zeros(num_features, dtype=dtype)),
            running_var=Tensor(np.ones(num_features, dtype=dtype)),
            batches=Tensor(np.zeros((), dtype=dtype)),
        )


def batchnorm1d(x, state: BnState, mode: str, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Normalize [B, D, L] per feature channel over batch and time.

    Train mode normalizes with population statistics of the current batch
    and updates the running estimates (unbiased variance) with the given
    momentum; eval mode applies the stored statistics.
    """
    x = astensor(x)
    if x.ndim != 3:
        raise ShapeError(f"batchnorm1d expects [B, D, L], got {x.shape}")
    if mode == "train":
        mu = mean_(x, axis=(0, 2), keepdims=True)
        xc = sub(x, mu)
        var = mean_(mul(xc, xc), axis=(0, 2), keepdims=True)
        n = x.shape[0] * x.shape[2]
        unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
        m = momentum
        state.running_mean.data = (1 - m) * state.running_mean.data + m * mu.data.reshape(-1)
        state.running_var.data = (1 - m) * state.running_var.data + m * unbiased
        state.batches.data = state.batches.data + 1
        norm = div(xc, sqrt(add(var, eps)))
    elif mode == "eval":
        if float(state.batches.data) == 0:
            warnings.warn("batchnorm1d: eval before any training step uses "
                          "initialized statistics (mean 0, var 1)", RuntimeWarning,
                          stacklevel=2)
        rm = state.running_mean.data.reshape(1, -1, 1)
        rv = state.running_var.data.reshape(1, -1, 1)
        norm = div(sub(x, Tensor(rm)), Tensor(np.sqrt(rv + eps)))
    else:
        raise ValueError(f"batchnorm1d: mode must be 'train' or 'eval', got {mode!r}")
    g = reshape(state.gamma, (1, -1, 1))
    b = reshape(state.beta, (1, -1, 1))
    return add(mul(norm, g), b)


# ---------------------------------------------------------------------------
# convolutions

def conv1d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [C_in, L] (or [B, C_in, L]) with [C_out, C_in, k].

    ``pad`` zero-pads symmetrically on both ends (0 means no padding);
    L_out = floor((L + 2*pad - k) / stride) + 1.
    """
    x, w = astensor(x), astensor(w)
    if w.ndim != 3:
        raise ShapeError(f"conv1d: weight must be [C_out, C_in, k], got {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv1d: stride must be >= 1 and pad >= 0")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d: input must be [C_in, L] or [B, C_in, L], got {x.shape}")
    c_out, c_in, k = w.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv1d: input channels {xd.shape[1]} do not match "
                         f"weight channels {c_in} (shapes {x.shape} and {w.shape})")
    L = xd.shape[2]
    if L + 2 * pad < k:
        raise ShapeError(f"conv1d: empty output; length {L} with pad {pad} is "
                         f"shorter than kernel {k}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    y = np.einsum("bilk,oik->bol", win, w.data)
    out = Tensor(y[0] if squeeze else y)
    l_out = y.shape[2]

    def vjp(g):
        gb = g[None] if squeeze else g
        gw = np.einsum("bol,bilk->oik", gb, win)
        gxp = np.zeros_like(xp)
        for j in range(k):
            sl = slice(j, j + stride * (l_out - 1) + 1, stride)
            gxp[:, :, sl] += np.einsum("bol,oi->bil", gb, w.data[:, :, j])
        gx = gxp[:, :, pad:xp.shape[2] - pad] if pad else gxp
        return ((gx[0] if squeeze else gx), gw)

    _record(out, (x, w), vjp)
    return out


def dwconv1d(x, w, pad: int = 0) -> Tensor:
    """Depthwise cross-correlation of [.., C, L] with per-channel kernels [C, k]."""
    x, w = astensor(x), astensor(w)
    if w.ndim != 2:
        raise ShapeError(f"dwconv1d: weight must be [C, k], got {w.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    c, k = w.shape
    if xd.shape[1] != c:
        raise ShapeError(f"dwconv1d: channels {xd.shape[1]} do not match kernels {c}")
    if xd.shape[2] + 2 * pad < k:
        raise ShapeError("dwconv1d: empty output")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    y = np.einsum("bclk,ck->bcl", win, w.data)
    out = Tensor(y[0] if squeeze else y)
    l_out = y.shape[2]

    def vjp(g):
        gb = g[None] if squeeze else g
        gw = np.einsum("bcl,bclk->ck", gb, win)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + l_out] += gb * w.data[:, j][None, :, None]
        gx = gxp[:, :, pad:xp.shape[2] - pad] if pad else gxp
        return ((gx[0] if squeeze else gx), gw)

    _record(out, (x, w), vjp)
    return out


_ELEMENTWISE.update({
    "gelu": gelu, "silu": silu, "softplus": softplus, "tanh": tanh,
    "exp": exp, "log": log, "add": add, "mul": mul, "sub": sub, "div": div,
})
