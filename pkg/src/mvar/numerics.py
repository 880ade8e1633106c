"""Dense float64 kernel with a reverse-mode gradient tape.

Every forward primitive works on numpy arrays with arbitrary leading batch
axes. When at least one operand is attached to a :class:`GradTape`, the
primitive appends a backward closure to that tape; replaying the tape in
reverse accumulates gradients into every watched parameter.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

Array = np.ndarray
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is not."""


class Tensor:
    """An array value, optionally tracked by a tape."""

    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value, tape: Optional["GradTape"] = None, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[Array] = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, tracked={self.tape is not None})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of primitive applications.

    ``watch`` attaches parameters; ``backward`` replays the record in exact
    reverse order and returns one gradient buffer per watched parameter.
    """

    def __init__(self):
        self._ops: List[Tuple[str, Tensor, Tuple[Tensor, ...], Callable]] = []
        self._watched: Dict[str, Tensor] = {}
        self.backward_order: List[int] = []

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def op_names(self) -> List[str]:
        return [op[0] for op in self._ops]

    def watch(self, params: Dict[str, Array]) -> Dict[str, Tensor]:
        out = {}
        for name in params:
            t = Tensor(np.array(params[name], dtype=np.float64), tape=self, name=name)
            self._watched[name] = t
            out[name] = t
        return out

    def record(self, op: str, out: Tensor, inputs: Tuple[Tensor, ...], backward: Callable) -> None:
        self._ops.append((op, out, inputs, backward))

    def backward(self, loss: Tensor) -> Dict[str, Array]:
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.value)
        self.backward_order = []
        for idx in range(len(self._ops) - 1, -1, -1):
            _, out, inputs, fn = self._ops[idx]
            self.backward_order.append(idx)
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or inp.tape is not self:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    inp.grad += g
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for name, t in self._watched.items()
        }


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Optional[GradTape]:
    for x in xs:
        if x.tape is not None:
            return x.tape
    return None


def _emit(op: str, value: Array, inputs: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.record(op, out, inputs, backward)
    return out


def _unbroadcast(g: Array, shape: Tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _emit("matmul", np.matmul(av, bv), (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _emit("mul", av * bv, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit("square", av * av, (a,), lambda g: (2.0 * av * g,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit("abs", np.abs(av), (a,), lambda g: (np.sign(av) * g,))


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.value.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), backward)


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", np.concatenate([x.value for x in xs], axis=axis), xs, backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(a.value, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def gelu(a) -> Tensor:
    """Exact Gaussian-error linear unit, x * Phi(x)."""
    a = as_tensor(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _emit("gelu", x * cdf, (a,), backward)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    a = as_tensor(a)
    x = a.value
    if np.isnan(x).any():
        raise NonFiniteError("softmax_rows received NaN input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs width {d}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", xhat * gv + bias.value, (x, gain, bias), backward)


@lru_cache(maxsize=64)
def _im2col_index(c: int, h: int, w: int, k: int, stride: int) -> Array:
    """Flat indices into the padded (C, H+2p, W+2p) block, shape (Ho*Wo, C*k*k)."""
    p = k // 2
    hp_, wp_ = h + 2 * p, w + 2 * p
    ho, wo = h // stride, w // stride
    oy = np.arange(ho) * stride
    ox = np.arange(wo) * stride
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    base = (ci * hp_ + ki) * wp_ + kj  # (C, k, k)
    start = (oy[:, None] * wp_ + ox[None, :]).reshape(-1)  # (Ho*Wo,)
    idx = start[:, None] + base.reshape(1, -1)
    idx.setflags(write=False)
    return idx


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """Zero-padded 2-D convolution (cross-correlation) on ``(..., C, H, W)``.

    Kernels are ``(C_out, C_in, k, k)`` with odd ``k``; padding ``k // 2``
    keeps the pre-stride extent so the output is ``(..., C_out, H/s, W/s)``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    xv, kv = x.value, kernels.value
    if xv.ndim < 3 or kv.ndim != 4:
        raise ShapeError(f"conv2d expects (...,C,H,W) and 4-axis kernels, got {xv.shape}, {kv.shape}")
    c_out, c_in, k, k2 = kv.shape
    *lead, c, h, w = xv.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {xv.shape}, kernels {kv.shape}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs square odd kernels, got {kv.shape}")
    if h % stride or w % stride:
        raise ShapeError(f"conv2d: spatial dims {(h, w)} not divisible by stride {stride}")
    p = k // 2
    ho, wo = h // stride, w // stride
    if p:
        xp = np.zeros((*lead, c, h + 2 * p, w + 2 * p))
        xp[..., p:p + h, p:p + w] = xv
    else:
        xp = xv
    idx = _im2col_index(c, h, w, k, stride)
    cols = xp.reshape(*lead, -1)[..., idx]  # (..., Ho*Wo, C*k*k)
    kmat = kv.reshape(c_out, c * k * k)
    out = np.matmul(cols, kmat.T)  # (..., Ho*Wo, C_out)
    out = np.swapaxes(out, -1, -2).reshape(*lead, c_out, ho, wo)

    def backward(g):
        g2 = np.swapaxes(g.reshape(*lead, c_out, ho * wo), -1, -2)
        gk = np.matmul(cols.reshape(-1, c * k * k).T, g2.reshape(-1, c_out)).T.reshape(kv.shape)
        dcols = np.matmul(g2, kmat).reshape(*lead, ho, wo, c, k, k)
        dxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                dxp[..., i:i + stride * ho:stride, j:j + stride * wo:stride] += np.moveaxis(
                    dcols[..., i, j], -1, -3)
        return dxp[..., p:p + h, p:p + w], gk

    return _emit("conv2d", out, (x, kernels), backward)


PRIMITIVES = (
    "matmul", "add", "sub", "mul", "scale", "square", "abs", "sum",
    "concat", "reshape", "transpose", "gelu", "softmax", "layer_norm", "conv2d",
)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_gradients(
    f: Callable[[Dict[str, Array]], float],
    params: Dict[str, Array],
    h: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> Dict[str, Array]:
    """Central-difference gradient of a scalar function of named arrays.

    Each scalar entry is perturbed in place by +/-h and restored, so ``f``
    must not keep references to the arrays between calls.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name in (names if names is not None else sorted(work)):
        arr = work[name]
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work)
            flat[i] = orig - h
            fm = f(work)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite objective while perturbing {name}[{i}]")
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(arr.shape)
    return grads


def relative_error(a: Array, b: Array, floor: float = 1e-8) -> Array:
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
