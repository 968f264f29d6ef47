from __future__ import annotations

import enum
from collections.abc import Sequence
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from scipy.special import logsumexp as _np_logsumexp

from vlae_lab.domain.errors import DomainValueError, MaskError, ShapeError
from vlae_lab.domain.ndiff.tensor import Tensor, make_result


class ElementwiseKind(str, enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    EXP = "exp"
    LOG = "log"
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"
    ELU = "elu"
    RELU = "relu"
    NEGATE = "negate"
    SCALE = "scale"


class ReduceKind(str, enum.Enum):
    SUM = "sum"
    MEAN = "mean"
    LOGSUMEXP = "logsumexp"


def lift(x: Tensor | float | np.ndarray, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    # 同一形状かスカラー対テンソルのみ
    if a.shape == b.shape:
        return a.shape
    if b.size == 1:
        return a.shape
    if a.size == 1:
        return b.shape
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _fit(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


################################
# Elementwise
################################

def _binary(kind: ElementwiseKind, a: Tensor, b: Tensor) -> Tensor:
    out_shape = _broadcast_shape(a, b)
    x, y = a.data, b.data
    if kind is ElementwiseKind.ADD:
        data = x + y
        fn = lambda g: (_fit(g, a.shape), _fit(g, b.shape))
    elif kind is ElementwiseKind.SUB:
        data = x - y
        fn = lambda g: (_fit(g, a.shape), _fit(-g, b.shape))
    elif kind is ElementwiseKind.MUL:
        data = x * y
        fn = lambda g: (_fit(g * y, a.shape), _fit(g * x, b.shape))
    elif kind is ElementwiseKind.DIV:
        if np.any(y == 0):
            raise DomainValueError("div: zero divisor")
        data = x / y
        fn = lambda g: (_fit(g / y, a.shape), _fit(-g * x / (y * y), b.shape))
    else:
        raise ValueError(f"{kind.value} is not a binary op")
    return make_result(np.broadcast_to(data, out_shape).copy(), (a, b), fn, kind.value)


def _unary(kind: ElementwiseKind, a: Tensor, constant: float | None) -> Tensor:
    x = a.data
    with np.errstate(over="ignore"):
        if kind is ElementwiseKind.EXP:
            data = np.exp(x)
            fn = lambda g: (g * data,)
        elif kind is ElementwiseKind.LOG:
            if np.any(x <= 0):
                raise DomainValueError("log: non-positive operand")
            data = np.log(x)
            fn = lambda g: (g / x,)
        elif kind is ElementwiseKind.SIGMOID:
            data = expit(x)
            fn = lambda g: (g * data * (1.0 - data),)
        elif kind is ElementwiseKind.SOFTPLUS:
            data = np.logaddexp(0.0, x)
            fn = lambda g: (g * expit(x),)
        elif kind is ElementwiseKind.ELU:
            # α = 1
            neg = np.expm1(np.minimum(x, 0.0))
            data = np.where(x > 0, x, neg)
            fn = lambda g: (g * np.where(x > 0, 1.0, neg + 1.0),)
        elif kind is ElementwiseKind.RELU:
            data = np.maximum(x, 0.0)
            fn = lambda g: (g * (x > 0),)
        elif kind is ElementwiseKind.NEGATE:
            data = -x
            fn = lambda g: (-g,)
        elif kind is ElementwiseKind.SCALE:
            if constant is None:
                raise ValueError("scale needs a constant")
            c = constant
            data = x * c
            fn = lambda g: (g * c,)
        else:
            raise ValueError(f"{kind.value} is not a unary op")
    return make_result(np.asarray(data, dtype=x.dtype), (a,), fn, kind.value)


def elementwise(
    kind: ElementwiseKind | str,
    a: Tensor,
    b: Tensor | float | None = None,
    *,
    constant: float | None = None,
) -> Tensor:
    kind = ElementwiseKind(kind)
    if kind in (ElementwiseKind.ADD, ElementwiseKind.SUB, ElementwiseKind.MUL, ElementwiseKind.DIV):
        if b is None:
            raise ValueError(f"{kind.value} needs two operands")
        return _binary(kind, a, lift(b, like=a))
    return _unary(kind, a, constant)


def add(a: Tensor, b: Tensor | float) -> Tensor:
    return elementwise(ElementwiseKind.ADD, a, b)


def sub(a: Tensor, b: Tensor | float) -> Tensor:
    return elementwise(ElementwiseKind.SUB, a, b)


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    return elementwise(ElementwiseKind.MUL, a, b)


def div(a: Tensor, b: Tensor | float) -> Tensor:
    return elementwise(ElementwiseKind.DIV, a, b)


def exp(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.EXP, a)


def log(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.LOG, a)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.SIGMOID, a)


def softplus(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.SOFTPLUS, a)


def elu(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.ELU, a)


def relu(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.RELU, a)


def negate(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.NEGATE, a)


def scale(a: Tensor, c: float) -> Tensor:
    return elementwise(ElementwiseKind.SCALE, a, constant=float(c))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


################################
# Linear algebra / convolution
################################

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return make_result(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias along axis 1 (N×F or N×C×H×W)."""
    if x.ndim < 2 or bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit input {x.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    b = bias.data.reshape(shape)
    axes = (0,) + tuple(range(2, x.ndim))
    return make_result(x.data + b, (x, bias), lambda g: (g, g.sum(axis=axes)), "bias_add")


def _check_mask(mask: np.ndarray, kernel_shape: tuple[int, ...]) -> None:
    if mask.shape != kernel_shape:
        raise MaskError(f"mask shape {mask.shape} != kernel shape {kernel_shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise MaskError("mask entries must be 0 or 1")


def conv2d(
    x: Tensor,
    kernel: Tensor,
    mask: np.ndarray | Tensor | None = None,
    padding: tuple[int, int, int, int] | int | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Stride-1 cross-correlation with kernel ⊙ mask.

    ``x`` is N×C_in×H×W (or C_in×H×W), ``kernel`` is C_out×C_in×kh×kw and
    ``padding`` is (top, bottom, left, right); the default pads to same size.
    """
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (N×)C×H×W input and 4-D kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    xin = x.data[None] if squeeze else x.data
    if xin.shape[1] != c_in:
        raise ShapeError(f"conv2d input has {xin.shape[1]} channels, kernel expects {c_in}")
    m = np.ones(kernel.shape, dtype=kernel.dtype)
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=kernel.dtype)
        _check_mask(m, kernel.shape)
    if padding is None:
        padding = ((kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2)
    elif isinstance(padding, int):
        padding = (padding, padding, padding, padding)
    top, bottom, left, right = padding
    k_eff = kernel.data * m
    xpad = np.pad(xin, ((0, 0), (0, 0), (top, bottom), (left, right)))
    h_out = xpad.shape[2] - kh + 1
    w_out = xpad.shape[3] - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {kernel.shape}")
    windows = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, k_eff, optimize=True)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    taps = [(i, j) for i in range(kh) for j in range(kw) if np.any(m[:, :, i, j])]

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        g4 = g[None] if squeeze else g
        g_kernel = np.einsum("nohw,nchwij->ocij", g4, windows, optimize=True) * m
        g_pad = np.zeros_like(xpad)
        for i, j in taps:
            g_pad[:, :, i:i + h_out, j:j + w_out] += np.einsum("nohw,oc->nchw", g4, k_eff[:, :, i, j])
        g_x = g_pad[:, :, top:top + xin.shape[2], left:left + xin.shape[3]]
        if squeeze:
            g_x = g_x[0]
        g_bias = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        return (g_x, g_kernel, g_bias) if bias is not None else (g_x, g_kernel)

    parents: tuple[Tensor, ...] = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_result(out[0] if squeeze else out, parents, grad_fn, "conv2d")


################################
# Reductions
################################

def _normalize_axes(x: Tensor, axes: int | Sequence[int] | None) -> tuple[int, ...]:
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    norm = tuple(sorted(a % x.ndim for a in axes)) if x.ndim else ()
    for a in norm:
        if x.shape[a] == 0:
            raise ShapeError(f"empty reduction axis {a} in shape {x.shape}")
    if x.size == 0:
        raise ShapeError("reduction over an empty tensor")
    return norm


def reduce(kind: ReduceKind | str, x: Tensor, axes: int | Sequence[int] | None = None) -> Tensor:
    kind = ReduceKind(kind)
    ax = _normalize_axes(x, axes)
    kept = tuple(1 if i in ax else n for i, n in enumerate(x.shape))
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    if kind is ReduceKind.SUM:
        data = x.data.sum(axis=ax)
        fn = lambda g: (np.broadcast_to(g.reshape(kept), x.shape).copy(),)
    elif kind is ReduceKind.MEAN:
        data = x.data.mean(axis=ax)
        fn = lambda g: (np.broadcast_to(g.reshape(kept), x.shape) / count,)
    else:
        # scipy は最大値を引いてから計算する
        data = _np_logsumexp(x.data, axis=ax)
        weights = np.exp(x.data - data.reshape(kept))
        fn = lambda g: (g.reshape(kept) * weights,)
    return make_result(np.asarray(data, dtype=x.dtype), (x,), fn, kind.value)


def sum(x: Tensor, axes: int | Sequence[int] | None = None) -> Tensor:  # noqa: A001
    return reduce(ReduceKind.SUM, x, axes)


def mean(x: Tensor, axes: int | Sequence[int] | None = None) -> Tensor:
    return reduce(ReduceKind.MEAN, x, axes)


def logsumexp(x: Tensor, axes: int | Sequence[int] | None = None) -> Tensor:
    return reduce(ReduceKind.LOGSUMEXP, x, axes)


################################
# Shape manipulation
################################

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(str(e)) from e
    return make_result(data.copy(), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_result(data, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take(x: Tensor, index: Any) -> Tensor:
    data = np.array(x.data[index], copy=True)

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return make_result(data, (x,), fn, "take")
