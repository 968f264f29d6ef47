from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from contextvars import ContextVar, Token
from typing import Any

import numpy as np

from vlae_lab.domain.errors import NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_FLOAT_DTYPES = (np.float64, np.float32)

# スレッドごとに独立したアクティブテープ
_active_tape: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


def _as_float_array(data: Any, dtype: np.dtype | type | None = None) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.dtype.type not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Immutable array value that may sit on a reverse-mode tape."""

    __slots__ = ("data", "parents", "grad_fn", "param", "requires_grad", "op", "tape")

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        dtype: np.dtype | type | None = None,
        _parents: tuple[Tensor, ...] = (),
        _grad_fn: GradFn | None = None,
        _op: str = "leaf",
        _param: Parameter | None = None,
        _owned: bool = False,
    ):
        arr = data if _owned else _as_float_array(data, dtype)
        arr.setflags(write=False)
        self.data: np.ndarray = arr
        self.parents = _parents
        self.grad_fn = _grad_fn
        self.param = _param
        self.requires_grad = requires_grad
        self.op = _op
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # 演算子は ops モジュールへ委譲する
    def __add__(self, other: Tensor | float) -> Tensor:
        from vlae_lab.domain.ndiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Tensor | float) -> Tensor:
        from vlae_lab.domain.ndiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other: Tensor | float) -> Tensor:
        from vlae_lab.domain.ndiff import ops
        return ops.sub(ops.lift(other, like=self), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from vlae_lab.domain.ndiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Tensor | float) -> Tensor:
        from vlae_lab.domain.ndiff import ops
        return ops.div(self, other)

    def __neg__(self) -> Tensor:
        from vlae_lab.domain.ndiff import ops
        return ops.negate(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        from vlae_lab.domain.ndiff import ops
        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        from vlae_lab.domain.ndiff import ops
        return ops.take(self, index)


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    grad_fn: GradFn,
    op: str,
) -> Tensor:
    """Wrap a forward result and record it on the active tape when needed."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    requires_grad = any(p.requires_grad for p in parents)
    tape = _active_tape.get()
    if not requires_grad or tape is None:
        return Tensor(data, _owned=True, _op=op)
    out = Tensor(
        data,
        requires_grad=True,
        _parents=tuple(parents),
        _grad_fn=grad_fn,
        _op=op,
        _owned=True,
    )
    tape.record(out)
    return out


class Parameter:
    """Trainable array with its accumulated gradient and Polyak shadow copy."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value: np.ndarray = _as_float_array(value)
        self.grad: np.ndarray = np.zeros_like(self.value)
        self.shadow: np.ndarray = self.value.copy()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def tensor(self, use_shadow: bool = False) -> Tensor:
        source = self.shadow if use_shadow else self.value
        return Tensor(source, requires_grad=not use_shadow, _param=None if use_shadow else self)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def update_shadow(self, alpha: float) -> None:
        if alpha == 0.0:
            self.shadow = self.value.copy()
            return
        self.shadow = alpha * self.shadow + (1.0 - alpha) * self.value

    def assign(self, value: np.ndarray) -> None:
        if value.shape != self.value.shape:
            raise TapeError(f"parameter {self.name}: shape {value.shape} != {self.value.shape}")
        self.value = np.array(value, dtype=self.value.dtype, copy=True)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


class Tape:
    """Define-by-run record of differentiable ops, in execution order."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._token: Token[Tape | None] | None = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def record(self, node: Tensor) -> None:
        node.tape = self
        self.nodes.append(node)

    def _propagate(self, loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape is not self:
            raise TapeError("loss is not recorded on this tape")
        adjoints: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for node in reversed(self.nodes):
            entry = adjoints.get(id(node))
            if entry is None or node.grad_fn is None:
                continue
            upstream = entry[1]
            for parent, grad in zip(node.parents, node.grad_fn(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                prev = adjoints.get(id(parent))
                adjoints[id(parent)] = (parent, grad if prev is None else prev[1] + grad)
        return adjoints

    def backward(self, loss: Tensor) -> dict[Parameter, np.ndarray]:
        """Accumulate d(loss)/d(param) into every reachable Parameter."""
        adjoints = self._propagate(loss)
        touched: dict[Parameter, np.ndarray] = {}
        for tensor, grad in adjoints.values():
            if tensor.param is None:
                continue
            param = tensor.param
            param.grad = param.grad + grad.reshape(param.shape)
            touched[param] = touched.get(param, 0) + grad.reshape(param.shape)
        return touched

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. arbitrary tracked tensors (zeros if unreachable)."""
        adjoints = self._propagate(loss)
        out = []
        for tensor in wrt:
            entry = adjoints.get(id(tensor))
            out.append(np.zeros_like(tensor.data) if entry is None else entry[1])
        return out


def backward(tape: Tape, loss: Tensor) -> dict[Parameter, np.ndarray]:
    return tape.backward(loss)


def variable(data: Any, dtype: np.dtype | type | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data: Any, dtype: np.dtype | type | None = None) -> Tensor:
    return Tensor(data, dtype=dtype)
