from __future__ import annotations

import numpy as np

from vlae_lab.domain.errors import ShapeError
from vlae_lab.domain.ndiff import ops
from vlae_lab.domain.ndiff.tensor import Parameter, Tensor, constant


def fan_in_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Gaussian init scaled by 1/sqrt(fan_in)."""
    return rng.standard_normal(shape) / np.sqrt(max(fan_in, 1))


class Module:
    """Named container of Parameters and sub-modules."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}
        self._polyak = False

    def add_param(self, key: str, value: np.ndarray) -> Parameter:
        param = Parameter(key, value)
        self._params[key] = param
        return param

    def add_child(self, key: str, child: Module) -> Module:
        self._children[key] = child
        return child

    def p(self, key: str) -> Tensor:
        return self._params[key].tensor(use_shadow=self._polyak)

    def parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {f"{prefix}{k}": v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.parameters(f"{prefix}{name}."))
        return out

    def use_polyak(self, enabled: bool) -> None:
        self._polyak = enabled
        for child in self._children.values():
            child.use_polyak(enabled)

    def randomize(self, rng: np.random.Generator, scale: float = 0.5) -> None:
        """Overwrite every parameter (shadow included) with N(0, scale²) draws."""
        params = self.parameters()
        for name in sorted(params):
            param = params[name]
            param.assign(scale * rng.standard_normal(param.shape))
            param.shadow = param.value.copy()

    def load_arrays(self, values: dict[str, np.ndarray], shadows: dict[str, np.ndarray] | None = None) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(values))
        if missing:
            raise ShapeError(f"missing parameters: {', '.join(missing[:5])}")
        for name, param in params.items():
            if values[name].shape != param.shape:
                raise ShapeError(f"parameter {name}: shape {values[name].shape} != {param.shape}")
            param.assign(values[name])
            param.shadow = np.array(shadows[name] if shadows else values[name], dtype=param.value.dtype)


class Dense(Module):
    """x @ (W ⊙ M) + b; the mask is optional."""

    def __init__(
        self,
        rng: np.random.Generator,
        n_in: int,
        n_out: int,
        mask: np.ndarray | None = None,
        zero_init: bool = False,
    ):
        super().__init__()
        weight = np.zeros((n_in, n_out)) if zero_init else fan_in_normal(rng, (n_in, n_out), n_in)
        self.add_param("w", weight)
        self.add_param("b", np.zeros(n_out))
        self.mask = None if mask is None else constant(mask)

    def __call__(self, x: Tensor) -> Tensor:
        w = self.p("w")
        if self.mask is not None:
            w = ops.mul(w, self.mask)
        return ops.bias_add(ops.matmul(x, w), self.p("b"))


class MaskedConv(Module):
    """Same-padded conv2d with a fixed binary mask."""

    def __init__(
        self,
        rng: np.random.Generator,
        mask: np.ndarray,
        zero_init: bool = False,
        kernel: Parameter | None = None,
    ):
        super().__init__()
        c_out, c_in, kh, kw = mask.shape
        self.mask = mask
        fan_in = max(int(mask[0].sum()), 1)
        if kernel is None:
            value = np.zeros(mask.shape) if zero_init else fan_in_normal(rng, mask.shape, fan_in)
            self.add_param("kernel", value)
        else:
            # 共有カーネル (weight tying) は所有者側にのみ登録する
            self._shared = kernel
        self.add_param("bias", np.zeros(c_out))

    def kernel(self) -> Tensor:
        if "kernel" in self._params:
            return self.p("kernel")
        return self._shared.tensor(use_shadow=self._polyak)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.kernel(), mask=self.mask, bias=self.p("bias"))
