from __future__ import annotations

import enum
from abc import ABC, abstractmethod

import numpy as np

from vlae_lab.domain.errors import CheckpointError
from vlae_lab.domain.ndiff.tensor import Parameter


class OptimizerKind(str, enum.Enum):
    ADAMAX = "adamax"
    ADAM = "adam"


class Optimizer(ABC):
    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.first: dict[str, np.ndarray] = {}
        self.second: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Parameter]) -> None:
        self.t += 1
        for name in sorted(params):
            param = params[name]
            m = self.first.get(name, np.zeros_like(param.value))
            s = self.second.get(name, np.zeros_like(param.value))
            m = self.beta1 * m + (1.0 - self.beta1) * param.grad
            s = self._second_moment(s, param.grad)
            self.first[name], self.second[name] = m, s
            param.assign(param.value - self._update(m, s))

    @abstractmethod
    def _second_moment(self, s: np.ndarray, grad: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _update(self, m: np.ndarray, s: np.ndarray) -> np.ndarray: ...

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.first.items()}
        out.update({f"s.{k}": v for k, v in self.second.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        first = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
        second = {k[2:]: v for k, v in arrays.items() if k.startswith("s.")}
        if set(first) != set(second):
            raise CheckpointError("optimizer moments are incomplete")
        self.first, self.second, self.t = first, second, t


class Adamax(Optimizer):
    def _second_moment(self, s: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return np.maximum(self.beta2 * s, np.abs(grad))

    def _update(self, m: np.ndarray, s: np.ndarray) -> np.ndarray:
        step = self.lr / (1.0 - self.beta1**self.t)
        return step * m / (s + self.eps)


class Adam(Optimizer):
    def _second_moment(self, s: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return self.beta2 * s + (1.0 - self.beta2) * grad * grad

    def _update(self, m: np.ndarray, s: np.ndarray) -> np.ndarray:
        m_hat = m / (1.0 - self.beta1**self.t)
        s_hat = s / (1.0 - self.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(s_hat) + self.eps)


def build_optimizer(kind: OptimizerKind | str, lr: float, betas: tuple[float, float] = (0.9, 0.999)) -> Optimizer:
    match OptimizerKind(kind):
        case OptimizerKind.ADAMAX:
            return Adamax(lr, betas)
        case OptimizerKind.ADAM:
            return Adam(lr, betas)
