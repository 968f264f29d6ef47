"""Autoregressive-flow prior p(z) = u(f^-1(z)) |det d f^-1 / dz|."""
from __future__ import annotations

import enum
import logging
from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from vlae_lab.domain.errors import FlowError, NumericError, ShapeError
from vlae_lab.domain.masks import build_made_masks, natural_ordering, reversed_ordering
from vlae_lab.domain.ndiff import ops
from vlae_lab.domain.ndiff.module import Dense, Module
from vlae_lab.domain.ndiff.tensor import Tensor, constant

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA_FLOOR = 1e-4
# softplus(SIGMA_SHIFT) + SIGMA_FLOOR = 1, so a zero conditioner output is the identity
SIGMA_SHIFT = float(np.log(np.expm1(1.0 - SIGMA_FLOOR)))


class FlowMode(str, enum.Enum):
    MEAN_ONLY = "mean_only"
    AFFINE = "affine"


class Ordering(str, enum.Enum):
    FORWARD = "forward"
    REVERSED = "reversed"


##################################
# Noise source
##################################

class NoiseSource(BaseModel):
    dim: int
    model_config = ConfigDict(frozen=True)

    @field_validator("dim")
    @classmethod
    def check_dim(cls, v: int) -> int:
        if v < 1:
            raise ValueError("noise dimension must be >= 1")
        return v

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.dim))

    def log_density_units(self, eps: Tensor) -> Tensor:
        """Per-unit log N(ε_i; 0, 1), shape N×D."""
        return ops.scale(ops.add(ops.square(eps), LOG_2PI), -0.5)

    def log_density(self, eps: Tensor) -> Tensor:
        return ops.sum(self.log_density_units(eps), axes=1)


##################################
# Flow step / stack
##################################

class MadeConditioner(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, ordering: Sequence[int], n_outputs: int):
        super().__init__()
        made = build_made_masks([dim, hidden, hidden, dim], ordering)
        self.made = made
        self.n_outputs = n_outputs
        out_mask = np.tile(made.masks[2], (1, n_outputs))
        self.l1 = self.add_child("l1", Dense(rng, dim, hidden, mask=made.masks[0]))
        self.l2 = self.add_child("l2", Dense(rng, hidden, hidden, mask=made.masks[1]))
        self.l3 = self.add_child("l3", Dense(rng, hidden, dim * n_outputs, mask=out_mask, zero_init=True))

    def __call__(self, y: Tensor) -> list[Tensor]:
        h = ops.relu(self.l1(y))
        h = ops.relu(self.l2(h))
        out = self.l3(h)
        d = self.made.dim
        return [out[:, k * d:(k + 1) * d] for k in range(self.n_outputs)]


class FlowStep(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, mode: FlowMode, ordering: Ordering):
        super().__init__()
        self.dim = dim
        self.mode = FlowMode(mode)
        self.ordering = Ordering(ordering)
        order = natural_ordering(dim) if self.ordering is Ordering.FORWARD else reversed_ordering(dim)
        n_outputs = 1 if self.mode is FlowMode.MEAN_ONLY else 2
        self.conditioner = self.add_child("made", MadeConditioner(rng, dim, hidden, order, n_outputs))

    def shift_scale(self, y: Tensor) -> tuple[Tensor, Tensor | None]:
        """μ(y_<i) and σ(y_<i); σ is None in mean-only mode."""
        try:
            outs = self.conditioner(y)
        except NumericError as e:
            raise FlowError(f"non-finite conditioner output: {e}") from e
        if self.mode is FlowMode.MEAN_ONLY:
            return outs[0], None
        sigma = ops.add(ops.softplus(ops.add(outs[1], SIGMA_SHIFT)), SIGMA_FLOOR)
        if np.any(sigma.data <= 0.0):
            raise FlowError("σ underflow in affine flow step")
        return outs[0], sigma

    def forward(self, eps: Tensor) -> tuple[Tensor, Tensor | None]:
        # y_i = ε_i σ_i(y_<i) + μ_i(y_<i); k 回目の掃引で先頭 k 個が確定する
        y = eps
        sigma: Tensor | None = None
        for _ in range(self.dim):
            mu, sigma = self.shift_scale(y)
            y = ops.add(mu, eps) if sigma is None else ops.add(mu, ops.mul(eps, sigma))
        return y, None if sigma is None else ops.log(sigma)

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor | None]:
        mu, sigma = self.shift_scale(y)
        centered = ops.sub(y, mu)
        if sigma is None:
            return centered, None
        return ops.div(centered, sigma), ops.negate(ops.log(sigma))


class FlowStack(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        n_steps: int = 4,
        hidden: int = 64,
        mode: FlowMode | str = FlowMode.MEAN_ONLY,
        reverse: bool = True,
    ):
        super().__init__()
        if n_steps < 0:
            raise ShapeError("flow step count must be >= 0")
        self.noise = NoiseSource(dim=dim)
        self.mode = FlowMode(mode)
        self.steps: list[FlowStep] = []
        for k in range(n_steps):
            ordering = Ordering.REVERSED if reverse and k % 2 == 1 else Ordering.FORWARD
            step = FlowStep(rng, dim, hidden, self.mode, ordering)
            self.steps.append(step)
            self.add_child(f"step{k}", step)

    @property
    def dim(self) -> int:
        return self.noise.dim

    def manifest(self) -> list[dict[str, str | int]]:
        return [{"step": k, "mode": s.mode.value, "ordering": s.ordering.value} for k, s in enumerate(self.steps)]

    def _check(self, x: Tensor) -> None:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"flow expects N×{self.dim}, got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise FlowError("non-finite flow input")

    def forward_units(self, eps: Tensor) -> tuple[Tensor, Tensor]:
        """z and per-unit log|dz/dε| contributions (N×D), summed over steps."""
        self._check(eps)
        z = eps
        units = constant(np.zeros(eps.shape))
        for step in self.steps:
            z, ld = step.forward(z)
            if ld is not None:
                units = ops.add(units, ld)
        return z, units

    def inverse_units(self, z: Tensor) -> tuple[Tensor, Tensor]:
        self._check(z)
        eps = z
        units = constant(np.zeros(z.shape))
        for step in reversed(self.steps):
            eps, ld = step.inverse(eps)
            if ld is not None:
                units = ops.add(units, ld)
        return eps, units


def _as_batch(x: Tensor | np.ndarray) -> Tensor:
    t = x if isinstance(x, Tensor) else constant(x)
    return ops.reshape(t, (1, -1)) if t.ndim == 1 else t


def af_forward(stack: FlowStack, eps: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
    z, units = stack.forward_units(_as_batch(eps))
    return z, ops.sum(units, axes=1)


def af_inverse(stack: FlowStack, z: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
    eps, units = stack.inverse_units(_as_batch(z))
    return eps, ops.sum(units, axes=1)


def log_prior_units(stack: FlowStack, z: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-unit log u(ε_i) and log|dε/dz| terms; their total is log p(z)."""
    eps, ld_units = stack.inverse_units(_as_batch(z))
    return stack.noise.log_density_units(eps), ld_units


def log_prior(stack: FlowStack, z: Tensor | np.ndarray) -> Tensor:
    """log p(z) = log u(f^-1(z)) + log det dε/dz, one value per row."""
    eps, ld = af_inverse(stack, z)
    return ops.add(stack.noise.log_density(eps), ld)


##################################
# AF prior / IAF posterior equivalence
##################################

class SamplePath(BaseModel):
    mean: np.ndarray
    log_std: np.ndarray
    eta: np.ndarray
    recon: np.ndarray = Field(description="log p(x|z) per row")
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @property
    def z(self) -> np.ndarray:
        return self.mean + np.exp(self.log_std) * self.eta

    @property
    def log_q(self) -> np.ndarray:
        return np.sum(-0.5 * LOG_2PI - self.log_std - 0.5 * self.eta**2, axis=-1)


def elbo_equivalence(stack: FlowStack, path: SamplePath) -> tuple[np.ndarray, np.ndarray]:
    """ELBO with an AF prior over z vs. with an IAF posterior over ε = f^-1(z)."""
    z = np.atleast_2d(path.z)
    log_q = np.atleast_1d(path.log_q)
    recon = np.atleast_1d(path.recon)

    eps, ld_inverse = af_inverse(stack, z)
    log_u = stack.noise.log_density(eps).data
    via_prior = recon + (log_u + ld_inverse.data) - log_q

    # IAF 側: ε を潜在変数とし q(ε|x) = q(z|x) |dz/dε|
    z_again, ld_forward = af_forward(stack, eps)
    if not np.allclose(z_again.data, z, rtol=0.0, atol=1e-6):
        raise FlowError("flow round trip drifted while checking the AF/IAF equivalence")
    log_q_eps = log_q + ld_forward.data
    via_posterior = recon + log_u - log_q_eps
    return via_prior, via_posterior
