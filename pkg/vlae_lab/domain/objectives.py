"""Free-bits surrogates and the soft free-bits γ controller."""
from __future__ import annotations

import enum

from pydantic import BaseModel, ConfigDict, field_validator

from vlae_lab.domain.errors import ArgumentError, ShapeError
from vlae_lab.domain.model import ElboTerms
from vlae_lab.domain.ndiff import ops
from vlae_lab.domain.ndiff.tensor import Tensor

GAMMA_MIN = 1e-4


class FreeBitsMode(str, enum.Enum):
    NONE = "none"
    HARD = "hard"
    SOFT = "soft"


class LambdaUnit(str, enum.Enum):
    PER_GROUP = "per_group"
    PER_DATA_DIM = "per_data_dim"
    TOTAL = "total"


class FreeBitsState(BaseModel):
    mode: FreeBitsMode = FreeBitsMode.HARD
    lam: float = 0.01
    lambda_unit: LambdaUnit = LambdaUnit.PER_DATA_DIM
    gamma: float = 1.0
    threshold: float = 0.05
    step_factor: float = 1.1
    # 0 = 潜在次元ごとに 1 グループ
    groups: int = 0
    kl_ema: float | None = None
    ema_decay: float = 0.99
    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("lam")
    @classmethod
    def check_lambda(cls, v: float) -> float:
        if v < 0:
            raise ValueError("lambda must be >= 0")
        return v

    @field_validator("gamma")
    @classmethod
    def check_gamma(cls, v: float) -> float:
        if not GAMMA_MIN < v <= 1.0:
            raise ValueError(f"gamma must be in ({GAMMA_MIN}, 1]")
        return v

    @field_validator("threshold")
    @classmethod
    def check_threshold(cls, v: float) -> float:
        if v < 0:
            raise ValueError("threshold must be >= 0")
        return v

    @field_validator("step_factor")
    @classmethod
    def check_step_factor(cls, v: float) -> float:
        if v <= 1.0:
            raise ValueError("step_factor must be > 1")
        return v

    @field_validator("ema_decay")
    @classmethod
    def check_decay(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        return v

    def n_groups(self, latent_dim: int) -> int:
        k = self.groups or latent_dim
        if latent_dim % k:
            raise ShapeError(f"{latent_dim} latent dims cannot be split into {k} equal groups")
        return k

    def lambda_total(self, n_groups: int, n_data_dims: int) -> float:
        match self.lambda_unit:
            case LambdaUnit.PER_GROUP:
                return self.lam * n_groups
            case LambdaUnit.PER_DATA_DIM:
                return self.lam * n_data_dims
            case LambdaUnit.TOTAL:
                return self.lam

    def lambda_per_group(self, n_groups: int, n_data_dims: int) -> float:
        return self.lambda_total(n_groups, n_data_dims) / n_groups

    def advance(self, batch_kl: float, n_groups: int, n_data_dims: int) -> "FreeBitsState":
        """Fold one batch KL into the EMA and move γ; called once per training step."""
        ema = batch_kl if self.kl_ema is None else self.ema_decay * self.kl_ema + (1 - self.ema_decay) * batch_kl
        gamma = self.gamma
        if self.mode is FreeBitsMode.SOFT:
            gamma = update_gamma(self, ema, self.lambda_total(n_groups, n_data_dims))
        return self.model_copy(update={"kl_ema": ema, "gamma": gamma})


def update_gamma(state: FreeBitsState, observed_mean_kl: float, lambda_total: float) -> float:
    gamma = state.gamma
    if observed_mean_kl > lambda_total * (1.0 + state.threshold):
        gamma = min(1.0, gamma * state.step_factor)
    elif observed_mean_kl < lambda_total and gamma / state.step_factor > GAMMA_MIN:
        # γ は (GAMMA_MIN, 1] に留める
        gamma = gamma / state.step_factor
    return gamma


def group_kl(terms: ElboTerms, n_groups: int) -> Tensor:
    """Batch-mean KL per group of latent dims, shape K."""
    if terms.kl_units is None:
        raise ShapeError("per-group KL needs a latent code")
    n, d = terms.kl_units.shape
    grouped = ops.sum(ops.reshape(terms.kl_units, (n, n_groups, d // n_groups)), axes=2)
    return ops.mean(grouped, axes=0)


def surrogate_objective(terms: ElboTerms, state: FreeBitsState, n_data_dims: int) -> Tensor:
    """Loss to minimize: the negated free-bits surrogate of the batch-mean ELBO."""
    if state.lam < 0:
        raise ArgumentError("lambda must be >= 0")
    recon = ops.mean(terms.recon)
    if terms.kl_units is None or state.mode is FreeBitsMode.NONE:
        return ops.negate(ops.mean(terms.elbo))
    if state.mode is FreeBitsMode.SOFT:
        kl = ops.scale(ops.mean(terms.kl), state.gamma)
        return ops.negate(ops.sub(recon, kl))
    k = state.n_groups(terms.kl_units.shape[1])
    lam = state.lambda_per_group(k, n_data_dims)
    # max(λ, KL_j) = λ + relu(KL_j - λ)
    floored = ops.add(ops.relu(ops.sub(group_kl(terms, k), lam)), lam)
    return ops.negate(ops.sub(recon, ops.sum(floored)))
