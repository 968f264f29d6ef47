import enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from vlae_lab.domain.masks import CausalityReport

# DTO (Data Transfer Object)


class CheckpointSlot(str, enum.Enum):
    LATEST = "latest"
    POLYAK = "polyak"


class WeightsKind(str, enum.Enum):
    POLYAK = "polyak"
    RAW = "raw"


class Checkpoint(BaseModel):
    slot: CheckpointSlot
    step: int
    config: str = Field(description="resolved config TOML")
    gamma: float = 1.0
    kl_ema: float | None = None
    optimizer_t: int = 0
    image_shape: tuple[int, int, int]
    flows: list[dict[str, str | int]] = Field(default_factory=list)
    params: dict[str, np.ndarray]
    shadows: dict[str, np.ndarray] = Field(default_factory=dict)
    moments: dict[str, np.ndarray] = Field(default_factory=dict)
    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def has_moments(self) -> bool:
        return bool(self.moments)


class MetricsRow(BaseModel):
    step: int
    recon_nats: float
    kl_nats: float
    elbo_nats: float
    gamma: float
    grad_norm: float
    wallclock_s: float


class TrainInput(BaseModel):
    config: str = ""
    overrides: dict[str, object] = Field(default_factory=dict)
    resume: bool = True


class TrainOutput(BaseModel):
    steps_run: int
    final_step: int
    last: MetricsRow | None = None


class EvalInput(BaseModel):
    k: int | None = None
    seed: int | None = None
    split: str = "test"
    weights: WeightsKind = WeightsKind.POLYAK
    limit: int = 0
    workers: int = 1


class EvalReport(BaseModel):
    weights: WeightsKind
    split: str
    n_images: int
    k: int
    nll_nats: float
    nll_std_error: float
    nll_bits: float
    bits_per_dim: float
    kl_usage_nats: float
    kl_usage_bits: float
    naive_len_nats: float
    bitsback_len_nats: float
    savings_nats: float
    mean_elbo_nats: float
    decoder: str


class SampleInput(BaseModel):
    n: int = 16
    seed: int = 0
    cols: int = 8
    weights: WeightsKind = WeightsKind.POLYAK
    name: str = "samples"


class ReconstructInput(BaseModel):
    n_images: int = 8
    n_variants: int = 4
    seed: int = 0
    split: str = "test"
    weights: WeightsKind = WeightsKind.POLYAK
    name: str = "reconstructions"


class GridOutput(BaseModel):
    path: str
    height: int
    width: int


class RfCheckInput(BaseModel):
    config: str = ""
    overrides: dict[str, object] = Field(default_factory=dict)
    channels: int = 1
    grid_height: int = 8
    grid_width: int = 8
    seed: int = 0


class RfCheckOutput(BaseModel):
    window: str
    height: int
    width: int
    left_extent: int
    report: CausalityReport


class CompareKInput(BaseModel):
    k_small: int = 1
    k_large: int = 256
    seed: int | None = None
    split: str = "test"
    weights: WeightsKind = WeightsKind.POLYAK
    limit: int = 0
    workers: int = 1


class CompareKReport(BaseModel):
    split: str
    n_images: int
    k_small: int
    k_large: int
    nll_small_nats: float
    nll_large_nats: float
    wins: int = Field(description="images whose k_large estimate is below the k_small one")
    trials: int
    p_value: float


class DataCheckInput(BaseModel):
    config: str = ""
    overrides: dict[str, object] = Field(default_factory=dict)
    patch: int = 2


class DataCheckReport(BaseModel):
    provenance: str
    n_images: int
    near_mi_bits: float
    far_mi_bits: float
    window_predictability: float
    window_conditional: dict[int, float]
