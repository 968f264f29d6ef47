"""Experiment configuration: TOML with dotted keys, one-to-one CLI overrides."""
from __future__ import annotations

import enum
import json
import tomllib
from collections.abc import Iterable
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from vlae_lab.domain.data import Binarization, SynthKind, SynthSpec
from vlae_lab.domain.errors import DomainError
from vlae_lab.domain.model import ModelSpec
from vlae_lab.domain.objectives import FreeBitsMode, FreeBitsState, LambdaUnit
from vlae_lab.domain.optim import OptimizerKind


class ConfigError(DomainError): ...


class DataSource(str, enum.Enum):
    SYNTH = "synth"
    IDX = "idx"
    AMAT = "amat"
    RAW = "raw"
    STORE = "store"


class DataConfig(BaseModel):
    source: DataSource = DataSource.SYNTH
    path: str = ""
    prebinarized_path: str = ""
    synth_kind: SynthKind = SynthKind.LOCAL_TEXTURE
    height: int = 12
    width: int = 12
    p_left: float = 0.35
    p_up: float = 0.35
    n_shapes: int = 8
    noise: float = 0.02
    n_images: int = 512
    binarization: Binarization = Binarization.STATIC
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    limit: int = 0
    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("n_images", "limit")
    @classmethod
    def check_count(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("fractions")
    @classmethod
    def check_fractions(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(f < 0 or f > 1 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("fractions must lie in [0, 1] and sum to 1")
        return v

    @model_validator(mode="after")
    def check_path(self) -> "DataConfig":
        if self.source is not DataSource.SYNTH and not self.path:
            raise ValueError(f"path is required for source {self.source.value}")
        return self

    def synth_spec(self, seed: int) -> SynthSpec:
        return SynthSpec(
            kind=self.synth_kind,
            height=self.height,
            width=self.width,
            p_left=self.p_left,
            p_up=self.p_up,
            n_shapes=self.n_shapes,
            noise=self.noise,
            seed=seed,
        )


class ObjectiveConfig(BaseModel):
    mode: FreeBitsMode = FreeBitsMode.HARD
    lam: float = Field(default=0.01, alias="lambda")
    lambda_unit: LambdaUnit = LambdaUnit.PER_DATA_DIM
    threshold: float = 0.05
    step_factor: float = 1.1
    groups: int = 0
    gamma_init: float = 1.0
    ema_decay: float = 0.99
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @field_validator("lam")
    @classmethod
    def check_lambda(cls, v: float) -> float:
        if v < 0:
            raise ValueError("lambda must be >= 0")
        return v

    @model_validator(mode="after")
    def check_state(self) -> "ObjectiveConfig":
        try:
            self.initial_state()
        except ValidationError as e:
            raise ValueError(str(e)) from e
        return self

    def initial_state(self) -> FreeBitsState:
        return FreeBitsState(
            mode=self.mode,
            lam=self.lam,
            lambda_unit=self.lambda_unit,
            gamma=self.gamma_init,
            threshold=self.threshold,
            step_factor=self.step_factor,
            groups=self.groups,
            ema_decay=self.ema_decay,
        )


class OptimizerConfig(BaseModel):
    kind: OptimizerKind = OptimizerKind.ADAMAX
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    polyak_alpha: float = 0.998
    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("lr")
    @classmethod
    def check_lr(cls, v: float) -> float:
        if v < 0:
            raise ValueError("lr must be >= 0")
        return v

    @field_validator("beta1", "beta2", "polyak_alpha")
    @classmethod
    def check_unit(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("must be in [0, 1)")
        return v


class RunConfig(BaseModel):
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 100
    k: int = 128
    n_mc: int = 1
    check_equivalence: bool = False
    device: Literal["none", "cpu"] = "cpu"
    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("steps")
    @classmethod
    def check_steps(cls, v: int) -> int:
        if v < 0:
            raise ValueError("steps must be >= 0")
        return v

    @field_validator("batch_size", "log_every", "checkpoint_every", "k", "n_mc")
    @classmethod
    def check_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v


class ExperimentConfig(BaseModel):
    data: DataConfig = DataConfig()
    model: ModelSpec = ModelSpec()
    objective: ObjectiveConfig = ObjectiveConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    run: RunConfig = RunConfig()
    model_config = ConfigDict(extra="forbid", frozen=True)


##################################
# TOML
##################################

def _parse_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key or "." not in key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        out[key] = _parse_value(raw.strip())
    return out


def _set_dotted(tree: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for part in parents:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{dotted}: {part} is not a section")
        node = child
    node[leaf] = value


def load_config(text: str = "", overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Parse TOML text and apply dotted-key overrides; raises ValidationError on bad values."""
    try:
        tree = tomllib.loads(text) if text else {}
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"unreadable config: {e}") from e
    for key, value in (overrides or {}).items():
        _set_dotted(tree, key, value)
    return ExperimentConfig.model_validate(tree)


def flatten(config: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for section, values in config.model_dump(mode="json", by_alias=True).items():
        for key, value in values.items():
            out[f"{section}.{key}"] = value
    return out


def dump_config(config: ExperimentConfig) -> str:
    """Flat dotted-key TOML; JSON scalars and arrays are valid TOML values."""
    return "".join(f"{key} = {json.dumps(value)}\n" for key, value in flatten(config).items())


def with_overrides(config: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    return load_config(dump_config(config), overrides)
