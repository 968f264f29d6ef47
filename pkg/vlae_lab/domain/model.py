"""The VLAE: encoder → diagonal Gaussian q(z|x) → AF prior p(z) → decoder p(x|z)."""
from __future__ import annotations

import enum
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from vlae_lab.domain.errors import ShapeError
from vlae_lab.domain.flows import LOG_2PI, FlowMode, FlowStack, SamplePath, af_forward, log_prior_units
from vlae_lab.domain.masks import MaskKind
from vlae_lab.domain.ndiff import ops
from vlae_lab.domain.ndiff.module import Module
from vlae_lab.domain.ndiff.tensor import Tensor, constant
from vlae_lab.domain.networks import (
    Decoder,
    DecoderKind,
    DecoderLayout,
    DecoderSpec,
    Encoder,
    ImageShape,
    PosteriorParams,
    bernoulli_log_mass,
    build_decoder,
)

logger = logging.getLogger(__name__)


class PriorKind(str, enum.Enum):
    AF = "af"
    GAUSSIAN = "gaussian"


class ModelSpec(BaseModel):
    latent_dim: int = 32
    prior: PriorKind = PriorKind.AF
    flow_steps: int = 4
    flow_mode: FlowMode = FlowMode.MEAN_ONLY
    flow_hidden: int = 64
    flow_reverse: bool = True
    encoder_channels: int = 16
    encoder_hidden: int = 128
    decoder_kind: DecoderKind = DecoderKind.LOCAL
    decoder_layout: DecoderLayout = DecoderLayout.RASTER
    decoder_layers: int = 6
    decoder_kernel: int = 3
    vertical_layers: int = 1
    horizontal_layers: int = 2
    decoder_channels: int = 32
    decoder_hidden: int = 128
    residual_blocks: bool = False
    tie_weights: bool = False
    first_mask: MaskKind = MaskKind.A
    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("latent_dim", "flow_steps")
    @classmethod
    def check_non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("flow_hidden", "encoder_channels", "encoder_hidden")
    @classmethod
    def check_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @model_validator(mode="after")
    def check_decoder(self) -> "ModelSpec":
        if self.latent_dim == 0 and self.decoder_kind is DecoderKind.FACTORIZED:
            raise ValueError("latent_dim: a factorized decoder needs latent_dim >= 1")
        try:
            self.decoder_spec()
        except ValidationError as e:
            raise ValueError(str(e)) from e
        return self

    def decoder_spec(self) -> DecoderSpec:
        return DecoderSpec(
            kind=self.decoder_kind,
            layout=self.decoder_layout,
            layers=self.decoder_layers,
            kernel=self.decoder_kernel,
            vertical_layers=self.vertical_layers,
            horizontal_layers=self.horizontal_layers,
            channels=self.decoder_channels,
            hidden=self.decoder_hidden,
            residual_blocks=self.residual_blocks,
            tie_weights=self.tie_weights,
            first_mask=self.first_mask,
        )


class ElboTerms(BaseModel):
    """Differentiable per-image pieces of one single-sample ELBO estimate."""

    recon: Tensor
    log_q: Tensor
    log_p: Tensor
    kl_units: Tensor | None
    clamp_events: int = 0
    path: SamplePath | None = None
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @property
    def kl(self) -> Tensor:
        return ops.sub(self.log_q, self.log_p)

    @property
    def elbo(self) -> Tensor:
        return ops.sub(self.recon, self.kl)


class ElboBreakdown(BaseModel):
    """Batch means, in nats."""

    recon: float
    kl: float
    elbo: float
    objective: float
    gamma: float = 1.0
    lam: float = Field(default=0.0, alias="lambda")
    clamp_events: int = 0
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    @classmethod
    def from_terms(cls, terms: ElboTerms, objective: float | None = None, gamma: float = 1.0, lam: float = 0.0) -> "ElboBreakdown":
        recon = float(np.mean(terms.recon.data))
        kl = float(np.mean(terms.kl.data))
        elbo = float(np.mean(terms.elbo.data))
        return cls(
            recon=recon,
            kl=kl,
            elbo=elbo,
            objective=elbo if objective is None else objective,
            gamma=gamma,
            lam=lam,
            clamp_events=terms.clamp_events,
        )


def sample_posterior(
    params: PosteriorParams,
    rng: np.random.Generator | None = None,
    eta: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """z = μ + σ ⊙ η with η ~ N(0, I), and log q(z|x) per row."""
    z, log_q_units = _posterior_units(params, rng, eta)
    return z, ops.sum(log_q_units, axes=1)


def _posterior_units(params: PosteriorParams, rng: np.random.Generator | None, eta: np.ndarray | None) -> tuple[Tensor, Tensor]:
    if eta is None:
        if rng is None:
            raise ValueError("sample_posterior needs an rng or explicit noise")
        eta = rng.standard_normal(params.mean.shape)
    sigma = ops.exp(params.log_std)
    z = ops.add(params.mean, ops.mul(sigma, constant(eta)))
    units = ops.sub(constant(-0.5 * LOG_2PI - 0.5 * eta**2), params.log_std)
    return z, units


def decode_logprob(decoder: Decoder, x: Tensor | np.ndarray, z: Tensor | np.ndarray | None) -> tuple[Tensor, int]:
    """log p(x|z) in nats per image, and the number of clamped probabilities."""
    target = x if isinstance(x, Tensor) else constant(x)
    log_mass, clamped = bernoulli_log_mass(target, decoder.logits(target, z))
    if clamped:
        logger.warning("clamped %d Bernoulli probabilities to [1e-7, 1-1e-7]", clamped)
    return log_mass, clamped


class Vlae(Module):
    def __init__(self, rng: np.random.Generator, image_shape: ImageShape, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.image_shape = image_shape
        self.encoder: Encoder | None = None
        self.prior: FlowStack | None = None
        if spec.latent_dim > 0:
            self.encoder = self.add_child(
                "encoder", Encoder(rng, image_shape, spec.latent_dim, spec.encoder_channels, spec.encoder_hidden)
            )
            steps = spec.flow_steps if spec.prior is PriorKind.AF else 0
            self.prior = self.add_child(
                "prior", FlowStack(rng, spec.latent_dim, steps, spec.flow_hidden, spec.flow_mode, spec.flow_reverse)
            )
        self.decoder: Decoder = self.add_child("decoder", build_decoder(rng, image_shape, spec.latent_dim, spec.decoder_spec()))

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"model expects N×{self.image_shape}, got {x.shape}")

    def encode(self, x: Tensor | np.ndarray) -> PosteriorParams:
        if self.encoder is None:
            raise ShapeError("model has no latent code")
        t = x if isinstance(x, Tensor) else constant(x)
        self._check(t)
        return self.encoder(t)

    def elbo_terms(self, x: Tensor | np.ndarray, rng: np.random.Generator, keep_path: bool = False) -> ElboTerms:
        t = x if isinstance(x, Tensor) else constant(x)
        self._check(t)
        n = t.shape[0]
        if self.encoder is None or self.prior is None:
            recon, clamped = decode_logprob(self.decoder, t, None)
            zero = constant(np.zeros(n))
            return ElboTerms(recon=recon, log_q=zero, log_p=zero, kl_units=None, clamp_events=clamped)

        params = self.encoder(t)
        eta = rng.standard_normal(params.mean.shape)
        z, log_q_units = _posterior_units(params, None, eta)
        log_u_units, ld_units = log_prior_units(self.prior, z)
        # KL_j = log q(z_j) - log u(ε_j) - log|dε_j/dz_j|; Σ_j KL_j = log q - log p
        kl_units = ops.sub(log_q_units, ops.add(log_u_units, ld_units))
        recon, clamped = decode_logprob(self.decoder, t, z)
        log_q = ops.sum(log_q_units, axes=1)
        log_p = ops.add(ops.sum(log_u_units, axes=1), ops.sum(ld_units, axes=1))
        path = None
        if keep_path:
            path = SamplePath(mean=params.mean.data, log_std=params.log_std.data, eta=eta, recon=recon.data)
        return ElboTerms(recon=recon, log_q=log_q, log_p=log_p, kl_units=kl_units, clamp_events=clamped, path=path)

    def elbo(self, x: Tensor | np.ndarray, rng: np.random.Generator) -> ElboBreakdown:
        return ElboBreakdown.from_terms(self.elbo_terms(x, rng))

    def sample_latent(self, rng: np.random.Generator, n: int) -> np.ndarray | None:
        if self.prior is None:
            return None
        z, _ = af_forward(self.prior, self.prior.noise.sample(rng, n))
        return z.data

    def generate(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """ε ~ u, z = f(ε), then ancestral sampling of the decoder."""
        return self.decoder.sample(rng, n, self.sample_latent(rng, n))

    def reconstruct_lossy(self, x: Tensor | np.ndarray, rng: np.random.Generator, z: np.ndarray | None = None) -> np.ndarray:
        """z ~ q(z|x), x' ~ p(x|z); pass ``z`` to reuse one code for several decompressions."""
        t = x if isinstance(x, Tensor) else constant(x)
        if z is None:
            z = self.encode_sample(t, rng)
        return self.decoder.sample(rng, t.shape[0], z)

    def encode_sample(self, x: Tensor | np.ndarray, rng: np.random.Generator) -> np.ndarray | None:
        if self.encoder is None:
            return None
        z, _ = sample_posterior(self.encode(x), rng)
        return z.data
