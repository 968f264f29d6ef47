from __future__ import annotations

import enum
import logging
from abc import ABC, abstractmethod

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import expit

from vlae_lab.domain.errors import ShapeError
from vlae_lab.domain.masks import (
    ConvMask,
    MaskKind,
    ReceptiveField,
    TwoStackLayout,
    as_rgb,
    build_conv_mask,
    channel_order_mask,
    grayscale,
    raster_stack,
    receptive_field_of,
)
from vlae_lab.domain.ndiff import ops
from vlae_lab.domain.ndiff.module import Dense, MaskedConv, Module
from vlae_lab.domain.ndiff.tensor import Tensor, constant

logger = logging.getLogger(__name__)

LOG_STD_MIN = -7.0
LOG_STD_MAX = 2.0
PROB_EPS = 1e-7
CONTEXT_CHANNELS = 4

ImageShape = tuple[int, int, int]


class DecoderKind(str, enum.Enum):
    FACTORIZED = "factorized"
    LOCAL = "local"
    GRAYSCALE_LOCAL = "grayscale_local"


class DecoderLayout(str, enum.Enum):
    RASTER = "raster"
    TWO_STACK = "two_stack"


class DecoderSpec(BaseModel):
    kind: DecoderKind = DecoderKind.LOCAL
    layout: DecoderLayout = DecoderLayout.RASTER
    layers: int = 6
    kernel: int = 3
    vertical_layers: int = 1
    horizontal_layers: int = 2
    channels: int = 32
    hidden: int = 128
    residual_blocks: bool = False
    tie_weights: bool = False
    first_mask: MaskKind = MaskKind.A
    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("layers", "vertical_layers", "horizontal_layers", "channels", "hidden")
    @classmethod
    def check_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("kernel")
    @classmethod
    def check_kernel(cls, v: int) -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError("kernel must be odd")
        return v

    @model_validator(mode="after")
    def check_first_mask(self) -> "DecoderSpec":
        if self.first_mask not in (MaskKind.A, MaskKind.B):
            raise ValueError("first_mask must be A or B")
        return self


##################################
# Encoder
##################################

class PosteriorParams(BaseModel):
    """Diagonal Gaussian q(z|x); log_std already clamped."""

    mean: Tensor
    log_std: Tensor
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @property
    def dim(self) -> int:
        return self.mean.shape[1]


def _full_mask(c_in: int, c_out: int, k: int) -> np.ndarray:
    return np.ones((c_out, c_in, k, k))


class Encoder(Module):
    """Two 3×3 convs, a dense layer, and a zero-initialized (μ, log σ) head."""

    def __init__(self, rng: np.random.Generator, image_shape: ImageShape, latent_dim: int, channels: int = 16, hidden: int = 128):
        super().__init__()
        c, h, w = image_shape
        self.image_shape = image_shape
        self.latent_dim = latent_dim
        self.conv1 = self.add_child("conv1", MaskedConv(rng, _full_mask(c, channels, 3)))
        self.conv2 = self.add_child("conv2", MaskedConv(rng, _full_mask(channels, channels, 3)))
        self.fc = self.add_child("fc", Dense(rng, channels * h * w, hidden))
        self.head = self.add_child("head", Dense(rng, hidden, 2 * latent_dim, zero_init=True))

    def __call__(self, x: Tensor) -> PosteriorParams:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"encoder expects N×{self.image_shape}, got {x.shape}")
        h = ops.elu(self.conv1(x))
        h = ops.elu(self.conv2(h))
        h = ops.elu(self.fc(ops.reshape(h, (x.shape[0], -1))))
        out = self.head(h)
        d = self.latent_dim
        log_std = ops.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)
        return PosteriorParams(mean=out[:, :d], log_std=log_std)


##################################
# Decoders
##################################

class Decoder(Module, ABC):
    kind: DecoderKind
    image_shape: ImageShape
    latent_dim: int

    @property
    @abstractmethod
    def receptive_field(self) -> ReceptiveField: ...

    @abstractmethod
    def base_logits(self, x: Tensor, z: Tensor | None = None) -> Tensor:
        """Per-pixel logits that may only read the window of each pixel."""

    def logits(self, x: Tensor, z: Tensor | None = None) -> Tensor:
        return self.base_logits(x, z)

    def _latent(self, n: int, z: Tensor | np.ndarray | None) -> Tensor | None:
        if self.latent_dim == 0:
            return None
        if z is None:
            return constant(np.zeros((n, self.latent_dim)))
        z = z if isinstance(z, Tensor) else constant(z)
        if z.shape != (n, self.latent_dim):
            raise ShapeError(f"decoder expects z of shape {(n, self.latent_dim)}, got {z.shape}")
        return z

    def _check_image(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"decoder expects N×{self.image_shape}, got {x.shape}")

    def sample(self, rng: np.random.Generator, n: int, z: Tensor | np.ndarray | None = None) -> np.ndarray:
        """Ancestral sampling in raster order (channels R→G→B within a pixel)."""
        c, h, w = self.image_shape
        buf = np.zeros((n, c, h, w))
        for row in range(h):
            for col in range(w):
                for ch in range(c):
                    logits = self.logits(constant(buf), self._latent(n, z)).data
                    p = expit(logits[:, ch, row, col])
                    buf[:, ch, row, col] = (rng.uniform(size=n) < p).astype(np.float64)
        return buf


class FactorizedDecoder(Decoder):
    """Independent Bernoulli pixels given z; the classic VAE decoder."""

    def __init__(self, rng: np.random.Generator, image_shape: ImageShape, latent_dim: int, hidden: int = 128):
        super().__init__()
        if latent_dim < 1:
            raise ShapeError("factorized decoder needs a latent code")
        self.kind = DecoderKind.FACTORIZED
        self.image_shape = image_shape
        self.latent_dim = latent_dim
        self.fc = self.add_child("fc", Dense(rng, latent_dim, hidden))
        self.head = self.add_child("head", Dense(rng, hidden, int(np.prod(image_shape)), zero_init=True))

    @property
    def receptive_field(self) -> ReceptiveField:
        return ReceptiveField.empty()

    def base_logits(self, x: Tensor, z: Tensor | None = None) -> Tensor:
        self._check_image(x)
        latent = self._latent(x.shape[0], z)
        out = self.head(ops.elu(self.fc(latent)))
        return ops.reshape(out, (x.shape[0],) + self.image_shape)

    def sample(self, rng: np.random.Generator, n: int, z: Tensor | np.ndarray | None = None) -> np.ndarray:
        c, h, w = self.image_shape
        logits = self.logits(constant(np.zeros((n, c, h, w))), self._latent(n, z)).data
        p = expit(logits)
        return (rng.uniform(size=p.shape) < p).astype(np.float64)


class LocalDecoder(Decoder):
    """Masked-conv decoder whose pixel i reads z and a small window of x_<i."""

    def __init__(self, rng: np.random.Generator, image_shape: ImageShape, latent_dim: int, spec: DecoderSpec):
        super().__init__()
        c, h, w = image_shape
        self.kind = spec.kind
        self.spec = spec
        self.image_shape = image_shape
        self.latent_dim = latent_dim
        self.gray = spec.kind is DecoderKind.GRAYSCALE_LOCAL
        win_c = 1 if self.gray else c
        ctx = CONTEXT_CHANNELS if latent_dim > 0 else 0
        c_in, ch, k = win_c + ctx, spec.channels, spec.kernel

        if ctx:
            self.context = self.add_child("context", Dense(rng, latent_dim, ctx * h * w))
        self.convs: list[MaskedConv] = []
        self.residuals: dict[int, MaskedConv] = {}

        if spec.layout is DecoderLayout.RASTER:
            stack = raster_stack(spec.layers, k)
            self._declared: list[ConvMask] | TwoStackLayout = stack
            first = build_conv_mask(spec.first_mask, k, k, c_in, ch, ctx)
            self.convs.append(self.add_child("conv0", MaskedConv(rng, first)))
            shared = None
            for i in range(1, spec.layers):
                conv = MaskedConv(rng, build_conv_mask(MaskKind.B, k, k, ch, ch), kernel=shared)
                if spec.tie_weights and shared is None:
                    shared = conv._params["kernel"]
                self.convs.append(self.add_child(f"conv{i}", conv))
            if spec.residual_blocks:
                ones = build_conv_mask(MaskKind.B, 1, 1, ch, ch)
                for i in range(1, spec.layers, 2):
                    self.residuals[i] = self.add_child(f"res{i}", MaskedConv(rng, ones))
        else:
            layout = TwoStackLayout.standard(spec.vertical_layers, spec.horizontal_layers, k)
            self._declared = layout
            first_h = MaskKind.HORIZONTAL_A if spec.first_mask is MaskKind.A else MaskKind.HORIZONTAL_B
            self.vertical = [self.add_child("v0", MaskedConv(rng, build_conv_mask(MaskKind.VERTICAL_FIRST, k, k, c_in, ch, ctx)))]
            for i in range(1, spec.vertical_layers):
                self.vertical.append(self.add_child(f"v{i}", MaskedConv(rng, build_conv_mask(MaskKind.VERTICAL, k, k, ch, ch))))
            self.link = self.add_child("link", MaskedConv(rng, build_conv_mask(MaskKind.LINK, k, k, ch, ch)))
            self.horizontal = [self.add_child("h0", MaskedConv(rng, build_conv_mask(first_h, k, k, c_in, ch, ctx)))]
            for i in range(1, spec.horizontal_layers):
                self.horizontal.append(self.add_child(f"h{i}", MaskedConv(rng, build_conv_mask(MaskKind.HORIZONTAL_B, k, k, ch, ch))))

        self.head = self.add_child("head", MaskedConv(rng, np.ones((c, ch, 1, 1)), zero_init=True))
        if c > 1:
            self.channel_head = self.add_child("channel_head", MaskedConv(rng, channel_order_mask(c), zero_init=True))
        self._field = receptive_field_of(self._declared)

    @property
    def receptive_field(self) -> ReceptiveField:
        return self._field

    def window_input(self, x: Tensor) -> Tensor:
        return grayscale(as_rgb(x)) if self.gray else x

    def base_logits(self, x: Tensor, z: Tensor | None = None) -> Tensor:
        self._check_image(x)
        n = x.shape[0]
        inp = self.window_input(x)
        latent = self._latent(n, z)
        if latent is not None:
            _, h, w = self.image_shape
            cond = ops.reshape(self.context(latent), (n, CONTEXT_CHANNELS, h, w))
            inp = ops.concat([inp, cond], axis=1)

        if self.spec.layout is DecoderLayout.RASTER:
            hidden = ops.elu(self.convs[0](inp))
            for i, conv in enumerate(self.convs[1:], start=1):
                hidden = ops.elu(conv(hidden))
                if i in self.residuals:
                    hidden = ops.add(hidden, self.residuals[i](ops.elu(hidden)))
        else:
            v = ops.elu(self.vertical[0](inp))
            for conv in self.vertical[1:]:
                v = ops.elu(conv(v))
            hidden = ops.elu(ops.add(self.horizontal[0](inp), self.link(v)))
            for conv in self.horizontal[1:]:
                hidden = ops.elu(conv(hidden))
        return self.head(hidden)

    def logits(self, x: Tensor, z: Tensor | None = None) -> Tensor:
        base = self.base_logits(x, z)
        if self.image_shape[0] == 1:
            return base
        return ops.add(base, self.channel_head(x))


def build_decoder(rng: np.random.Generator, image_shape: ImageShape, latent_dim: int, spec: DecoderSpec) -> Decoder:
    if spec.kind is DecoderKind.FACTORIZED:
        return FactorizedDecoder(rng, image_shape, latent_dim, spec.hidden)
    return LocalDecoder(rng, image_shape, latent_dim, spec)


##################################
# Bernoulli likelihood
##################################

def bernoulli_log_mass(x: Tensor | np.ndarray, logits: Tensor) -> tuple[Tensor, int]:
    """Σ_pixels log Bernoulli(x | sigmoid(logits)) per image, and the clamp count."""
    target = x if isinstance(x, Tensor) else constant(x)
    if target.shape != logits.shape:
        raise ShapeError(f"image {target.shape} and logits {logits.shape} differ")
    p = ops.sigmoid(logits)
    clamped = int(np.count_nonzero((p.data < PROB_EPS) | (p.data > 1.0 - PROB_EPS)))
    p = ops.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    log_mass = ops.add(
        ops.mul(target, ops.log(p)),
        ops.mul(1.0 - target, ops.log(1.0 - p)),
    )
    return ops.sum(log_mass, axes=tuple(range(1, log_mass.ndim))), clamped
