from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import logsumexp
from scipy.stats import binomtest

from vlae_lab.domain.errors import ArgumentError, NumericError, StateSpaceTooLargeError
from vlae_lab.domain.flows import log_prior
from vlae_lab.domain.model import Vlae, decode_logprob, sample_posterior
from vlae_lab.domain.networks import Decoder

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)
MAX_ENUM_PIXELS = 12


##################################
# Unit conversions
##################################

def nats_to_bits(nats: float) -> float:
    return nats / LN2


def bits_to_nats(bits: float) -> float:
    return bits * LN2


def bits_per_dim(nll_nats: float, n_dims: int) -> float:
    if n_dims < 1:
        raise ArgumentError("n_dims must be >= 1")
    return nll_nats / (n_dims * LN2)


##################################
# Importance-sampled NLL
##################################

class NllEstimate(BaseModel):
    value: float
    k: int
    std_error: float
    model_config = ConfigDict(frozen=True)

    @field_validator("k")
    @classmethod
    def check_k(cls, v: int) -> int:
        if v < 1:
            raise ValueError("k must be >= 1")
        return v

    @field_validator("value")
    @classmethod
    def check_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("value must be finite")
        return v

    @property
    def bits(self) -> float:
        return nats_to_bits(self.value)


def log_weights(model: Vlae, x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """log p(x, z_i) - log q(z_i|x) for k posterior draws of one image (x is C×H×W)."""
    image = x[None]
    if model.encoder is None or model.prior is None:
        recon, _ = decode_logprob(model.decoder, image, None)
        return np.full(k, recon.data[0])
    params = model.encode(image)
    eta = rng.standard_normal((k, model.latent_dim))
    mean = np.repeat(params.mean.data, k, axis=0)
    log_std = np.repeat(params.log_std.data, k, axis=0)
    z = mean + np.exp(log_std) * eta
    log_q = np.sum(-0.5 * math.log(2 * math.pi) - log_std - 0.5 * eta**2, axis=1)
    log_p = log_prior(model.prior, z).data
    recon, _ = decode_logprob(model.decoder, np.repeat(image, k, axis=0), z)
    weights = recon.data + log_p - log_q
    bad = np.flatnonzero(~np.isfinite(weights))
    if bad.size:
        raise NumericError(f"non-finite importance weight at sample {int(bad[0])}")
    return weights


def _image_nll(lw: np.ndarray) -> tuple[float, float]:
    k = lw.size
    value = -(logsumexp(lw) - math.log(k))
    if k == 1:
        return float(value), 0.0
    # デルタ法: 正規化した重みの分散から log 平均の標準誤差
    ratio = np.exp(lw - logsumexp(lw)) * k
    return float(value), float(math.sqrt(np.var(ratio, ddof=1) / k))


def is_nll(
    model: Vlae,
    x: np.ndarray,
    k: int,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    workers: int = 1,
) -> NllEstimate:
    """Mean importance-sampled -log p(x) over the images of ``x`` (N×C×H×W).

    With ``seed`` each image i draws from ``default_rng([seed, i])`` so results
    do not depend on the worker count; otherwise one shared stream ``rng`` is
    consumed in image order.
    """
    if k < 1:
        raise ArgumentError("k must be >= 1")
    per_image = per_image_nll(model, x, k, rng=rng, seed=seed, workers=workers)
    values = np.array([v for v, _ in per_image])
    errors = np.array([e for _, e in per_image])
    return NllEstimate(
        value=float(values.mean()),
        k=k,
        std_error=float(np.sqrt(np.sum(errors**2)) / len(values)),
    )


def per_image_nll(
    model: Vlae,
    x: np.ndarray,
    k: int,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    workers: int = 1,
) -> list[tuple[float, float]]:
    if seed is None and rng is None:
        raise ArgumentError("is_nll needs an rng or a seed")
    if seed is None:
        return [_image_nll(log_weights(model, img, k, rng)) for img in x]

    def one(i: int) -> tuple[float, float]:
        return _image_nll(log_weights(model, x[i], k, np.random.default_rng([seed, i])))

    return _fan_out(one, len(x), workers)


def _fan_out(fn: Callable[[int], tuple[float, float]], n: int, workers: int) -> list[tuple[float, float]]:
    if workers <= 1:
        return [fn(i) for i in range(n)]
    # map は入力順で結果を返すので集計順は固定
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


##################################
# Bits-back accounting
##################################

class BitsBackReport(BaseModel):
    naive_len: float = Field(description="mean -log p(z) - log p(x|z), nats")
    bitsback_len: float = Field(description="mean log q - log p(z) - log p(x|z), nats")
    savings: float
    kl_usage: float
    mean_elbo: float
    per_image_naive: list[float] = Field(default_factory=list)
    per_image_bitsback: list[float] = Field(default_factory=list)
    model_config = ConfigDict(frozen=True)

    @property
    def kl_usage_bits(self) -> float:
        return nats_to_bits(self.kl_usage)


def _single_draw(model: Vlae, x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(log p(x|z), log p(z), log q(z|x)) for one posterior draw per image."""
    n = x.shape[0]
    if model.encoder is None or model.prior is None:
        recon, _ = decode_logprob(model.decoder, x, None)
        return recon.data, np.zeros(n), np.zeros(n)
    z, log_q = sample_posterior(model.encode(x), rng)
    log_p = log_prior(model.prior, z)
    recon, _ = decode_logprob(model.decoder, x, z)
    return recon.data, log_p.data, log_q.data


def bitsback_accounting(model: Vlae, dataset: np.ndarray, rng: np.random.Generator, batch_size: int = 64) -> BitsBackReport:
    if len(dataset) == 0:
        raise ArgumentError("bits-back accounting needs a nonempty dataset")
    recon, log_p, log_q = (np.concatenate(parts) for parts in zip(
        *(_single_draw(model, dataset[i:i + batch_size], rng) for i in range(0, len(dataset), batch_size))
    ))
    naive = -log_p - recon
    bitsback = log_q - log_p - recon
    elbo = recon + log_p - log_q
    return BitsBackReport(
        naive_len=float(naive.mean()),
        bitsback_len=float(bitsback.mean()),
        savings=float((naive - bitsback).mean()),
        kl_usage=float((log_q - log_p).mean()),
        mean_elbo=float(elbo.mean()),
        per_image_naive=naive.tolist(),
        per_image_bitsback=bitsback.tolist(),
    )


class KlUsage(BaseModel):
    nats: float
    bits: float
    decoder: str
    n_mc: int
    model_config = ConfigDict(frozen=True)


def kl_usage_meter(model: Vlae, dataset: np.ndarray, n_mc: int, rng: np.random.Generator, batch_size: int = 64) -> KlUsage:
    """MC mean of log q(z|x) - log p(z) per image."""
    if n_mc < 1:
        raise ArgumentError("n_mc must be >= 1")
    totals = []
    for _ in range(n_mc):
        for i in range(0, len(dataset), batch_size):
            _, log_p, log_q = _single_draw(model, dataset[i:i + batch_size], rng)
            totals.append(log_q - log_p)
    nats = float(np.concatenate(totals).mean()) if totals else 0.0
    return KlUsage(nats=nats, bits=nats_to_bits(nats), decoder=model.decoder.kind.value, n_mc=n_mc)


##################################
# Enumeration oracle
##################################

def enumerate_model_mass(decoder: Decoder, z: np.ndarray | None, image_shape: tuple[int, int, int]) -> float:
    """Σ_x exp(log p(x|z)) over every binary image of ``image_shape``."""
    n_pixels = int(np.prod(image_shape))
    if n_pixels > MAX_ENUM_PIXELS:
        raise StateSpaceTooLargeError(f"{n_pixels} pixels exceeds the {MAX_ENUM_PIXELS}-pixel enumeration limit")
    states = np.array(list(itertools.product((0.0, 1.0), repeat=n_pixels))).reshape((-1,) + tuple(image_shape))
    latent = None
    if z is not None and decoder.latent_dim > 0:
        latent = np.repeat(np.atleast_2d(z), len(states), axis=0)
    log_mass, _ = decode_logprob(decoder, states, latent)
    return float(np.exp(logsumexp(log_mass.data)))


##################################
# Paired comparison
##################################

class SignTest(BaseModel):
    wins: int
    trials: int
    p_value: float
    model_config = ConfigDict(frozen=True)


def paired_sign_test(smaller: np.ndarray, larger: np.ndarray) -> SignTest:
    """One-sided sign test that ``smaller`` tends to be below ``larger``; ties are dropped."""
    diff = np.asarray(larger) - np.asarray(smaller)
    wins = int(np.sum(diff > 0))
    trials = int(np.sum(diff != 0))
    if trials == 0:
        return SignTest(wins=0, trials=0, p_value=1.0)
    result = binomtest(wins, trials, 0.5, alternative="greater")
    return SignTest(wins=wins, trials=trials, p_value=float(result.pvalue))
