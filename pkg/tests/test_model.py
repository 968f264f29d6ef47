import math

import numpy as np
import pytest
from pydantic import ValidationError

from vlae_lab.domain.errors import ShapeError
from vlae_lab.domain.flows import FlowStack, log_prior
from vlae_lab.domain.model import ElboBreakdown, ModelSpec, Vlae, sample_posterior
from vlae_lab.domain.ndiff import Tape, constant, jacobian, ops, variable
from vlae_lab.domain.networks import (
    LOG_STD_MIN,
    DecoderKind,
    FactorizedDecoder,
    PosteriorParams,
    bernoulli_log_mass,
)


def test_fresh_encoder_is_standard_normal(small_model, images):
    params = small_model.encode(images)
    assert params.mean.shape == (8, 4)
    assert np.all(params.mean.data == 0.0)
    assert np.all(params.log_std.data == 0.0)


def test_encoder_treats_images_independently(small_model, images, rng):
    small_model.encoder.randomize(rng, 0.2)
    jac = jacobian(lambda x: small_model.encoder(x).mean, images[:2])
    # jac[n, d, m, ...] = d mean[n, d] / d x[m, ...]
    assert not np.any(jac[0, :, 1])
    assert not np.any(jac[1, :, 0])
    assert np.any(jac[0, :, 0])


def test_encoder_rejects_wrong_shape(small_model):
    with pytest.raises(ShapeError):
        small_model.encode(np.zeros((2, 1, 5, 5)))


def test_log_std_is_clamped(small_model, images):
    head = small_model.encoder.head.parameters()["b"]
    head.assign(np.concatenate([np.zeros(4), np.full(4, -100.0)]))
    params = small_model.encode(images)
    assert np.all(params.log_std.data == LOG_STD_MIN)
    z, _ = sample_posterior(params, np.random.default_rng(0))
    assert np.allclose(z.data, params.mean.data, atol=math.exp(LOG_STD_MIN) * 6)


def test_posterior_density_at_mean():
    params = PosteriorParams(mean=constant(np.ones((1, 3))), log_std=constant(np.full((1, 3), 0.5)))
    z, log_q = sample_posterior(params, eta=np.zeros((1, 3)))
    assert np.array_equal(z.data, np.ones((1, 3)))
    assert log_q.item() == pytest.approx(-1.5 * math.log(2 * math.pi) - 1.5)


def test_bernoulli_half_on_mnist_sized_image(rng):
    x = (rng.uniform(size=(1, 1, 28, 28)) < 0.5).astype(np.float64)
    log_mass, clamped = bernoulli_log_mass(x, constant(np.zeros(x.shape)))
    assert log_mass.item() == pytest.approx(-784 * math.log(2.0), abs=1e-9)
    assert log_mass.item() == pytest.approx(-543.43, abs=5e-3)
    assert clamped == 0


def test_bernoulli_confident_logits_are_clamped(rng):
    x = (rng.uniform(size=(1, 1, 28, 28)) < 0.5).astype(np.float64)
    log_mass, clamped = bernoulli_log_mass(x, constant(20.0 * (2.0 * x - 1.0)))
    assert -1e-3 < log_mass.item() <= 0.0
    assert clamped == 784


def test_kl_vanishes_when_posterior_is_prior(small_spec, image_shape, images, rng):
    spec = small_spec.model_copy(update={"flow_steps": 0})
    model = Vlae(np.random.default_rng(0), image_shape, spec)
    terms = model.elbo_terms(images, rng)
    assert np.all(np.abs(terms.kl.data) < 1e-12)
    assert np.all(np.abs(terms.kl_units.data) < 1e-12)


def test_unconditional_model_has_no_kl(small_spec, image_shape, images, rng):
    spec = small_spec.model_copy(update={"latent_dim": 0})
    model = Vlae(np.random.default_rng(0), image_shape, spec)
    terms = model.elbo_terms(images, rng)
    assert terms.kl_units is None
    assert np.all(terms.kl.data == 0.0)
    assert np.array_equal(terms.elbo.data, terms.recon.data)
    assert model.sample_latent(rng, 3) is None


def test_factorized_decoder_needs_latent():
    with pytest.raises(ValidationError):
        ModelSpec(latent_dim=0, decoder_kind=DecoderKind.FACTORIZED)


def test_kl_units_sum_to_kl(small_model, images, rng):
    small_model.randomize(rng, 0.1)
    terms = small_model.elbo_terms(images, rng)
    assert np.allclose(terms.kl_units.data.sum(axis=1), terms.kl.data, atol=1e-10)


def test_breakdown_uses_lambda_alias(small_model, images, rng):
    breakdown = ElboBreakdown.from_terms(small_model.elbo_terms(images, rng), lam=0.25)
    dumped = breakdown.model_dump(by_alias=True)
    assert dumped["lambda"] == 0.25
    assert dumped["elbo"] == pytest.approx(dumped["recon"] - dumped["kl"])


def test_generate_and_reconstruct_shapes(small_model, images, rng):
    small_model.randomize(rng, 0.1)
    samples = small_model.generate(rng, 3)
    assert samples.shape == (3, 1, 6, 6)
    assert set(np.unique(samples)) <= {0.0, 1.0}
    lossy = small_model.reconstruct_lossy(images[:2], rng)
    assert lossy.shape == (2, 1, 6, 6)


def test_factorized_half_model_samples_fair_coins():
    decoder = FactorizedDecoder(np.random.default_rng(0), (1, 6, 6), 2, hidden=8)
    samples = decoder.sample(np.random.default_rng(1), 100, np.zeros((100, 2)))
    assert samples.mean() == pytest.approx(0.5, abs=0.02)


#################################
# Gradients
#################################

def test_elbo_gradients_match_finite_differences(small_model, images):
    small_model.randomize(np.random.default_rng(2), 0.1)
    batch = images[:4]

    def mean_elbo() -> float:
        return float(np.mean(small_model.elbo_terms(batch, np.random.default_rng(5)).elbo.data))

    params = small_model.parameters()
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        tape.backward(ops.mean(small_model.elbo_terms(batch, np.random.default_rng(5)).elbo))

    eps = 1e-5
    for name, p in params.items():
        for idx in {0, p.value.size - 1}:
            base = p.value.copy()
            bumped = base.copy()
            bumped.flat[idx] += eps
            p.assign(bumped)
            up = mean_elbo()
            bumped.flat[idx] -= 2 * eps
            p.assign(bumped)
            down = mean_elbo()
            p.assign(base)
            assert p.grad.flat[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-7), name


def test_reparameterized_sample_gradients():
    n = 200_000
    mu = np.array([0.5, -1.0, 0.2])
    sigma = np.array([0.5, 1.2, 0.8])
    eta = np.random.default_rng(0).standard_normal((n, 3))
    with Tape() as tape:
        mean = variable(np.tile(mu, (n, 1)))
        log_std = variable(np.tile(np.log(sigma), (n, 1)))
        z, _ = sample_posterior(PosteriorParams(mean=mean, log_std=log_std), eta=eta)
        (g_sum,) = tape.gradient(ops.sum(z), [mean])
        g_mean, g_log_std = tape.gradient(ops.mean(ops.sum(ops.square(z), axes=1)), [mean, log_std])

    assert np.all(g_sum == 1.0)
    # d E|z|^2 / dμ = 2μ, d E|z|^2 / dσ = 2σ
    np.testing.assert_allclose(g_mean.sum(axis=0), 2 * mu, atol=0.03)
    np.testing.assert_allclose(g_log_std.sum(axis=0) / sigma, 2 * sigma, atol=0.05)


def test_monte_carlo_kl_matches_closed_form():
    n = 200_000
    mu = np.array([0.5, -1.0, 0.2, 1.5])
    sigma = np.array([0.5, 1.2, 0.8, 0.3])
    params = PosteriorParams(mean=constant(np.tile(mu, (n, 1))), log_std=constant(np.tile(np.log(sigma), (n, 1))))
    z, log_q = sample_posterior(params, np.random.default_rng(0))
    standard = FlowStack(np.random.default_rng(0), 4, 0)
    estimate = float(np.mean(log_q.data - log_prior(standard, z).data))
    exact = 0.5 * float(np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma)))
    assert exact == pytest.approx(2.918, abs=1e-3)
    assert estimate == pytest.approx(exact, rel=0.01)
