import math

import numpy as np
import pytest

from vlae_lab.domain.errors import FlowError, ShapeError
from vlae_lab.domain.flows import (
    FlowMode,
    FlowStack,
    af_forward,
    af_inverse,
    elbo_equivalence,
    log_prior,
)
from vlae_lab.domain.model import Vlae
from vlae_lab.domain.ndiff import jacobian


def _stack(rng, dim=4, steps=2, mode=FlowMode.AFFINE, scale=0.3):
    stack = FlowStack(rng, dim, steps, hidden=8, mode=mode)
    if scale:
        stack.randomize(rng, scale)
    return stack


def test_fresh_affine_stack_is_identity(rng):
    stack = _stack(rng, scale=0.0)
    eps = rng.standard_normal((5, 4))
    z, ld = af_forward(stack, eps)
    assert np.allclose(z.data, eps, rtol=0.0, atol=1e-12)
    assert np.allclose(ld.data, 0.0, atol=1e-10)


def test_mean_only_log_det_is_zero(rng):
    stack = _stack(rng, mode=FlowMode.MEAN_ONLY)
    _, ld = af_forward(stack, rng.standard_normal((3, 4)))
    assert np.all(ld.data == 0.0)
    _, ld = af_inverse(stack, rng.standard_normal((3, 4)))
    assert np.all(ld.data == 0.0)


def test_affine_log_det_matches_jacobian(rng):
    stack = _stack(rng)
    eps = rng.standard_normal((1, 4))
    jac = jacobian(lambda e: af_forward(stack, e)[0], eps).reshape(4, 4)
    _, logabsdet = np.linalg.slogdet(jac)
    _, ld = af_forward(stack, eps)
    assert ld.item() == pytest.approx(logabsdet, abs=1e-6)


def test_forward_inverse_round_trip(rng):
    stack = _stack(rng)
    eps = rng.standard_normal((6, 4))
    z, ld_forward = af_forward(stack, eps)
    eps_again, ld_inverse = af_inverse(stack, z)
    assert np.allclose(eps_again.data, eps, rtol=0.0, atol=1e-6)
    assert np.allclose(ld_forward.data + ld_inverse.data, 0.0, atol=1e-8)


@pytest.mark.parametrize("mode", [FlowMode.AFFINE, FlowMode.MEAN_ONLY])
def test_wide_stack_round_trip(mode):
    rng = np.random.default_rng(21)
    stack = FlowStack(rng, 32, 4, hidden=64, mode=mode)
    stack.randomize(rng, 0.1)
    eps = rng.standard_normal((16, 32))
    z, ld_forward = af_forward(stack, eps)
    eps_again, ld_inverse = af_inverse(stack, z)
    assert np.max(np.abs(eps_again.data - eps)) < 1e-6
    assert np.allclose(ld_forward.data + ld_inverse.data, 0.0, atol=1e-6)


def test_alternating_orderings():
    stack = FlowStack(np.random.default_rng(0), 3, 3, hidden=4)
    assert [entry["ordering"] for entry in stack.manifest()] == ["forward", "reversed", "forward"]


def test_empty_stack_is_standard_normal():
    stack = FlowStack(np.random.default_rng(0), 2, 0)
    assert log_prior(stack, np.zeros((1, 2))).item() == pytest.approx(-math.log(2 * math.pi))


def test_prior_density_integrates_to_one(rng):
    stack = _stack(rng, dim=3, scale=0.1)
    axis = np.linspace(-6.0, 6.0, 61)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    volume = (axis[1] - axis[0]) ** 3
    mass = float(np.exp(log_prior(stack, grid).data).sum() * volume)
    assert mass == pytest.approx(1.0, abs=1e-2)


def test_flow_input_checks(rng):
    stack = _stack(rng, dim=2)
    with pytest.raises(ShapeError):
        af_inverse(stack, np.zeros((1, 3)))
    with pytest.raises(FlowError):
        af_inverse(stack, np.array([[np.nan, 0.0]]))


#################################
# AF prior / IAF posterior
#################################

def _equivalence_gap(model: Vlae, images: np.ndarray, rng) -> float:
    model.prior.randomize(rng, 0.3)
    terms = model.elbo_terms(images, rng, keep_path=True)
    via_prior, via_posterior = elbo_equivalence(model.prior, terms.path)
    assert np.allclose(via_prior, terms.elbo.data, atol=1e-8)
    return float(np.max(np.abs(via_prior - via_posterior)))


def test_mean_only_prior_equals_iaf_posterior(small_spec, image_shape, images, rng):
    model = Vlae(np.random.default_rng(0), image_shape, small_spec)
    assert _equivalence_gap(model, images, rng) < 1e-10


def test_affine_prior_equals_iaf_posterior(small_spec, image_shape, images, rng):
    spec = small_spec.model_copy(update={"flow_mode": FlowMode.AFFINE})
    model = Vlae(np.random.default_rng(0), image_shape, spec)
    assert _equivalence_gap(model, images, rng) < 1e-8


def test_identity_flow_gives_gaussian_prior(small_spec, image_shape, images, rng):
    spec = small_spec.model_copy(update={"flow_steps": 0})
    model = Vlae(np.random.default_rng(0), image_shape, spec)
    terms = model.elbo_terms(images, rng, keep_path=True)
    z = terms.path.z
    expected = np.sum(-0.5 * math.log(2 * math.pi) - 0.5 * z**2, axis=1)
    assert np.allclose(terms.log_p.data, expected, atol=1e-10)
