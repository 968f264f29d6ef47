from __future__ import annotations

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict

from vlae_lab.domain.errors import FlowError, NumericError
from vlae_lab.domain.flows import elbo_equivalence
from vlae_lab.domain.model import ElboBreakdown, Vlae
from vlae_lab.domain.ndiff.tensor import Tape
from vlae_lab.domain.objectives import FreeBitsState, surrogate_objective
from vlae_lab.domain.optim import Optimizer

logger = logging.getLogger(__name__)

EQUIVALENCE_TOL = 1e-8


class StepMetrics(BaseModel):
    step: int
    recon_nats: float
    kl_nats: float
    elbo_nats: float
    objective: float
    gamma: float
    grad_norm: float
    clamp_events: int = 0
    model_config = ConfigDict(frozen=True)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def train_step(
    model: Vlae,
    batch: np.ndarray,
    optimizer: Optimizer,
    state: FreeBitsState,
    rng: np.random.Generator,
    step: int,
    polyak_alpha: float = 0.998,
    check_equivalence: bool = False,
) -> tuple[StepMetrics, FreeBitsState]:
    params = model.parameters()
    for param in params.values():
        param.zero_grad()
    n_data_dims = int(np.prod(model.image_shape))
    try:
        with Tape() as tape:
            terms = model.elbo_terms(batch, rng, keep_path=check_equivalence)
            loss = surrogate_objective(terms, state, n_data_dims)
            tape.backward(loss)
    except (NumericError, FlowError) as e:
        raise NumericError(f"training aborted: {e}", step=step) from e

    if check_equivalence and terms.path is not None and model.prior is not None:
        via_prior, via_posterior = elbo_equivalence(model.prior, terms.path)
        gap = float(np.max(np.abs(via_prior - via_posterior)))
        if gap >= EQUIVALENCE_TOL:
            raise FlowError(f"step {step}: AF prior and IAF posterior ELBOs differ by {gap:.3e}")

    grad_norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values())))
    if not np.isfinite(grad_norm):
        raise NumericError("non-finite gradient", step=step)

    optimizer.step(params)
    for param in params.values():
        param.update_shadow(polyak_alpha)

    breakdown = ElboBreakdown.from_terms(terms, objective=-loss.item(), gamma=state.gamma, lam=state.lam)
    new_state = state
    if terms.kl_units is not None:
        k = state.n_groups(terms.kl_units.shape[1])
        new_state = state.advance(breakdown.kl, k, n_data_dims)
        if new_state.gamma != state.gamma:
            logger.debug("step %d: gamma %.5f -> %.5f (kl ema %.4f)", step, state.gamma, new_state.gamma, new_state.kl_ema)
    metrics = StepMetrics(
        step=step,
        recon_nats=breakdown.recon,
        kl_nats=breakdown.kl,
        elbo_nats=breakdown.elbo,
        objective=breakdown.objective,
        gamma=state.gamma,
        grad_norm=grad_norm,
        clamp_events=breakdown.clamp_events,
    )
    return metrics, new_state
