import logging

import numpy as np

from vlae_lab.application.config import load_config
from vlae_lab.application.dto import EvalInput, EvalReport
from vlae_lab.application.ports import ArtifactStore, DatasetStore, UnitOfWork
from vlae_lab.application.use_cases.common import build_dataset, load_checkpoint, pick_split, restore_model
from vlae_lab.application.use_cases.train import CONFIG_NAME
from vlae_lab.domain.estimators import bits_per_dim, bitsback_accounting, is_nll, kl_usage_meter, nats_to_bits

logger = logging.getLogger(__name__)


class EvaluateUseCase:
    def __init__(self, uow: UnitOfWork, datasets: DatasetStore, artifacts: ArtifactStore):
        self.uow = uow
        self.datasets = datasets
        self.artifacts = artifacts

    def execute(self, input: EvalInput) -> EvalReport:
        config = load_config(self.artifacts.read_text(CONFIG_NAME))
        checkpoint = load_checkpoint(self.uow, input.weights)
        dataset = pick_split(build_dataset(config, self.datasets), input.split)
        model = restore_model(config, checkpoint, dataset.image_shape)

        images = dataset.images[: input.limit] if input.limit else dataset.images
        k = input.k or config.run.k
        seed = config.run.seed if input.seed is None else input.seed
        logger.info("evaluating %d %s images, k=%d, %s weights", len(images), input.split, k, input.weights.value)

        nll = is_nll(model, images, k, seed=seed, workers=input.workers)
        bitsback = bitsback_accounting(model, images, np.random.default_rng([seed, 1]))
        usage = kl_usage_meter(model, images, config.run.n_mc, np.random.default_rng([seed, 2]))
        report = EvalReport(
            weights=input.weights,
            split=input.split,
            n_images=len(images),
            k=k,
            nll_nats=nll.value,
            nll_std_error=nll.std_error,
            nll_bits=nll.bits,
            bits_per_dim=bits_per_dim(nll.value, int(np.prod(model.image_shape))),
            kl_usage_nats=usage.nats,
            kl_usage_bits=usage.bits,
            naive_len_nats=bitsback.naive_len,
            bitsback_len_nats=bitsback.bitsback_len,
            savings_nats=bitsback.savings,
            mean_elbo_nats=bitsback.mean_elbo,
            decoder=usage.decoder,
        )
        row = report.model_dump(mode="json")
        self.artifacts.write_text(
            f"eval-{input.weights.value}-{input.split}.csv",
            ",".join(row) + "\n" + ",".join(str(v) for v in row.values()) + "\n",
        )
        if abs(report.bitsback_len_nats + report.mean_elbo_nats) > 1e-8:
            logger.warning("bits-back length deviates from -ELBO by %.3e", report.bitsback_len_nats + report.mean_elbo_nats)
        logger.debug("kl usage %.3f nats = %.3f bits", usage.nats, nats_to_bits(usage.nats))
        return report
