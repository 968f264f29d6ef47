import logging
import time

import numpy as np

from vlae_lab.application.config import dump_config, load_config
from vlae_lab.application.dto import CheckpointSlot, MetricsRow, TrainInput, TrainOutput
from vlae_lab.application.ports import ArtifactStore, DatasetStore, MetricsSink, UnitOfWork
from vlae_lab.application.use_cases.common import build_dataset, build_model, checkpoints_of
from vlae_lab.domain.data import Dataset
from vlae_lab.domain.errors import ArgumentError
from vlae_lab.domain.optim import build_optimizer
from vlae_lab.domain.training import step_rng, train_step

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.resolved"


class TrainUseCase:
    def __init__(self, uow: UnitOfWork, metrics: MetricsSink, datasets: DatasetStore, artifacts: ArtifactStore):
        self.uow = uow
        self.metrics = metrics
        self.datasets = datasets
        self.artifacts = artifacts

    def execute(self, input: TrainInput) -> TrainOutput:
        config = load_config(input.config, dict(input.overrides))
        config_text = dump_config(config)
        train, _, _ = build_dataset(config, self.datasets)
        if len(train) == 0:
            raise ArgumentError("training split is empty; check data.fractions and data.n_images")
        model = build_model(config, train.image_shape)
        opt_cfg = config.optimizer
        optimizer = build_optimizer(opt_cfg.kind, opt_cfg.lr, (opt_cfg.beta1, opt_cfg.beta2))
        state = config.objective.initial_state()

        start = 0
        if input.resume:
            with self.uow:
                latest = self.uow.checkpoints.get(CheckpointSlot.LATEST)
            if latest is not None:
                model.load_arrays(latest.params, latest.shadows or None)
                optimizer.load_state(latest.moments, latest.optimizer_t)
                state = state.model_copy(update={"gamma": latest.gamma, "kl_ema": latest.kl_ema})
                start = latest.step
                logger.info("resuming from step %d", start)
        # 再開時はチェックポイント以降の行を捨てる
        self.metrics.truncate_after(start)
        self.artifacts.write_text(CONFIG_NAME, config_text)

        run = config.run
        clock = time.perf_counter()
        epoch_cache: dict[int, np.ndarray] = {}
        last: MetricsRow | None = None
        for step in range(start + 1, run.steps + 1):
            batch = self._batch(train, step, run.batch_size, run.seed, epoch_cache)
            metrics, state = train_step(
                model,
                batch,
                optimizer,
                state,
                step_rng(run.seed, step),
                step,
                polyak_alpha=opt_cfg.polyak_alpha,
                check_equivalence=run.check_equivalence,
            )
            last = MetricsRow(
                step=step,
                recon_nats=metrics.recon_nats,
                kl_nats=metrics.kl_nats,
                elbo_nats=metrics.elbo_nats,
                gamma=metrics.gamma,
                grad_norm=metrics.grad_norm,
                wallclock_s=time.perf_counter() - clock,
            )
            self.metrics.append(last)
            if step % run.log_every == 0:
                logger.info(
                    "step %d recon %.4f kl %.4f gamma %.4f grad-norm %.4f",
                    step, metrics.recon_nats, metrics.kl_nats, metrics.gamma, metrics.grad_norm,
                )
            if step % run.checkpoint_every == 0 or step == run.steps:
                with self.uow:
                    for checkpoint in checkpoints_of(model, step, config_text, state, optimizer):
                        self.uow.checkpoints.add(checkpoint)
                    self.uow.commit()
        return TrainOutput(steps_run=max(run.steps - start, 0), final_step=max(run.steps, start), last=last)

    @staticmethod
    def _batch(train: Dataset, step: int, batch_size: int, seed: int, cache: dict[int, np.ndarray]) -> np.ndarray:
        """Batch of one step, a pure function of (seed, step); dynamic data redraws per epoch."""
        n = len(train)
        epoch = (step - 1) * batch_size // n
        if epoch not in cache:
            cache.clear()
            cache[epoch] = train.epoch(epoch, seed)
        index = np.random.default_rng([seed, step, 1]).choice(n, size=min(batch_size, n), replace=False)
        return cache[epoch][np.sort(index)]
