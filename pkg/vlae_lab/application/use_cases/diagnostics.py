import logging

import numpy as np

from vlae_lab.application.config import load_config
from vlae_lab.application.dto import CompareKInput, CompareKReport, DataCheckInput, DataCheckReport
from vlae_lab.application.ports import ArtifactStore, DatasetStore, UnitOfWork
from vlae_lab.application.use_cases.common import build_dataset, load_checkpoint, pick_split, restore_model
from vlae_lab.application.use_cases.train import CONFIG_NAME
from vlae_lab.domain.data import TEXTURE_OFFSETS, conditional_given_window, patch_codes, plugin_mutual_information
from vlae_lab.domain.errors import ArgumentError
from vlae_lab.domain.estimators import paired_sign_test, per_image_nll

logger = logging.getLogger(__name__)


class CompareKUseCase:
    """Per-image IS-NLL at two sample counts and a paired sign test between them."""

    def __init__(self, uow: UnitOfWork, datasets: DatasetStore, artifacts: ArtifactStore):
        self.uow = uow
        self.datasets = datasets
        self.artifacts = artifacts

    def execute(self, input: CompareKInput) -> CompareKReport:
        if not 1 <= input.k_small < input.k_large:
            raise ArgumentError(f"need 1 <= k_small < k_large, got {input.k_small} and {input.k_large}")
        config = load_config(self.artifacts.read_text(CONFIG_NAME))
        checkpoint = load_checkpoint(self.uow, input.weights)
        dataset = pick_split(build_dataset(config, self.datasets), input.split)
        model = restore_model(config, checkpoint, dataset.image_shape)

        images = dataset.images[: input.limit] if input.limit else dataset.images
        if len(images) == 0:
            raise ArgumentError(f"split {input.split} is empty")
        seed = config.run.seed if input.seed is None else input.seed
        logger.info("comparing k=%d and k=%d on %d %s images", input.k_small, input.k_large, len(images), input.split)

        small = np.array([v for v, _ in per_image_nll(model, images, input.k_small, seed=seed, workers=input.workers)])
        large = np.array([v for v, _ in per_image_nll(model, images, input.k_large, seed=seed, workers=input.workers)])
        test = paired_sign_test(large, small)
        return CompareKReport(
            split=input.split,
            n_images=len(images),
            k_small=input.k_small,
            k_large=input.k_large,
            nll_small_nats=float(small.mean()),
            nll_large_nats=float(large.mean()),
            wins=test.wins,
            trials=test.trials,
            p_value=test.p_value,
        )


class DataCheckUseCase:
    """Plug-in dependence statistics of the configured dataset."""

    def __init__(self, datasets: DatasetStore):
        self.datasets = datasets

    def execute(self, input: DataCheckInput) -> DataCheckReport:
        config = load_config(input.config, dict(input.overrides))
        train, _, _ = build_dataset(config, self.datasets)
        _, h, w = train.image_shape
        p = input.patch
        if p < 1 or 2 * p > min(h, w):
            raise ArgumentError(f"patch {p} does not fit twice into {h}x{w} images")
        if len(train) == 0:
            raise ArgumentError("training split is empty")

        images = train.images
        corner = patch_codes(images, slice(0, p), slice(0, p))
        near = patch_codes(images, slice(0, p), slice(p, 2 * p))
        far = patch_codes(images, slice(h - p, h), slice(w - p, w))

        # 中央ピクセルを左と上から予測
        window = sorted(TEXTURE_OFFSETS)
        conditional = conditional_given_window(images, h // 2, w // 2, window)
        report = DataCheckReport(
            provenance=train.provenance,
            n_images=len(train),
            near_mi_bits=plugin_mutual_information(corner, near),
            far_mi_bits=plugin_mutual_information(corner, far),
            window_predictability=max(abs(v - 0.5) for v in conditional.values()),
            window_conditional=conditional,
        )
        logger.info("near %.3f bits, far %.3f bits", report.near_mi_bits, report.far_mi_bits)
        return report
