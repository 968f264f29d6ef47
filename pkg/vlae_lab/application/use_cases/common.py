"""Pieces shared by the use cases: dataset assembly and model <-> checkpoint."""
from __future__ import annotations

import logging

import numpy as np

from vlae_lab.application.config import DataSource, ExperimentConfig
from vlae_lab.application.dto import Checkpoint, CheckpointSlot, WeightsKind
from vlae_lab.application.ports import DatasetStore, UnitOfWork
from vlae_lab.domain.data import Binarization, Dataset, Split, binarize, split, synth
from vlae_lab.domain.errors import CheckpointError, ShapeError
from vlae_lab.domain.masks import ReceptiveField, TwoStackLayout, raster_stack, receptive_field_of
from vlae_lab.domain.model import ModelSpec, Vlae
from vlae_lab.domain.networks import DecoderKind, DecoderLayout
from vlae_lab.domain.objectives import FreeBitsState
from vlae_lab.domain.optim import Optimizer

logger = logging.getLogger(__name__)


def declared_window(spec: ModelSpec) -> ReceptiveField | None:
    if spec.decoder_kind is DecoderKind.FACTORIZED:
        return None
    if spec.decoder_layout is DecoderLayout.TWO_STACK:
        return receptive_field_of(TwoStackLayout.standard(spec.vertical_layers, spec.horizontal_layers, spec.decoder_kernel))
    return receptive_field_of(raster_stack(spec.decoder_layers, spec.decoder_kernel))


def _load_images(config: ExperimentConfig, store: DatasetStore) -> Dataset:
    data, seed = config.data, config.run.seed
    match data.source:
        case DataSource.SYNTH:
            return synth(data.synth_spec(seed), data.n_images, declared_window(config.model))
        case DataSource.STORE:
            return store.load(data.path)
        case DataSource.AMAT:
            images = store.load_amat(data.path, data.height, data.width)
            return binarize(images, Binarization.STATIC, prebinarized=images, provenance=data.path)
        case DataSource.RAW:
            return binarize(store.load_raw_grid(data.path), Binarization.STATIC, provenance=data.path)
        case DataSource.IDX:
            images = store.load_idx(data.path)
            prebinarized = None
            if data.prebinarized_path:
                if data.prebinarized_path.endswith(".amat"):
                    prebinarized = store.load_amat(data.prebinarized_path, images.shape[-2], images.shape[-1])
                else:
                    prebinarized = store.load_idx(data.prebinarized_path)
            rng = np.random.default_rng([seed, 7]) if data.binarization is Binarization.DYNAMIC else None
            return binarize(images, data.binarization, rng=rng, prebinarized=prebinarized, provenance=data.path)


def build_dataset(config: ExperimentConfig, store: DatasetStore) -> tuple[Dataset, Dataset, Dataset]:
    dataset = _load_images(config, store)
    if config.data.limit:
        dataset = dataset.subset(np.arange(min(config.data.limit, len(dataset))))
    logger.info("dataset %s: %d images of shape %s", dataset.provenance, len(dataset), dataset.image_shape)
    return split(dataset, config.data.fractions, config.run.seed)


def pick_split(parts: tuple[Dataset, Dataset, Dataset], name: str) -> Dataset:
    return {Split.TRAIN: parts[0], Split.VALID: parts[1], Split.TEST: parts[2]}[Split(name)]


def build_model(config: ExperimentConfig, image_shape: tuple[int, int, int]) -> Vlae:
    return Vlae(np.random.default_rng([config.run.seed, 0]), image_shape, config.model)


def checkpoints_of(
    model: Vlae,
    step: int,
    config_text: str,
    state: FreeBitsState,
    optimizer: Optimizer,
) -> tuple[Checkpoint, Checkpoint]:
    params = model.parameters()
    flows = model.prior.manifest() if model.prior is not None else []
    latest = Checkpoint(
        slot=CheckpointSlot.LATEST,
        step=step,
        config=config_text,
        gamma=state.gamma,
        kl_ema=state.kl_ema,
        optimizer_t=optimizer.t,
        image_shape=model.image_shape,
        flows=flows,
        params={k: p.value.copy() for k, p in params.items()},
        shadows={k: p.shadow.copy() for k, p in params.items()},
        moments=optimizer.state_arrays(),
    )
    polyak = Checkpoint(
        slot=CheckpointSlot.POLYAK,
        step=step,
        config=config_text,
        gamma=state.gamma,
        kl_ema=state.kl_ema,
        image_shape=model.image_shape,
        flows=flows,
        params={k: p.shadow.copy() for k, p in params.items()},
    )
    return latest, polyak


def load_checkpoint(uow: UnitOfWork, weights: WeightsKind) -> Checkpoint:
    slot = CheckpointSlot.POLYAK if weights is WeightsKind.POLYAK else CheckpointSlot.LATEST
    with uow:
        checkpoint = uow.checkpoints.get(slot)
    if checkpoint is None:
        raise CheckpointError(f"no {slot.value} checkpoint found")
    return checkpoint


def restore_model(config: ExperimentConfig, checkpoint: Checkpoint, expected_shape: tuple[int, int, int] | None = None) -> Vlae:
    if expected_shape is not None and tuple(expected_shape) != tuple(checkpoint.image_shape):
        raise ShapeError(f"checkpoint images are {checkpoint.image_shape}, dataset images are {expected_shape}")
    model = build_model(config, checkpoint.image_shape)
    model.load_arrays(checkpoint.params, checkpoint.shadows or None)
    return model


def make_grid(images: np.ndarray, cols: int, pad: int = 1, pad_value: float = 0.5) -> np.ndarray:
    """Tile N×C×H×W images row-major; padding only between cells."""
    n, c, h, w = images.shape
    if n == 0:
        raise ShapeError("cannot tile an empty image set")
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    grid = np.full((c, rows * (h + pad) - pad, cols * (w + pad) - pad), pad_value)
    for i, img in enumerate(images):
        r, col = divmod(i, cols)
        top, left = r * (h + pad), col * (w + pad)
        grid[:, top:top + h, left:left + w] = img
    return grid[0] if c == 1 else np.moveaxis(grid, 0, -1)
