import numpy as np

from vlae_lab.application.config import load_config
from vlae_lab.application.dto import GridOutput, ReconstructInput, SampleInput
from vlae_lab.application.ports import ArtifactStore, DatasetStore, GridWriter, UnitOfWork
from vlae_lab.application.use_cases.common import (
    build_dataset,
    load_checkpoint,
    make_grid,
    pick_split,
    restore_model,
)
from vlae_lab.application.use_cases.train import CONFIG_NAME


class SampleUseCase:
    def __init__(self, uow: UnitOfWork, artifacts: ArtifactStore, grids: GridWriter):
        self.uow = uow
        self.artifacts = artifacts
        self.grids = grids

    def execute(self, input: SampleInput) -> GridOutput:
        config = load_config(self.artifacts.read_text(CONFIG_NAME))
        model = restore_model(config, load_checkpoint(self.uow, input.weights))
        images = model.generate(np.random.default_rng(input.seed), input.n)
        grid = make_grid(images, input.cols)
        path = self.grids.write(grid, input.name)
        return GridOutput(path=str(path), height=grid.shape[0], width=grid.shape[1])


class ReconstructUseCase:
    """Originals in the first column, then ``n_variants`` decompressions sharing one z."""

    def __init__(self, uow: UnitOfWork, datasets: DatasetStore, artifacts: ArtifactStore, grids: GridWriter):
        self.uow = uow
        self.datasets = datasets
        self.artifacts = artifacts
        self.grids = grids

    def execute(self, input: ReconstructInput) -> GridOutput:
        config = load_config(self.artifacts.read_text(CONFIG_NAME))
        dataset = pick_split(build_dataset(config, self.datasets), input.split)
        model = restore_model(config, load_checkpoint(self.uow, input.weights), dataset.image_shape)
        rng = np.random.default_rng(input.seed)
        rows = []
        for original in dataset.images[: input.n_images]:
            x = original[None]
            z = model.encode_sample(x, rng)
            rows.append(x)
            rows.extend(model.reconstruct_lossy(x, rng, z) for _ in range(input.n_variants))
        grid = make_grid(np.concatenate(rows), cols=1 + input.n_variants)
        path = self.grids.write(grid, input.name)
        return GridOutput(path=str(path), height=grid.shape[0], width=grid.shape[1])
