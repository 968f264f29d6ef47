import json

import numpy as np
import pytest

from vlae_lab.adapters.fs.checkpoint_store import FsUnitOfWork
from vlae_lab.adapters.fs.dataset_store import FsDatasetStore
from vlae_lab.adapters.fs.metrics_csv import CsvMetricsSink
from vlae_lab.adapters.fs.run_dir import FsArtifactStore, FsGridWriter
from vlae_lab.application.dto import Checkpoint, CheckpointSlot, MetricsRow
from vlae_lab.domain.data import Binarization, Split, binarize
from vlae_lab.domain.errors import CheckpointError, DataFormatError


def _checkpoint(step: int, slot: CheckpointSlot = CheckpointSlot.LATEST) -> Checkpoint:
    rng = np.random.default_rng(step)
    return Checkpoint(
        slot=slot,
        step=step,
        config="run.seed = 0\n",
        gamma=0.5,
        kl_ema=1.0 / 3.0,
        optimizer_t=step,
        image_shape=(1, 6, 6),
        flows=[{"step": 0, "mode": "mean_only", "ordering": "forward"}],
        params={"decoder.head.kernel": rng.standard_normal((1, 4, 1, 1)), "prior.step0.made.l1.w": rng.standard_normal((4, 8))},
        shadows={"decoder.head.kernel": rng.standard_normal((1, 4, 1, 1))},
        moments={"m.decoder.head.kernel": rng.standard_normal((1, 4, 1, 1))},
    )


#################################
# Checkpoints
#################################

def test_commit_makes_checkpoint_visible(tmp_path):
    uow = FsUnitOfWork(tmp_path / "ckpt")
    original = _checkpoint(5)
    with uow:
        uow.checkpoints.add(original)
        assert uow.checkpoints.get(CheckpointSlot.LATEST) is None
        uow.commit()
    with uow:
        loaded = uow.checkpoints.get(CheckpointSlot.LATEST)
    assert loaded is not None
    assert (loaded.step, loaded.gamma, loaded.kl_ema, loaded.optimizer_t) == (5, 0.5, 1.0 / 3.0, 5)
    assert loaded.image_shape == (1, 6, 6)
    assert loaded.flows == original.flows
    for group in ("params", "shadows", "moments"):
        stored = getattr(loaded, group)
        assert stored.keys() == getattr(original, group).keys()
        assert all(np.array_equal(stored[k], getattr(original, group)[k]) for k in stored)
    assert not (tmp_path / "ckpt" / ".staging").exists()


def test_commit_replaces_previous_slot(tmp_path):
    uow = FsUnitOfWork(tmp_path / "ckpt")
    for step in (5, 10):
        with uow:
            uow.checkpoints.add(_checkpoint(step))
            uow.commit()
    with uow:
        assert uow.checkpoints.get(CheckpointSlot.LATEST).step == 10
    assert sorted(p.name for p in (tmp_path / "ckpt").iterdir()) == ["latest"]


def test_failure_inside_unit_of_work_rolls_back(tmp_path):
    uow = FsUnitOfWork(tmp_path / "ckpt")
    with uow:
        uow.checkpoints.add(_checkpoint(5))
        uow.commit()
    with pytest.raises(RuntimeError):
        with uow:
            uow.checkpoints.add(_checkpoint(10))
            raise RuntimeError("interrupted")
    with uow:
        assert uow.checkpoints.get(CheckpointSlot.LATEST).step == 5


def test_uncommitted_work_is_discarded(tmp_path):
    uow = FsUnitOfWork(tmp_path / "ckpt")
    with uow:
        uow.checkpoints.add(_checkpoint(5, CheckpointSlot.POLYAK))
        uow.rollback()
        uow.commit()
    with uow:
        assert uow.checkpoints.get(CheckpointSlot.POLYAK) is None


def test_corrupt_tensor_file_is_reported(tmp_path):
    uow = FsUnitOfWork(tmp_path / "ckpt")
    with uow:
        uow.checkpoints.add(_checkpoint(5))
        uow.commit()
    (tmp_path / "ckpt" / "latest" / "params.decoder.head.kernel.ndt").write_bytes(b"NDT1")
    with uow:
        with pytest.raises(CheckpointError):
            uow.checkpoints.get(CheckpointSlot.LATEST)


#################################
# Metrics
#################################

def _row(step: int) -> MetricsRow:
    return MetricsRow(step=step, recon_nats=-1.5, kl_nats=0.25, elbo_nats=-1.75, gamma=1.0, grad_norm=2.0, wallclock_s=0.1)


def test_metrics_append_and_truncate(tmp_path):
    sink = CsvMetricsSink(tmp_path / "metrics.csv")
    for step in range(1, 6):
        sink.append(_row(step))
    assert [r.step for r in sink.rows()] == [1, 2, 3, 4, 5]
    assert sink.rows()[0] == _row(1)
    sink.truncate_after(3)
    sink.append(_row(4))
    assert [r.step for r in sink.rows()] == [1, 2, 3, 4]
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,recon_nats,kl_nats,elbo_nats,gamma,grad_norm,wallclock_s"


#################################
# Datasets
#################################

def test_dataset_save_and_load(tmp_path):
    store = FsDatasetStore()
    dataset = binarize(
        np.random.default_rng(0).uniform(size=(5, 1, 4, 4)),
        Binarization.DYNAMIC,
        rng=np.random.default_rng(1),
        provenance="unit",
        split=Split.VALID,
    ).model_copy(update={"labels": np.arange(5)})
    store.save(dataset, str(tmp_path / "ds"))
    loaded = store.load(str(tmp_path / "ds"))
    assert np.array_equal(loaded.images, dataset.images)
    assert np.array_equal(loaded.intensities, dataset.intensities)
    assert loaded.labels.tolist() == [0, 1, 2, 3, 4]
    assert (loaded.split, loaded.binarization, loaded.provenance) == (Split.VALID, Binarization.DYNAMIC, "unit;dynamic")


def test_dataset_shape_mismatch(tmp_path):
    store = FsDatasetStore()
    dataset = binarize(np.zeros((2, 3, 3)), Binarization.STATIC)
    store.save(dataset, str(tmp_path / "ds"))
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    manifest["shape"] = [3, 1, 3, 3]
    (tmp_path / "ds" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataFormatError):
        store.load(str(tmp_path / "ds"))


def test_raw_grid_needs_sidecar(tmp_path):
    store = FsDatasetStore()
    path = tmp_path / "grid.bin"
    path.write_bytes(bytes([0, 1, 1, 0, 1, 1, 1, 1]))
    with pytest.raises(DataFormatError):
        store.load_raw_grid(str(path))
    (tmp_path / "grid.bin.json").write_text(json.dumps({"count": 2, "height": 2, "width": 2}))
    assert store.load_raw_grid(str(path)).shape == (2, 1, 2, 2)


#################################
# Run directory
#################################

def test_artifact_store(tmp_path):
    store = FsArtifactStore(tmp_path / "run")
    store.write_text("config.resolved", "a = 1\n")
    store.write_text("config.resolved", "a = 2\n")
    assert store.read_text("config.resolved") == "a = 2\n"
    assert store.exists("config.resolved")
    assert not store.exists("metrics.csv")
    assert sorted(p.name for p in (tmp_path / "run").iterdir()) == ["config.resolved"]


def test_pgm_grid(tmp_path):
    grid = np.array([[0.0, 1.0, 0.5], [1.0, 0.0, 0.0]])
    path = FsGridWriter(tmp_path, "pgm").write(grid, "samples")
    blob = path.read_bytes()
    assert path.name == "samples.pgm"
    assert blob.startswith(b"P5\n3 2\n255\n")
    assert list(blob[len(b"P5\n3 2\n255\n"):]) == [0, 255, 128, 255, 0, 0]


def test_ppm_grid(tmp_path):
    path = FsGridWriter(tmp_path).write(np.ones((2, 2, 3)), "rgb")
    assert path.name == "rgb.ppm"
    assert path.read_bytes().startswith(b"P6\n2 2\n255\n")


def test_unknown_grid_format(tmp_path):
    with pytest.raises(DataFormatError):
        FsGridWriter(tmp_path, "jpg")
