from pathlib import Path

import numpy as np
import pytest

from vlae_lab.adapters.fs.checkpoint_store import FsUnitOfWork
from vlae_lab.adapters.fs.metrics_csv import CsvMetricsSink
from vlae_lab.adapters.fs.run_dir import RunDir
from vlae_lab.application.cli.typer.commands import (
    get_compare_k_uc,
    get_data_check_uc,
    get_evaluate_uc,
    get_reconstruct_uc,
    get_rf_check_uc,
    get_sample_uc,
    get_train_uc,
)
from vlae_lab.application.config import load_config
from vlae_lab.application.dto import (
    CheckpointSlot,
    CompareKInput,
    DataCheckInput,
    EvalInput,
    ReconstructInput,
    RfCheckInput,
    SampleInput,
    TrainInput,
    WeightsKind,
)
from vlae_lab.application.use_cases.common import make_grid
from vlae_lab.application.use_cases.train import CONFIG_NAME
from vlae_lab.domain.errors import ArgumentError, CheckpointError


def _latest(out):
    uow = FsUnitOfWork(RunDir(out).ckpt)
    with uow:
        return uow.checkpoints.get(CheckpointSlot.LATEST)


@pytest.fixture
def trained_run(tmp_path, small_overrides):
    out = tmp_path / "run"
    get_train_uc(out).execute(TrainInput(overrides=small_overrides))
    return out


def test_train_writes_run_directory(trained_run, small_overrides):
    run = RunDir(trained_run)
    rows = CsvMetricsSink(run.metrics).rows()
    assert [r.step for r in rows] == list(range(1, 11))
    assert all(np.isfinite(r.elbo_nats) for r in rows)
    assert load_config((trained_run / CONFIG_NAME).read_text()) == load_config("", small_overrides)
    latest = _latest(trained_run)
    assert latest.step == 10
    assert latest.has_moments
    assert latest.flows[0]["ordering"] == "forward"
    assert sorted(p.name for p in run.ckpt.iterdir()) == ["latest", "polyak"]


def test_resume_matches_uninterrupted_run(tmp_path, small_overrides):
    interrupted = tmp_path / "a"
    get_train_uc(interrupted).execute(TrainInput(overrides={**small_overrides, "run.steps": 5}))
    result = get_train_uc(interrupted).execute(TrainInput(overrides=small_overrides))
    assert (result.steps_run, result.final_step) == (5, 10)

    straight = tmp_path / "b"
    get_train_uc(straight).execute(TrainInput(overrides=small_overrides))

    resumed, reference = _latest(interrupted), _latest(straight)
    assert resumed.step == reference.step == 10
    assert resumed.gamma == reference.gamma
    assert resumed.kl_ema == reference.kl_ema
    for group in ("params", "shadows", "moments"):
        ours, theirs = getattr(resumed, group), getattr(reference, group)
        assert ours.keys() == theirs.keys()
        assert all(np.array_equal(ours[k], theirs[k]) for k in ours)
    assert [r.step for r in CsvMetricsSink(RunDir(interrupted).metrics).rows()] == list(range(1, 11))


def test_empty_training_split_is_rejected(tmp_path, small_overrides):
    overrides = {**small_overrides, "data.fractions": [0.0, 0.5, 0.5]}
    with pytest.raises(ArgumentError):
        get_train_uc(tmp_path / "run").execute(TrainInput(overrides=overrides))


def test_fresh_flag_ignores_checkpoint(trained_run, small_overrides):
    result = get_train_uc(trained_run).execute(TrainInput(overrides={**small_overrides, "run.steps": 5}, resume=False))
    assert result.steps_run == 5
    assert [r.step for r in CsvMetricsSink(RunDir(trained_run).metrics).rows()] == [1, 2, 3, 4, 5]


def test_evaluation_is_reproducible(trained_run):
    uc = get_evaluate_uc(trained_run)
    first = uc.execute(EvalInput(k=4))
    second = uc.execute(EvalInput(k=4))
    assert first == second
    assert first.n_images == 7
    assert first.nll_nats > 0
    assert abs(first.bitsback_len_nats + first.mean_elbo_nats) < 1e-10
    assert first.bits_per_dim == pytest.approx(first.nll_bits / 36)
    assert (trained_run / "eval-polyak-test.csv").exists()


def test_evaluation_of_raw_weights_with_workers(trained_run):
    uc = get_evaluate_uc(trained_run)
    serial = uc.execute(EvalInput(k=4, weights=WeightsKind.RAW, split="valid", limit=3))
    pooled = uc.execute(EvalInput(k=4, weights=WeightsKind.RAW, split="valid", limit=3, workers=2))
    assert serial.n_images == 3
    assert serial.nll_nats == pooled.nll_nats


def test_evaluation_without_checkpoint(tmp_path, small_overrides):
    out = tmp_path / "run"
    get_train_uc(out).execute(TrainInput(overrides={**small_overrides, "run.steps": 0}))
    with pytest.raises(CheckpointError):
        get_evaluate_uc(out).execute(EvalInput(k=2))


def test_sampling_is_seeded(trained_run):
    first = get_sample_uc(trained_run, "pgm").execute(SampleInput(n=4, seed=1, cols=2))
    blob = Path(first.path).read_bytes()
    second = get_sample_uc(trained_run, "pgm").execute(SampleInput(n=4, seed=1, cols=2))
    assert Path(second.path).read_bytes() == blob
    assert (first.height, first.width) == (13, 13)


def test_single_sample_has_no_padding(trained_run):
    out = get_sample_uc(trained_run, "pgm").execute(SampleInput(n=1, seed=0, name="one"))
    assert (out.height, out.width) == (6, 6)


def test_reconstruction_grid(trained_run):
    uc = get_reconstruct_uc(trained_run, "pgm")
    only_originals = uc.execute(ReconstructInput(n_images=3, n_variants=0))
    assert (only_originals.height, only_originals.width) == (20, 6)
    full = uc.execute(ReconstructInput(n_images=2, n_variants=2, split="train"))
    assert (full.height, full.width) == (13, 20)


def test_make_grid_layout():
    images = np.zeros((5, 1, 2, 3))
    grid = make_grid(images, cols=2, pad=1, pad_value=0.5)
    assert grid.shape == (3 * 3 - 1, 2 * 4 - 1)
    assert grid[2, 0] == 0.5
    rgb = make_grid(np.ones((2, 3, 2, 2)), cols=2)
    assert rgb.shape == (2, 5, 3)


def test_rf_check_default_decoder():
    result = get_rf_check_uc().execute(RfCheckInput())
    assert result.report.passed
    assert (result.window, result.left_extent) == ("13x6", 6)


def test_rf_check_two_stack_rgb():
    result = get_rf_check_uc().execute(
        RfCheckInput(
            overrides={"model.decoder_layout": "two_stack", "model.decoder_channels": 8, "model.latent_dim": 4},
            channels=3,
            grid_height=5,
            grid_width=5,
        )
    )
    assert result.report.passed
    assert result.window == "4x2"


def test_rf_check_catches_center_tap():
    result = get_rf_check_uc().execute(
        RfCheckInput(overrides={"model.first_mask": "B", "model.decoder_channels": 8}, grid_height=5, grid_width=5)
    )
    assert not result.report.passed
    assert result.report.violations[0] == (0, 0)


#################################
# Diagnostics
#################################

def test_compare_k_counts_images(trained_run):
    report = get_compare_k_uc(trained_run).execute(CompareKInput(k_small=1, k_large=8, limit=5, split="test"))
    assert report.n_images == 5
    assert report.wins <= report.trials <= 5
    # k=1 側は eval と同じ画像ごとの乱数列を使う
    single = get_evaluate_uc(trained_run).execute(EvalInput(k=1, limit=5))
    assert report.nll_small_nats == pytest.approx(single.nll_nats, rel=1e-12)


def test_compare_k_needs_increasing_counts(trained_run):
    with pytest.raises(ArgumentError):
        get_compare_k_uc(trained_run).execute(CompareKInput(k_small=4, k_large=4))


def test_texture_dependence_is_local():
    overrides = {"data.n_images": 2000, "data.fractions": [1.0, 0.0, 0.0]}
    report = get_data_check_uc().execute(DataCheckInput(overrides=overrides))
    assert report.near_mi_bits > report.far_mi_bits + 0.05
    assert report.window_predictability > 0.25


def test_shapes_dependence_is_long_range():
    overrides = {"data.n_images": 2000, "data.fractions": [1.0, 0.0, 0.0], "data.synth_kind": "long_range_shapes"}
    report = get_data_check_uc().execute(DataCheckInput(overrides=overrides))
    assert report.far_mi_bits > 0.5


def test_data_check_rejects_oversized_patch():
    with pytest.raises(ArgumentError):
        get_data_check_uc().execute(DataCheckInput(overrides={"data.height": 6, "data.width": 6}, patch=4))
