import json
import logging
import os
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Any

import typer
from pydantic import BaseModel, ValidationError

from vlae_lab.adapters.fs.checkpoint_store import FsUnitOfWork
from vlae_lab.adapters.fs.dataset_store import FsDatasetStore
from vlae_lab.adapters.fs.metrics_csv import CsvMetricsSink
from vlae_lab.adapters.fs.run_dir import FsArtifactStore, FsGridWriter, RunDir
from vlae_lab.application.config import ConfigError, parse_overrides
from vlae_lab.application.dto import (
    CompareKInput,
    DataCheckInput,
    EvalInput,
    ReconstructInput,
    RfCheckInput,
    SampleInput,
    TrainInput,
    WeightsKind,
)
from vlae_lab.application.use_cases.diagnostics import CompareKUseCase, DataCheckUseCase
from vlae_lab.application.use_cases.evaluate import EvaluateUseCase
from vlae_lab.application.use_cases.rf_check import RfCheckUseCase
from vlae_lab.application.use_cases.sample import ReconstructUseCase, SampleUseCase
from vlae_lab.application.use_cases.train import TrainUseCase
from vlae_lab.domain.errors import (
    ArgumentError,
    CausalityError,
    DomainError,
    DomainValueError,
    FlowError,
    NumericError,
)

logger = logging.getLogger(__name__)

EXIT_CAUSALITY = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

app = typer.Typer(no_args_is_help=True, add_completion=False, help="Variational lossy autoencoder lab.")


@app.callback()
def configure() -> None:
    logging.basicConfig(
        level=os.environ.get("VLAE_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def num_workers() -> int:
    raw = os.environ.get("VLAE_NUM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"VLAE_NUM_THREADS must be an integer, got {raw!r}")


##################################
# use case factories
##################################

def get_train_uc(out: Path) -> TrainUseCase:
    run = RunDir(out)
    return TrainUseCase(
        uow=FsUnitOfWork(run.ckpt),
        metrics=CsvMetricsSink(run.metrics),
        datasets=FsDatasetStore(),
        artifacts=FsArtifactStore(run.root),
    )


def get_evaluate_uc(out: Path) -> EvaluateUseCase:
    run = RunDir(out)
    return EvaluateUseCase(uow=FsUnitOfWork(run.ckpt), datasets=FsDatasetStore(), artifacts=FsArtifactStore(run.root))


def get_sample_uc(out: Path, fmt: str) -> SampleUseCase:
    run = RunDir(out)
    return SampleUseCase(uow=FsUnitOfWork(run.ckpt), artifacts=FsArtifactStore(run.root), grids=FsGridWriter(run.grids, fmt))


def get_reconstruct_uc(out: Path, fmt: str) -> ReconstructUseCase:
    run = RunDir(out)
    return ReconstructUseCase(
        uow=FsUnitOfWork(run.ckpt),
        datasets=FsDatasetStore(),
        artifacts=FsArtifactStore(run.root),
        grids=FsGridWriter(run.grids, fmt),
    )


def get_rf_check_uc() -> RfCheckUseCase:
    return RfCheckUseCase()


def get_compare_k_uc(out: Path) -> CompareKUseCase:
    run = RunDir(out)
    return CompareKUseCase(uow=FsUnitOfWork(run.ckpt), datasets=FsDatasetStore(), artifacts=FsArtifactStore(run.root))


def get_data_check_uc() -> DataCheckUseCase:
    return DataCheckUseCase(datasets=FsDatasetStore())


##################################
# helpers
##################################

def _fail(code: int, message: str) -> None:
    typer.echo(f"error: {message}", err=True)
    raise typer.Exit(code)


@contextmanager
def exit_codes() -> Iterator[None]:
    """Map domain failures onto exit codes 1 (causality), 2 (config/data), 3 (numeric)."""
    try:
        yield
    except CausalityError as e:
        _fail(EXIT_CAUSALITY, str(e))
    except ArgumentError as e:
        _fail(EXIT_CONFIG, str(e))
    except (NumericError, FlowError, DomainValueError) as e:
        _fail(EXIT_NUMERIC, str(e))
    except ValidationError as e:
        _fail(EXIT_CONFIG, f"invalid config: {e}")
    except (DomainError, OSError) as e:
        _fail(EXIT_CONFIG, str(e))


def _emit(report: BaseModel) -> None:
    typer.echo(json.dumps(report.model_dump(mode="json"), indent=2))


def _read_config(path: Path | None) -> str:
    return path.read_text() if path else ""


def _overrides(sets: list[str] | None, **flags: Any) -> dict[str, Any]:
    out = parse_overrides(sets or [])
    for key, value in flags.items():
        if value is not None:
            out[key] = value
    return out


ConfigOpt = Annotated[Path | None, typer.Option("--config", help="TOML file with dotted keys")]
SetOpt = Annotated[list[str] | None, typer.Option("--set", help="override as section.key=value")]
OutOpt = Annotated[Path, typer.Option("--out", help="run directory")]
SeedOpt = Annotated[int | None, typer.Option("--seed")]
WeightsOpt = Annotated[WeightsKind, typer.Option("--weights")]
FormatOpt = Annotated[str, typer.Option("--format", help="pgm or png")]


##################################
# commands
##################################

@app.command()
def train(
    config: ConfigOpt = None,
    set_: SetOpt = None,
    out: OutOpt = Path("run"),
    seed: SeedOpt = None,
    steps: Annotated[int | None, typer.Option("--steps")] = None,
    k: Annotated[int | None, typer.Option("--k")] = None,
    device: Annotated[str | None, typer.Option("--device")] = None,
    fresh: Annotated[bool, typer.Option("--fresh", help="ignore an existing checkpoint")] = False,
) -> None:
    with exit_codes():
        overrides = _overrides(set_, **{"run.seed": seed, "run.steps": steps, "run.k": k, "run.device": device})
        uc = get_train_uc(out)
        result = uc.execute(TrainInput(config=_read_config(config), overrides=overrides, resume=not fresh))
        _emit(result)


@app.command("eval")
def evaluate(
    out: OutOpt = Path("run"),
    k: Annotated[int | None, typer.Option("--k")] = None,
    seed: SeedOpt = None,
    split: Annotated[str, typer.Option("--split")] = "test",
    weights: WeightsOpt = WeightsKind.POLYAK,
    limit: Annotated[int, typer.Option("--limit", help="evaluate the first N images only")] = 0,
) -> None:
    with exit_codes():
        uc = get_evaluate_uc(out)
        report = uc.execute(EvalInput(k=k, seed=seed, split=split, weights=weights, limit=limit, workers=num_workers()))
        _emit(report)


@app.command()
def sample(
    out: OutOpt = Path("run"),
    n: Annotated[int, typer.Option("--n")] = 16,
    seed: Annotated[int, typer.Option("--seed")] = 0,
    cols: Annotated[int, typer.Option("--cols")] = 8,
    weights: WeightsOpt = WeightsKind.POLYAK,
    fmt: FormatOpt = "pgm",
) -> None:
    with exit_codes():
        uc = get_sample_uc(out, fmt)
        _emit(uc.execute(SampleInput(n=n, seed=seed, cols=cols, weights=weights)))


@app.command()
def reconstruct(
    out: OutOpt = Path("run"),
    n_images: Annotated[int, typer.Option("--n-images")] = 8,
    n_variants: Annotated[int, typer.Option("--n-variants")] = 4,
    seed: Annotated[int, typer.Option("--seed")] = 0,
    split: Annotated[str, typer.Option("--split")] = "test",
    weights: WeightsOpt = WeightsKind.POLYAK,
    fmt: FormatOpt = "pgm",
) -> None:
    with exit_codes():
        uc = get_reconstruct_uc(out, fmt)
        _emit(uc.execute(ReconstructInput(n_images=n_images, n_variants=n_variants, seed=seed, split=split, weights=weights)))


@app.command("rf-check")
def rf_check(
    config: ConfigOpt = None,
    set_: SetOpt = None,
    seed: Annotated[int, typer.Option("--seed")] = 0,
    channels: Annotated[int, typer.Option("--channels")] = 1,
    height: Annotated[int, typer.Option("--height")] = 8,
    width: Annotated[int, typer.Option("--width")] = 8,
) -> None:
    with exit_codes():
        uc = get_rf_check_uc()
        result = uc.execute(
            RfCheckInput(
                config=_read_config(config),
                overrides=_overrides(set_),
                channels=channels,
                grid_height=height,
                grid_width=width,
                seed=seed,
            )
        )
        _emit(result)
        if not result.report.passed:
            i, j = result.report.violations[0]
            raise CausalityError(f"output pixel {i} depends on input pixel {j} outside the {result.window} window")


@app.command("compare-k")
def compare_k(
    out: OutOpt = Path("run"),
    k_small: Annotated[int, typer.Option("--k-small")] = 1,
    k_large: Annotated[int, typer.Option("--k-large")] = 256,
    seed: SeedOpt = None,
    split: Annotated[str, typer.Option("--split")] = "test",
    weights: WeightsOpt = WeightsKind.POLYAK,
    limit: Annotated[int, typer.Option("--limit")] = 0,
) -> None:
    with exit_codes():
        uc = get_compare_k_uc(out)
        _emit(
            uc.execute(
                CompareKInput(
                    k_small=k_small,
                    k_large=k_large,
                    seed=seed,
                    split=split,
                    weights=weights,
                    limit=limit,
                    workers=num_workers(),
                )
            )
        )


@app.command("data-check")
def data_check(
    config: ConfigOpt = None,
    set_: SetOpt = None,
    patch: Annotated[int, typer.Option("--patch")] = 2,
) -> None:
    with exit_codes():
        uc = get_data_check_uc()
        _emit(uc.execute(DataCheckInput(config=_read_config(config), overrides=_overrides(set_), patch=patch)))
