from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np

from vlae_lab.application.dto import Checkpoint, CheckpointSlot, MetricsRow
from vlae_lab.domain.data import Dataset


class CheckpointStore(ABC):
    @abstractmethod
    def add(self, checkpoint: Checkpoint) -> None: ...

    @abstractmethod
    def get(self, slot: CheckpointSlot) -> Checkpoint | None: ...


class UnitOfWork(ABC):
    @abstractmethod
    def __enter__(self) -> "UnitOfWork": ...

    @abstractmethod
    def __exit__(self, exc_type, exc_value, traceback) -> None: ...

    @property
    @abstractmethod
    def checkpoints(self) -> CheckpointStore: ...

    @abstractmethod
    def commit(self) -> None: ...

    @abstractmethod
    def rollback(self) -> None: ...


class MetricsSink(ABC):
    @abstractmethod
    def append(self, row: MetricsRow) -> None: ...

    @abstractmethod
    def truncate_after(self, step: int) -> None: ...

    @abstractmethod
    def rows(self) -> list[MetricsRow]: ...


class DatasetStore(ABC):
    @abstractmethod
    def load_idx(self, path: str, expect: str = "images") -> np.ndarray: ...

    @abstractmethod
    def load_amat(self, path: str, height: int, width: int) -> np.ndarray: ...

    @abstractmethod
    def load_raw_grid(self, path: str) -> np.ndarray: ...

    @abstractmethod
    def save(self, dataset: Dataset, path: str) -> None: ...

    @abstractmethod
    def load(self, path: str) -> Dataset: ...


class ArtifactStore(ABC):
    @abstractmethod
    def write_text(self, name: str, text: str) -> Path: ...

    @abstractmethod
    def read_text(self, name: str) -> str: ...

    @abstractmethod
    def exists(self, name: str) -> bool: ...


class GridWriter(ABC):
    @abstractmethod
    def write(self, grid: np.ndarray, name: str) -> Path: ...
