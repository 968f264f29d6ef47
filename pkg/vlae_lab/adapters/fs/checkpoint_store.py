import logging
import os
import shutil
from pathlib import Path

from pydantic import BaseModel, ConfigDict

from vlae_lab.application.dto import Checkpoint, CheckpointSlot
from vlae_lab.application.ports import CheckpointStore, UnitOfWork
from vlae_lab.domain.errors import CheckpointError, DataFormatError
from vlae_lab.domain.ndiff.codec import decode_tensor, encode_tensor

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class CheckpointManifest(BaseModel):
    slot: CheckpointSlot
    step: int
    config: str
    gamma: float
    kl_ema: float | None
    optimizer_t: int
    optimizer_moments: bool
    image_shape: tuple[int, int, int]
    flows: list[dict[str, str | int]]
    params: list[str]
    shadows: list[str]
    moments: list[str]
    model_config = ConfigDict(extra="forbid")


_GROUPS = ("params", "shadows", "moments")


class FsCheckpointStore(CheckpointStore):
    """Reads committed slots under ``root``; writes go to ``staging``."""

    def __init__(self, root: Path, staging: Path):
        self.root = root
        self.staging = staging
        self.pending: list[CheckpointSlot] = []

    def add(self, checkpoint: Checkpoint) -> None:
        target = self.staging / checkpoint.slot.value
        target.mkdir(parents=True, exist_ok=True)
        manifest = CheckpointManifest(
            slot=checkpoint.slot,
            step=checkpoint.step,
            config=checkpoint.config,
            gamma=checkpoint.gamma,
            kl_ema=checkpoint.kl_ema,
            optimizer_t=checkpoint.optimizer_t,
            optimizer_moments=checkpoint.has_moments,
            image_shape=checkpoint.image_shape,
            flows=checkpoint.flows,
            params=sorted(checkpoint.params),
            shadows=sorted(checkpoint.shadows),
            moments=sorted(checkpoint.moments),
        )
        for group in _GROUPS:
            for name, array in getattr(checkpoint, group).items():
                (target / f"{group}.{name}.ndt").write_bytes(encode_tensor(array))
        (target / MANIFEST).write_text(manifest.model_dump_json(indent=2))
        self.pending.append(checkpoint.slot)

    def get(self, slot: CheckpointSlot) -> Checkpoint | None:
        source = self.root / slot.value
        if not (source / MANIFEST).exists():
            return None
        manifest = CheckpointManifest.model_validate_json((source / MANIFEST).read_text())
        groups = {}
        try:
            for group in _GROUPS:
                groups[group] = {
                    name: decode_tensor((source / f"{group}.{name}.ndt").read_bytes())
                    for name in getattr(manifest, group)
                }
        except (OSError, DataFormatError) as e:
            raise CheckpointError(f"{slot.value} checkpoint is unreadable: {e}") from e
        return Checkpoint(
            slot=manifest.slot,
            step=manifest.step,
            config=manifest.config,
            gamma=manifest.gamma,
            kl_ema=manifest.kl_ema,
            optimizer_t=manifest.optimizer_t,
            image_shape=manifest.image_shape,
            flows=manifest.flows,
            **groups,
        )


# チェックポイント書き込みをステージングディレクトリで原子的に確定する
class FsUnitOfWork(UnitOfWork):
    def __init__(self, root: Path):
        self.root = Path(root)
        self._store: FsCheckpointStore | None = None

    @property
    def _staging(self) -> Path:
        return self.root / ".staging"

    def __enter__(self) -> "FsUnitOfWork":
        self.root.mkdir(parents=True, exist_ok=True)
        if self._staging.exists():
            shutil.rmtree(self._staging)
        self._staging.mkdir()
        self._store = FsCheckpointStore(self.root, self._staging)
        return self

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        try:
            if exc_type:
                self.rollback()
        finally:
            if self._staging.exists():
                shutil.rmtree(self._staging)
            self._store = None

    @property
    def checkpoints(self) -> CheckpointStore:
        assert self._store is not None, "UnitOfWork is not entered."
        return self._store

    def commit(self) -> None:
        assert self._store is not None, "UnitOfWork is not entered."
        for slot in self._store.pending:
            target = self.root / slot.value
            retired = self.root / f".retired-{slot.value}"
            if retired.exists():
                shutil.rmtree(retired)
            if target.exists():
                os.replace(target, retired)
            os.replace(self._staging / slot.value, target)
            if retired.exists():
                shutil.rmtree(retired)
        logger.debug("committed checkpoint slots %s", [s.value for s in self._store.pending])
        self._store.pending.clear()

    def rollback(self) -> None:
        assert self._store is not None, "UnitOfWork is not entered."
        if self._staging.exists():
            shutil.rmtree(self._staging)
        self._staging.mkdir()
        self._store.pending.clear()
