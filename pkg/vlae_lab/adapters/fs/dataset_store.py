import json
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from vlae_lab.application.ports import DatasetStore
from vlae_lab.domain.data import Binarization, Dataset, Split, parse_amat, parse_idx, parse_raw_grid
from vlae_lab.domain.errors import DataFormatError
from vlae_lab.domain.ndiff.codec import decode_tensor, encode_tensor


class RawGridManifest(BaseModel):
    count: int
    channels: int = 1
    height: int
    width: int
    model_config = ConfigDict(extra="forbid")


class DatasetManifest(BaseModel):
    split: Split
    binarization: Binarization
    provenance: str
    shape: tuple[int, ...]
    intensities: bool = False
    labels: bool = False
    model_config = ConfigDict(extra="forbid")


class FsDatasetStore(DatasetStore):
    def load_idx(self, path: str, expect: str = "images") -> np.ndarray:
        return parse_idx(Path(path).read_bytes(), expect)

    def load_amat(self, path: str, height: int, width: int) -> np.ndarray:
        return parse_amat(Path(path).read_text(), height, width)

    def load_raw_grid(self, path: str) -> np.ndarray:
        """``path`` holds the bytes; ``path + '.json'`` the shape manifest."""
        sidecar = Path(f"{path}.json")
        try:
            manifest = RawGridManifest.model_validate_json(sidecar.read_text())
        except (OSError, ValidationError) as e:
            raise DataFormatError(f"raw grid manifest {sidecar}: {e}") from e
        return parse_raw_grid(Path(path).read_bytes(), manifest.count, manifest.channels, manifest.height, manifest.width)

    def save(self, dataset: Dataset, path: str) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        manifest = DatasetManifest(
            split=dataset.split,
            binarization=dataset.binarization,
            provenance=dataset.provenance,
            shape=dataset.images.shape,
            intensities=dataset.intensities is not None,
            labels=dataset.labels is not None,
        )
        (root / "images.ndt").write_bytes(encode_tensor(dataset.images))
        if dataset.intensities is not None:
            (root / "intensities.ndt").write_bytes(encode_tensor(dataset.intensities))
        if dataset.labels is not None:
            (root / "labels.ndt").write_bytes(encode_tensor(np.asarray(dataset.labels, dtype=np.int64)))
        (root / "manifest.json").write_text(json.dumps(manifest.model_dump(mode="json"), indent=2))

    def load(self, path: str) -> Dataset:
        root = Path(path)
        try:
            manifest = DatasetManifest.model_validate_json((root / "manifest.json").read_text())
        except (OSError, ValidationError) as e:
            raise DataFormatError(f"dataset manifest under {root}: {e}") from e
        images = decode_tensor((root / "images.ndt").read_bytes())
        if images.shape != manifest.shape:
            raise DataFormatError(f"images have shape {images.shape}, manifest says {manifest.shape}")
        return Dataset(
            images=images,
            split=manifest.split,
            binarization=manifest.binarization,
            provenance=manifest.provenance,
            intensities=decode_tensor((root / "intensities.ndt").read_bytes()) if manifest.intensities else None,
            labels=decode_tensor((root / "labels.ndt").read_bytes()) if manifest.labels else None,
        )
