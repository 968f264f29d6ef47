import logging
import os
from pathlib import Path

import numpy as np

from vlae_lab.application.ports import ArtifactStore, GridWriter
from vlae_lab.domain.errors import DataFormatError

logger = logging.getLogger(__name__)

GRID_FORMATS = ("pgm", "png")


class RunDir:
    """Fixed run layout: config.resolved, metrics.csv, ckpt/{latest,polyak}, grids/."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def ckpt(self) -> Path:
        return self.root / "ckpt"

    @property
    def grids(self) -> Path:
        return self.root / "grids"


class FsArtifactStore(ArtifactStore):
    def __init__(self, root: Path):
        self.root = Path(root)

    def write_text(self, name: str, text: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        target = self.root / name
        tmp = target.with_name(f".{target.name}.tmp")
        tmp.write_text(text)
        os.replace(tmp, target)
        return target

    def read_text(self, name: str) -> str:
        return (self.root / name).read_text()

    def exists(self, name: str) -> bool:
        return (self.root / name).exists()


def _to_bytes(grid: np.ndarray) -> np.ndarray:
    return np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)


class FsGridWriter(GridWriter):
    """Binary PGM (P5) for gray grids, PPM (P6) for RGB, PNG through matplotlib."""

    def __init__(self, root: Path, fmt: str = "pgm"):
        if fmt not in GRID_FORMATS:
            raise DataFormatError(f"unsupported grid format {fmt!r}, expected one of {GRID_FORMATS}")
        self.root = Path(root)
        self.fmt = fmt

    def write(self, grid: np.ndarray, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        if self.fmt == "png":
            return self._write_png(grid, name)
        pixels = _to_bytes(grid)
        height, width = pixels.shape[:2]
        magic, suffix = ("P5", "pgm") if pixels.ndim == 2 else ("P6", "ppm")
        path = self.root / f"{name}.{suffix}"
        path.write_bytes(f"{magic}\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
        logger.info("wrote %s (%dx%d)", path, width, height)
        return path

    def _write_png(self, grid: np.ndarray, name: str) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        from matplotlib import pyplot as plt

        path = self.root / f"{name}.png"
        if grid.ndim == 2:
            plt.imsave(path, grid, cmap="gray", vmin=0.0, vmax=1.0)
        else:
            plt.imsave(path, np.clip(grid, 0.0, 1.0))
        logger.info("wrote %s", path)
        return path
