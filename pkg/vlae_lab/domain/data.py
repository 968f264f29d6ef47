from __future__ import annotations

import enum
import logging
import struct
from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from vlae_lab.domain.errors import ArgumentError, DataFormatError, ShapeError
from vlae_lab.domain.masks import ReceptiveField

logger = logging.getLogger(__name__)


class Split(str, enum.Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


class Binarization(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"
    NONE = "none"


class Dataset(BaseModel):
    """N×C×H×W images in [0, 1].

    Dynamic datasets keep their grey-level ``intensities`` and redraw
    ``images`` once per epoch.
    """

    images: np.ndarray
    split: Split = Split.TRAIN
    binarization: Binarization = Binarization.NONE
    provenance: str = ""
    intensities: np.ndarray | None = None
    labels: np.ndarray | None = None
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("images")
    @classmethod
    def check_images(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim == 3:
            v = v[:, None]
        if v.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        return np.asarray(v, dtype=np.float64)

    @model_validator(mode="after")
    def check_binary(self) -> "Dataset":
        if self.binarization is not Binarization.NONE and not np.all((self.images == 0) | (self.images == 1)):
            raise ValueError("binarized images must be in {0, 1}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError("labels and images differ in length")
        return self

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        c, h, w = self.images.shape[1:]
        return int(c), int(h), int(w)

    def epoch(self, index: int, seed: int) -> np.ndarray:
        """Images for epoch ``index``; static data is returned unchanged."""
        if self.binarization is not Binarization.DYNAMIC or self.intensities is None:
            return self.images
        rng = np.random.default_rng([seed, index])
        return (rng.uniform(size=self.intensities.shape) < self.intensities).astype(np.float64)

    def subset(self, index: np.ndarray, split: Split | None = None) -> "Dataset":
        return self.model_copy(update={
            "images": self.images[index],
            "intensities": None if self.intensities is None else self.intensities[index],
            "labels": None if self.labels is None else self.labels[index],
            "split": split or self.split,
        })


##################################
# IDX
##################################

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
_MAX_ELEMENTS = 2**31


def parse_idx(blob: bytes, expect: str = "images") -> np.ndarray:
    """Decode an unsigned-byte IDX container; images come back scaled to [0, 1]."""
    if len(blob) < 4:
        raise DataFormatError("truncated header")
    (magic,) = struct.unpack_from(">I", blob, 0)
    wanted = IDX_IMAGES if expect == "images" else IDX_LABELS
    if magic != wanted:
        raise DataFormatError(f"magic mismatch: 0x{magic:08x}, expected 0x{wanted:08x}")
    rank = magic & 0xFF
    offset = 4 + 4 * rank
    if len(blob) < offset:
        raise DataFormatError("truncated header")
    dims = struct.unpack_from(f">{rank}I", blob, 4)
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise DataFormatError(f"dimension overflow: {dims}")
    if len(blob) - offset < count:
        raise DataFormatError(f"truncated payload: {len(blob) - offset} of {count} bytes")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=offset).reshape(dims)
    if expect == "images":
        return data.astype(np.float64) / 255.0
    return data.astype(np.int64)


def parse_amat(text: str, height: int, width: int) -> np.ndarray:
    """Whitespace-separated 0/1 rows, one image per line."""
    rows = [line.split() for line in text.splitlines() if line.strip()]
    try:
        data = np.array(rows, dtype=np.float64)
    except ValueError as e:
        raise DataFormatError(f"amat parse failure: {e}") from e
    if data.ndim != 2 or data.shape[1] != height * width:
        raise DataFormatError(f"amat rows have {data.shape[-1]} values, expected {height * width}")
    return data.reshape(-1, height, width)


def parse_raw_grid(blob: bytes, count: int, channels: int, height: int, width: int) -> np.ndarray:
    """Raw {0,1} bytes in N×C×H×W order."""
    expected = count * channels * height * width
    if len(blob) != expected:
        raise DataFormatError(f"raw grid has {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype=np.uint8).reshape(count, channels, height, width)
    if np.any(data > 1):
        raise DataFormatError("raw grid values must be 0 or 1")
    return data.astype(np.float64)


##################################
# Binarization
##################################

def binarize(
    images: np.ndarray,
    mode: Binarization | str,
    rng: np.random.Generator | None = None,
    prebinarized: np.ndarray | None = None,
    provenance: str = "",
    split: Split = Split.TRAIN,
) -> Dataset:
    mode = Binarization(mode)
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    if imgs.size and (imgs.min() < 0.0 or imgs.max() > 1.0):
        raise ArgumentError("binarize expects values in [0, 1]")
    match mode:
        case Binarization.NONE:
            return Dataset(images=imgs, split=split, provenance=provenance)
        case Binarization.STATIC:
            if prebinarized is not None:
                fixed = np.asarray(prebinarized, dtype=np.float64)
                return Dataset(
                    images=fixed if fixed.ndim == 4 else fixed[:, None],
                    split=split,
                    binarization=mode,
                    provenance=f"{provenance};prebinarized",
                )
            if not np.all((imgs == 0) | (imgs == 1)):
                logger.warning("no pre-binarized file; thresholding %s at 0.5", provenance or "images")
            return Dataset(
                images=(imgs >= 0.5).astype(np.float64),
                split=split,
                binarization=mode,
                provenance=f"{provenance};threshold-0.5",
            )
        case Binarization.DYNAMIC:
            if rng is None:
                raise ArgumentError("dynamic binarization needs an rng")
            draw = (rng.uniform(size=imgs.shape) < imgs).astype(np.float64)
            return Dataset(
                images=draw,
                split=split,
                binarization=mode,
                provenance=f"{provenance};dynamic",
                intensities=imgs,
            )


##################################
# Synthetic data
##################################

class SynthKind(str, enum.Enum):
    LOCAL_TEXTURE = "local_texture"
    LONG_RANGE_SHAPES = "long_range_shapes"


SHAPE_FEATURES = ("border", "diagonal", "disc", "anti_diagonal", "cross")

# 生成器が読むオフセット (左, 上)
TEXTURE_OFFSETS = frozenset({(0, -1), (-1, 0)})


class SynthSpec(BaseModel):
    kind: SynthKind = SynthKind.LOCAL_TEXTURE
    height: int = 12
    width: int = 12
    p_left: float = Field(default=0.35, description="copy the left neighbour")
    p_up: float = Field(default=0.35, description="copy the pixel above")
    n_shapes: int = 8
    noise: float = 0.02
    seed: int = 0
    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("height", "width")
    @classmethod
    def check_size(cls, v: int) -> int:
        if v < 2:
            raise ValueError("image extents must be >= 2")
        return v

    @field_validator("p_left", "p_up", "noise")
    @classmethod
    def check_probability(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("must be a probability")
        return v

    @field_validator("n_shapes")
    @classmethod
    def check_shapes(cls, v: int) -> int:
        if not 1 <= v <= 2 ** len(SHAPE_FEATURES):
            raise ValueError(f"n_shapes must be in [1, {2 ** len(SHAPE_FEATURES)}]")
        return v

    @model_validator(mode="after")
    def check_copy_mass(self) -> "SynthSpec":
        if self.p_left + self.p_up > 1.0 + 1e-12:
            raise ValueError("p_left + p_up must be <= 1")
        return self


def _feature(name: str, h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    match name:
        case "border":
            return (rows == 0) | (cols == 0) | (rows == h - 1) | (cols == w - 1)
        case "diagonal":
            return rows * (w - 1) == cols * (h - 1)
        case "anti_diagonal":
            return rows * (w - 1) == (w - 1 - cols) * (h - 1)
        case "disc":
            cy, cx = (h - 1) / 2, (w - 1) / 2
            return (rows - cy) ** 2 + (cols - cx) ** 2 <= (min(h, w) / 4) ** 2
        case "cross":
            return (rows == h // 2) | (cols == w // 2)
    raise ValueError(name)


def shape_templates(spec: SynthSpec) -> np.ndarray:
    """Template s is the union of the features selected by the bits of s."""
    features = [_feature(name, spec.height, spec.width) for name in SHAPE_FEATURES]
    out = np.zeros((spec.n_shapes, spec.height, spec.width))
    for s in range(spec.n_shapes):
        for bit, feat in enumerate(features):
            if s >> bit & 1:
                out[s][feat] = 1.0
    return out


def synth(spec: SynthSpec, n: int, decoder_window: ReceptiveField | None = None) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    if spec.kind is SynthKind.LOCAL_TEXTURE:
        if decoder_window is not None and not TEXTURE_OFFSETS <= decoder_window.offsets:
            logger.warning("generator window wider than the %s decoder window", decoder_window.name)
        images = np.zeros((n, h, w))
        u = rng.uniform(size=(n, h, w))
        coin = (rng.uniform(size=(n, h, w)) < 0.5).astype(np.float64)
        for r in range(h):
            for c in range(w):
                px = coin[:, r, c].copy()
                if r > 0:
                    up = u[:, r, c] < spec.p_left + spec.p_up
                    px[up] = images[up, r - 1, c]
                if c > 0:
                    left = u[:, r, c] < spec.p_left
                    px[left] = images[left, r, c - 1]
                images[:, r, c] = px
        return Dataset(
            images=images,
            binarization=Binarization.STATIC,
            provenance=f"synth:{spec.kind.value}:p_left={spec.p_left}:p_up={spec.p_up}:seed={spec.seed}",
        )

    templates = shape_templates(spec)
    labels = rng.integers(0, spec.n_shapes, size=n)
    flips = rng.uniform(size=(n, h, w)) < spec.noise
    images = np.logical_xor(templates[labels] > 0.5, flips).astype(np.float64)
    return Dataset(
        images=images,
        binarization=Binarization.STATIC,
        provenance=f"synth:{spec.kind.value}:S={spec.n_shapes}:noise={spec.noise}:seed={spec.seed}",
        labels=labels,
    )


##################################
# Split
##################################

def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    if len(fractions) != 3:
        raise ArgumentError("split needs three fractions")
    if any(f < 0.0 or f > 1.0 for f in fractions):
        raise ArgumentError(f"fraction out of range: {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ArgumentError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = min(int(round(fractions[1] * n)), n - n_train)
    parts = np.split(order, [n_train, n_train + n_valid])
    train, valid, test = (
        dataset.subset(np.sort(idx), tag) for idx, tag in zip(parts, (Split.TRAIN, Split.VALID, Split.TEST))
    )
    return train, valid, test


##################################
# Dependence diagnostics
##################################

def patch_codes(images: np.ndarray, rows: slice, cols: slice) -> np.ndarray:
    """Integer code of each binary patch (row-major bits)."""
    patch = images.reshape(len(images), *images.shape[-2:])[:, rows, cols].reshape(len(images), -1)
    weights = 1 << np.arange(patch.shape[1])[::-1]
    return (patch > 0.5).astype(np.int64) @ weights


def plugin_mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in I(A;B) in bits from paired discrete codes."""
    if len(a) != len(b) or len(a) == 0:
        raise ShapeError("mutual information needs two equal nonempty code arrays")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (pa @ pb)[nz])))


def conditional_given_window(images: np.ndarray, row: int, col: int, window: Sequence[tuple[int, int]]) -> dict[int, float]:
    """Empirical P(x[row, col] = 1 | window pattern), keyed by the window's code."""
    flat = images.reshape(len(images), *images.shape[-2:])
    bits = np.stack([flat[:, row + dy, col + dx] for dy, dx in window], axis=1) > 0.5
    codes = bits.astype(np.int64) @ (1 << np.arange(len(window)))
    target = flat[:, row, col]
    return {int(c): float(target[codes == c].mean()) for c in np.unique(codes)}
