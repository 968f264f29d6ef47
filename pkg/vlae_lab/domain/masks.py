from __future__ import annotations

import enum
import logging
from collections.abc import Sequence
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from vlae_lab.domain.errors import CausalityError, MaskError, ShapeError
from vlae_lab.domain.ndiff import ops
from vlae_lab.domain.ndiff.tensor import Tape, Tensor, variable

logger = logging.getLogger(__name__)

GRAYSCALE_WEIGHTS = (0.299, 0.587, 0.114)

Offset = tuple[int, int]


##################################
# MADE
##################################

class MadeMaskSet(BaseModel):
    masks: list[np.ndarray]
    ordering: tuple[int, ...]
    degrees: list[tuple[int, ...]]
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("ordering")
    @classmethod
    def check_permutation(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if sorted(v) != list(range(1, len(v) + 1)):
            raise ValueError("ordering must be a permutation of 1..D")
        return v

    @property
    def dim(self) -> int:
        return len(self.ordering)

    def connectivity(self) -> np.ndarray:
        """End-to-end path counts, shape D_in × D_out."""
        total = self.masks[0]
        for m in self.masks[1:]:
            total = total @ m
        return total


def natural_ordering(dim: int) -> tuple[int, ...]:
    return tuple(range(1, dim + 1))


def reversed_ordering(dim: int) -> tuple[int, ...]:
    return tuple(range(dim, 0, -1))


def build_made_masks(
    layer_sizes: Sequence[int],
    ordering: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> MadeMaskSet:
    """Masks for x @ W layers such that output unit i sees only inputs earlier in ``ordering``.

    Hidden degrees are assigned round-robin in [1, D-1]; passing ``rng``
    samples them instead.
    """
    if len(layer_sizes) < 2:
        raise MaskError("MADE needs at least an input and an output layer")
    dim = layer_sizes[0]
    if dim < 1:
        raise MaskError(f"autoregressive dimension must be >= 1, got {dim}")
    if layer_sizes[-1] != dim:
        raise MaskError(f"output width {layer_sizes[-1]} != input width {dim}")
    if any(width < 1 for width in layer_sizes[1:-1]):
        raise MaskError("hidden layer of width 0")
    order = tuple(ordering) if ordering is not None else natural_ordering(dim)
    if len(order) != dim:
        raise MaskError(f"ordering has {len(order)} entries, expected {dim}")

    span = max(dim - 1, 1)
    degrees: list[np.ndarray] = [np.asarray(order)]
    for width in layer_sizes[1:-1]:
        if rng is None:
            deg = 1 + np.arange(width) % span
        else:
            low = min(int(degrees[-1].min()), span)
            deg = rng.integers(low, span + 1, size=width)
        degrees.append(deg)
    degrees.append(np.asarray(order))

    masks = []
    for k, (d_in, d_out) in enumerate(zip(degrees[:-1], degrees[1:])):
        last = k == len(degrees) - 2
        # 出力層は厳密に小さい次数のみ、隠れ層は以下を許可
        allowed = d_out[None, :] > d_in[:, None] if last else d_out[None, :] >= d_in[:, None]
        masks.append(allowed.astype(np.float64))
    return MadeMaskSet(
        masks=masks,
        ordering=order,
        degrees=[tuple(int(v) for v in d) for d in degrees],
    )


##################################
# Masked convolutions
##################################

class MaskKind(str, enum.Enum):
    A = "A"
    B = "B"
    VERTICAL_FIRST = "vertical_first"
    VERTICAL = "vertical"
    HORIZONTAL_A = "horizontal_a"
    HORIZONTAL_B = "horizontal_b"
    LINK = "link"


class ConvMask(BaseModel):
    kind: MaskKind
    kh: int = Field(default=3)
    kw: int = Field(default=3)
    c_in: int = Field(default=1)
    c_out: int = Field(default=1)
    # 末尾の context_channels 本は z 由来なので空間マスクを掛けない
    context_channels: int = Field(default=0)
    model_config = ConfigDict(frozen=True)

    @field_validator("kh", "kw")
    @classmethod
    def check_odd(cls, v: int) -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError("filter extents must be odd")
        return v

    @model_validator(mode="after")
    def check_channels(self) -> "ConvMask":
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be positive")
        if not 0 <= self.context_channels < self.c_in:
            raise ValueError("context_channels must leave at least one image channel")
        return self

    def spatial(self) -> np.ndarray:
        ch, cw = self.kh // 2, self.kw // 2
        rows, cols = np.meshgrid(np.arange(self.kh), np.arange(self.kw), indexing="ij")
        above, same, left, right = rows < ch, rows == ch, cols < cw, cols > cw
        center = same & (cols == cw)
        match self.kind:
            case MaskKind.A:
                allowed = above | (same & left)
            case MaskKind.B:
                allowed = above | (same & left) | center
            case MaskKind.VERTICAL_FIRST:
                allowed = rows <= ch
            case MaskKind.VERTICAL:
                # 2 層目以降の縦スタックは列 0..+1 だけ読み、窓は右にだけ広がる
                allowed = (rows <= ch) & ~left
            case MaskKind.HORIZONTAL_A:
                allowed = same & left
            case MaskKind.HORIZONTAL_B:
                allowed = same & ~right
            case MaskKind.LINK:
                allowed = (rows == ch - 1) & (cols == cw)
        return allowed.astype(np.float64)

    def array(self) -> np.ndarray:
        mask = np.broadcast_to(self.spatial(), (self.c_out, self.c_in, self.kh, self.kw)).copy()
        if self.context_channels:
            mask[:, self.c_in - self.context_channels:] = 1.0
        return mask

    def offsets(self) -> frozenset[Offset]:
        ch, cw = self.kh // 2, self.kw // 2
        ii, jj = np.nonzero(self.spatial())
        return frozenset((int(i) - ch, int(j) - cw) for i, j in zip(ii, jj))


def build_conv_mask(
    kind: MaskKind | str,
    kh: int,
    kw: int,
    c_in: int,
    c_out: int,
    context_channels: int = 0,
) -> np.ndarray:
    try:
        spec = ConvMask(
            kind=MaskKind(kind), kh=kh, kw=kw, c_in=c_in, c_out=c_out,
            context_channels=context_channels,
        )
    except ValueError as e:
        raise MaskError(str(e)) from e
    return spec.array()


def channel_order_mask(channels: int) -> np.ndarray:
    """1×1 mask letting channel c of a pixel read channels < c of the same pixel (R→G→B)."""
    tri = np.tril(np.ones((channels, channels)), k=-1)
    return tri[:, :, None, None]


##################################
# Receptive field
##################################

class ReceptiveField(BaseModel):
    width: int
    height: int
    left_extent: int
    offsets: frozenset[Offset]
    model_config = ConfigDict(frozen=True)

    @field_validator("offsets")
    @classmethod
    def check_strict_past(cls, v: frozenset[Offset]) -> frozenset[Offset]:
        for dy, dx in v:
            if dy > 0 or (dy == 0 and dx >= 0):
                raise ValueError(f"offset {(dy, dx)} is not in the raster-order past")
        return v

    @classmethod
    def from_offsets(cls, offsets: frozenset[Offset]) -> "ReceptiveField":
        above = [(dy, dx) for dy, dx in offsets if dy < 0]
        same_row = [dx for dy, dx in offsets if dy == 0]
        width = (max(dx for _, dx in above) - min(dx for _, dx in above) + 1) if above else 0
        height = max(-dy for dy, _ in above) if above else 0
        left = max(-dx for dx in same_row) if same_row else 0
        return cls(width=width, height=height, left_extent=left, offsets=offsets)

    @classmethod
    def empty(cls) -> "ReceptiveField":
        return cls(width=0, height=0, left_extent=0, offsets=frozenset())

    @property
    def name(self) -> str:
        return f"{self.width}x{self.height}"

    def window(self, row: int, col: int, height: int, width: int) -> set[tuple[int, int]]:
        out = set()
        for dy, dx in self.offsets:
            r, c = row + dy, col + dx
            if 0 <= r < height and 0 <= c < width:
                out.add((r, c))
        return out


class TwoStackLayout(BaseModel):
    vertical: list[ConvMask]
    horizontal: list[ConvMask]
    model_config = ConfigDict(frozen=True)

    @classmethod
    def standard(cls, n_vertical: int, n_horizontal: int, kernel: int = 3) -> "TwoStackLayout":
        if n_vertical < 1 or n_horizontal < 1:
            raise MaskError("two-stack layout needs at least one vertical and one horizontal layer")
        vertical = [ConvMask(kind=MaskKind.VERTICAL_FIRST, kh=kernel, kw=kernel)]
        vertical += [ConvMask(kind=MaskKind.VERTICAL, kh=kernel, kw=kernel) for _ in range(n_vertical - 1)]
        horizontal = [ConvMask(kind=MaskKind.HORIZONTAL_A, kh=kernel, kw=kernel)]
        horizontal += [ConvMask(kind=MaskKind.HORIZONTAL_B, kh=kernel, kw=kernel) for _ in range(n_horizontal - 1)]
        return cls(vertical=vertical, horizontal=horizontal)


def _dilate(support: frozenset[Offset], taps: frozenset[Offset]) -> frozenset[Offset]:
    return frozenset((a + c, b + d) for a, b in support for c, d in taps)


def raster_stack(n_layers: int, kernel: int = 3) -> list[ConvMask]:
    return [ConvMask(kind=MaskKind.A if k == 0 else MaskKind.B, kh=kernel, kw=kernel) for k in range(n_layers)]


def receptive_field_of(stack: Sequence[ConvMask] | TwoStackLayout) -> ReceptiveField:
    """Exact set of input offsets with structural influence on a pixel's output."""
    if isinstance(stack, TwoStackLayout):
        first = stack.vertical[0]
        if first.kind is not MaskKind.VERTICAL_FIRST or stack.horizontal[0].kind is not MaskKind.HORIZONTAL_A:
            raise CausalityError("two-stack layout must start with vertical_first / horizontal_a layers")
        vertical = first.offsets()
        for layer in stack.vertical[1:]:
            vertical = _dilate(vertical, layer.offsets())
        linked = _dilate(vertical, frozenset({(-1, 0)}))
        support = stack.horizontal[0].offsets() | linked
        for layer in stack.horizontal[1:]:
            support = _dilate(support, layer.offsets())
        return ReceptiveField.from_offsets(support)

    if not stack:
        raise CausalityError("empty decoder stack")
    if stack[0].kind is not MaskKind.A:
        raise CausalityError(f"first layer must be kind A, got {stack[0].kind.value}")
    support = stack[0].offsets()
    for layer in stack[1:]:
        if layer.kind is not MaskKind.B:
            raise CausalityError(f"layers after the first must be kind B, got {layer.kind.value}")
        support = _dilate(support, layer.offsets())
    return ReceptiveField.from_offsets(support)


##################################
# Causality check
##################################

class CausalDecoder(Protocol):
    @property
    def receptive_field(self) -> ReceptiveField: ...

    def base_logits(self, x: Tensor, cond: Tensor | None = None) -> Tensor: ...


class CausalityReport(BaseModel):
    passed: bool
    window: str
    grid_shape: tuple[int, int, int]
    violations: list[tuple[int, int]] = Field(default_factory=list)
    nonzero_inside: int = 0
    window_pairs: int = 0
    grayscale_consistent: bool | None = None
    model_config = ConfigDict(frozen=True)


def assert_causality(
    decoder: CausalDecoder,
    grid_shape: tuple[int, int, int],
    rng: np.random.Generator | None = None,
    max_violations: int = 50,
) -> CausalityReport:
    """Jacobian support check of per-pixel parameters against the decoder's window.

    Violations are (i, j) raster indices where output pixel i has a nonzero
    derivative w.r.t. input pixel j outside WindowAround(i).
    """
    channels, height, width = grid_shape
    rng = rng if rng is not None else np.random.default_rng(0)
    point = rng.uniform(0.05, 0.95, size=(1, channels, height, width))
    field = decoder.receptive_field
    violations: list[tuple[int, int]] = []
    inside = 0
    pairs = 0
    gray_ok = True if channels == 3 else None
    weights = np.asarray(GRAYSCALE_WEIGHTS)

    with Tape() as tape:
        x = variable(point)
        params = decoder.base_logits(x)
        for row in range(height):
            for col in range(width):
                i = row * width + col
                picked = ops.sum(params[0, :, row, col])
                if picked.tape is not tape:
                    grad = np.zeros_like(point)
                else:
                    (grad,) = tape.gradient(picked, [x])
                support = np.abs(grad[0]).sum(axis=0)
                allowed = field.window(row, col, height, width)
                pairs += len(allowed)
                for r, c in zip(*np.nonzero(support)):
                    r, c = int(r), int(c)
                    if (r, c) in allowed:
                        inside += 1
                        if gray_ok is not None:
                            ratio = grad[0, :, r, c] / weights
                            if not np.allclose(ratio, ratio[0], rtol=1e-6, atol=1e-12):
                                gray_ok = False
                    elif len(violations) < max_violations:
                        violations.append((i, r * width + c))
    passed = not violations
    if not passed:
        logger.warning("causality violated at %d pairs, first %s", len(violations), violations[0])
    return CausalityReport(
        passed=passed,
        window=field.name,
        grid_shape=grid_shape,
        violations=violations,
        nonzero_inside=inside,
        window_pairs=pairs,
        grayscale_consistent=gray_ok,
    )


##################################
# Grayscale receptive field
##################################

def grayscale(x: Tensor) -> Tensor:
    """(0.299 R + 0.587 G + 0.114 B) per pixel; N×3×H×W → N×1×H×W."""
    axis = x.ndim - 3
    if x.ndim not in (3, 4) or x.shape[axis] != 3:
        raise ShapeError(f"grayscale expects 3 channels, got shape {x.shape}")
    kernel = Tensor(np.asarray(GRAYSCALE_WEIGHTS, dtype=x.dtype).reshape(1, 3, 1, 1))
    return ops.conv2d(x, kernel, padding=0)


def as_rgb(x: Tensor) -> Tensor:
    """Replicate a single-channel image into R=G=B."""
    axis = x.ndim - 3
    if x.shape[axis] == 3:
        return x
    if x.shape[axis] != 1:
        raise ShapeError(f"as_rgb expects 1 or 3 channels, got shape {x.shape}")
    return ops.concat([x, x, x], axis=axis)
