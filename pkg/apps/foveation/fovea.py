"""
Patch tokenization patterns and gaze-centered foveation.

Three patterns share one representation (an ordered list of square patches
tiling a canvas):

  - Foveated: 288x288 canvas, 20 patches on three self-similar levels
    (2x2 core of 16 px, a ring of eight 32 px patches, a ring of eight 96 px
    patches). The image is shifted so the gaze lands on the canvas center and
    every patch is area-averaged down to 16x16.
  - Fine: 288x288 canvas, 18x18 grid of 16 px patches (324 tokens).
  - Coarse: 256x320 canvas (rows x cols), 4x5 grid of 64 px patches.

Images are float arrays of shape (height, width, 3) with values in [0, 1].
Every function here is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy import ndimage

from apps.foveation.errors import NonFiniteError, ShapeMismatchError

BASE_PATCH = 16
FOVEATED_CANVAS = 288
FINE_GRID = 18
COARSE_ROWS = 4
COARSE_COLS = 5
COARSE_PATCH = 64
CHANNELS = 3

PATTERN_TEXT_HEADER = "# level,x,y,size"


class PatternKind(str, Enum):
    FOVEATED = "foveated"
    FINE = "fine"
    COARSE = "coarse"

    @classmethod
    def parse(cls, value: "PatternKind | str") -> "PatternKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            options = ", ".join(k.value for k in cls)
            raise ValueError(f"Unknown pattern kind: {value!r} (expected one of: {options})") from None


@dataclass(frozen=True)
class GazePoint:
    """Normalized image coordinate; clamped to [0, 1] on construction."""

    x: float
    y: float

    def __post_init__(self) -> None:
        x = float(self.x)
        y = float(self.y)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise NonFiniteError(f"Gaze coordinates must be finite, got ({x}, {y})")
        object.__setattr__(self, "x", min(1.0, max(0.0, x)))
        object.__setattr__(self, "y", min(1.0, max(0.0, y)))

    @classmethod
    def center(cls) -> "GazePoint":
        return cls(0.5, 0.5)

    @classmethod
    def from_array(cls, values) -> "GazePoint":
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.shape[0] != 2:
            raise ShapeMismatchError(f"Gaze array must hold 2 values, got {arr.shape[0]}")
        return cls(float(arr[0]), float(arr[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class PatchSpec:
    origin_x: int
    origin_y: int
    size: int
    level: int

    @property
    def rows(self) -> slice:
        return slice(self.origin_y, self.origin_y + self.size)

    @property
    def cols(self) -> slice:
        return slice(self.origin_x, self.origin_x + self.size)


@dataclass(frozen=True)
class TokenizationPattern:
    kind: PatternKind
    canvas_width: int
    canvas_height: int
    patches: tuple[PatchSpec, ...]
    base_patch: int = BASE_PATCH

    @property
    def n_tokens(self) -> int:
        return len(self.patches)

    @property
    def token_side(self) -> int:
        """Side length of every token block this pattern produces."""
        if self.kind is PatternKind.FOVEATED:
            return self.base_patch
        return self.patches[0].size

    @property
    def embed_input(self) -> int:
        return self.token_side * self.token_side * CHANNELS

    def coverage_counts(self) -> np.ndarray:
        counts = np.zeros((self.canvas_height, self.canvas_width), dtype=np.int32)
        for patch in self.patches:
            counts[patch.rows, patch.cols] += 1
        return counts

    def is_partition(self) -> bool:
        for patch in self.patches:
            if patch.origin_x < 0 or patch.origin_y < 0:
                return False
            if patch.origin_x + patch.size > self.canvas_width:
                return False
            if patch.origin_y + patch.size > self.canvas_height:
                return False
        return bool(np.all(self.coverage_counts() == 1))

    def fovea_box(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1) of the level-0 region in canvas coordinates."""
        level0 = [p for p in self.patches if p.level == 0]
        x0 = min(p.origin_x for p in level0)
        y0 = min(p.origin_y for p in level0)
        x1 = max(p.origin_x + p.size for p in level0)
        y1 = max(p.origin_y + p.size for p in level0)
        return x0, y0, x1, y1

    def to_text(self) -> str:
        lines = [
            f"kind = {self.kind.value}",
            f"canvas = {self.canvas_width}x{self.canvas_height}",
            f"base_patch = {self.base_patch}",
            PATTERN_TEXT_HEADER,
        ]
        lines.extend(f"{p.level},{p.origin_x},{p.origin_y},{p.size}" for p in self.patches)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TokenizationPattern":
        header: dict[str, str] = {}
        patches: list[PatchSpec] = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                key, value = (part.strip() for part in line.split("=", 1))
                header[key] = value
                continue
            fields = [part.strip() for part in line.split(",")]
            if len(fields) != 4:
                raise ValueError(f"Malformed patch row: {raw!r}")
            level, x, y, size = (int(v) for v in fields)
            patches.append(PatchSpec(origin_x=x, origin_y=y, size=size, level=level))

        missing = {"kind", "canvas"} - set(header)
        if missing:
            raise ValueError(f"Pattern text is missing keys: {sorted(missing)}")
        width, height = (int(v) for v in header["canvas"].lower().split("x"))
        return cls(
            kind=PatternKind.parse(header["kind"]),
            canvas_width=width,
            canvas_height=height,
            patches=tuple(patches),
            base_patch=int(header.get("base_patch", BASE_PATCH)),
        )


@dataclass(frozen=True)
class TokenizedImage:
    pattern: TokenizationPattern
    tokens: np.ndarray
    gaze: GazePoint | None = None
    offset: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        side = self.pattern.token_side
        expected = (self.pattern.n_tokens, side, side, CHANNELS)
        if self.tokens.shape != expected:
            raise ShapeMismatchError(
                f"Token array shape {self.tokens.shape} does not match pattern {expected}"
            )

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def flat(self) -> np.ndarray:
        """Tokens flattened to (n, side*side*3) float32, the patch-embed input."""
        return self.tokens.reshape(self.n_tokens, -1).astype(np.float32, copy=False)


def _square_ring(origin: int, size: int) -> list[tuple[int, int]]:
    """Row-major 3x3 grid of `size` patches at `origin`, center cell removed."""
    return [
        (origin + col * size, origin + row * size)
        for row in range(3)
        for col in range(3)
        if not (row == 1 and col == 1)
    ]


def _foveated_patches() -> tuple[PatchSpec, ...]:
    center = FOVEATED_CANVAS // 2
    patches: list[PatchSpec] = []

    core = center - BASE_PATCH
    for row in range(2):
        for col in range(2):
            patches.append(PatchSpec(core + col * BASE_PATCH, core + row * BASE_PATCH, BASE_PATCH, 0))

    mid_size = 2 * BASE_PATCH
    mid_origin = center - 3 * mid_size // 2
    patches.extend(PatchSpec(x, y, mid_size, 1) for x, y in _square_ring(mid_origin, mid_size))

    outer_size = 3 * mid_size
    outer_origin = center - 3 * outer_size // 2
    patches.extend(PatchSpec(x, y, outer_size, 2) for x, y in _square_ring(outer_origin, outer_size))
    return tuple(patches)


def _grid_patches(rows: int, cols: int, size: int) -> tuple[PatchSpec, ...]:
    return tuple(
        PatchSpec(col * size, row * size, size, 0)
        for row in range(rows)
        for col in range(cols)
    )


@lru_cache(maxsize=None)
def build_pattern(kind: PatternKind | str) -> TokenizationPattern:
    kind = PatternKind.parse(kind)
    if kind is PatternKind.FOVEATED:
        return TokenizationPattern(kind, FOVEATED_CANVAS, FOVEATED_CANVAS, _foveated_patches())
    if kind is PatternKind.FINE:
        size = FINE_GRID * BASE_PATCH
        return TokenizationPattern(kind, size, size, _grid_patches(FINE_GRID, FINE_GRID, BASE_PATCH))
    return TokenizationPattern(
        kind,
        COARSE_COLS * COARSE_PATCH,
        COARSE_ROWS * COARSE_PATCH,
        _grid_patches(COARSE_ROWS, COARSE_COLS, COARSE_PATCH),
    )


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def gaze_to_pixel(gaze: GazePoint, width: int, height: int) -> tuple[int, int]:
    if width <= 0 or height <= 0:
        raise ValueError(f"Image size must be positive, got {width}x{height}")
    px = min(width - 1, max(0, round_half_up(gaze.x * width)))
    py = min(height - 1, max(0, round_half_up(gaze.y * height)))
    return px, py


def pixel_to_gaze(px: float, py: float, width: int, height: int) -> GazePoint:
    if width <= 0 or height <= 0:
        raise ValueError(f"Image size must be positive, got {width}x{height}")
    return GazePoint(px / width, py / height)


def check_image(image: np.ndarray, pattern: TokenizationPattern | None = None) -> np.ndarray:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != CHANNELS:
        shape = getattr(image, "shape", None)
        raise ShapeMismatchError(f"Expected an image of shape (height, width, 3), got {shape}")
    if not np.all(np.isfinite(image)):
        raise NonFiniteError("Image contains non-finite values")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("Image values must lie in [0, 1]")
    if pattern is not None and image.shape[:2] != (pattern.canvas_height, pattern.canvas_width):
        raise ShapeMismatchError(
            f"Image is {image.shape[1]}x{image.shape[0]} but the {pattern.kind.value} canvas is "
            f"{pattern.canvas_width}x{pattern.canvas_height}; resize first"
        )
    return image


def resize_to_canvas(image: np.ndarray, pattern: TokenizationPattern) -> np.ndarray:
    """Bilinear resize so the image matches the pattern canvas."""
    check_image(image)
    height, width = image.shape[:2]
    if (height, width) == (pattern.canvas_height, pattern.canvas_width):
        return image
    factors = (pattern.canvas_height / height, pattern.canvas_width / width, 1.0)
    resized = ndimage.zoom(image, factors, order=1, mode="nearest")
    if resized.shape[:2] != (pattern.canvas_height, pattern.canvas_width):
        raise ShapeMismatchError(f"Resize produced {resized.shape[:2]}, expected canvas size")
    return np.clip(resized, 0.0, 1.0).astype(image.dtype, copy=False)


def translate(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer translation; output pixel (x + dx, y + dy) takes input (x, y), zero fill."""
    out = np.zeros_like(image)
    height, width = image.shape[:2]
    src_x0, src_x1 = max(0, -dx), min(width, width - dx)
    src_y0, src_y1 = max(0, -dy), min(height, height - dy)
    if src_x1 <= src_x0 or src_y1 <= src_y0:
        return out
    out[src_y0 + dy:src_y1 + dy, src_x0 + dx:src_x1 + dx] = image[src_y0:src_y1, src_x0:src_x1]
    return out


def gaze_offset(gaze: GazePoint, width: int, height: int) -> tuple[int, int]:
    px, py = gaze_to_pixel(gaze, width, height)
    return width // 2 - px, height // 2 - py


def shift_for_gaze(image: np.ndarray, gaze: GazePoint, pattern: TokenizationPattern) -> np.ndarray:
    check_image(image, pattern)
    dx, dy = gaze_offset(gaze, pattern.canvas_width, pattern.canvas_height)
    return translate(image, dx, dy)


def area_downscale(block: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return block.copy()
    side = block.shape[0] // factor
    return block.reshape(side, factor, side, factor, block.shape[2]).mean(axis=(1, 3))


def tokenize(
    image: np.ndarray,
    pattern: TokenizationPattern,
    gaze: GazePoint | None = None,
) -> TokenizedImage:
    check_image(image, pattern)
    if pattern.kind is not PatternKind.FOVEATED:
        tokens = np.stack([image[p.rows, p.cols] for p in pattern.patches]).copy()
        return TokenizedImage(pattern=pattern, tokens=tokens)

    if gaze is None:
        raise ValueError("Foveated tokenization requires a gaze point")
    offset = gaze_offset(gaze, pattern.canvas_width, pattern.canvas_height)
    shifted = translate(image, *offset)
    tokens = np.stack(
        [area_downscale(shifted[p.rows, p.cols], p.size // pattern.base_patch) for p in pattern.patches]
    )
    return TokenizedImage(pattern=pattern, tokens=tokens.astype(image.dtype, copy=False), gaze=gaze, offset=offset)


def assemble(tokenized: TokenizedImage) -> np.ndarray:
    """Paint tokens back into their patches; Foveated output is in the original frame."""
    pattern = tokenized.pattern
    if tokenized.n_tokens != pattern.n_tokens:
        raise ShapeMismatchError("Token count does not match the pattern")

    canvas = np.zeros((pattern.canvas_height, pattern.canvas_width, CHANNELS), dtype=tokenized.tokens.dtype)
    for patch, token in zip(pattern.patches, tokenized.tokens):
        factor = patch.size // token.shape[0]
        if factor * token.shape[0] != patch.size:
            raise ShapeMismatchError(f"Token side {token.shape[0]} does not divide patch size {patch.size}")
        if factor > 1:
            token = np.repeat(np.repeat(token, factor, axis=0), factor, axis=1)
        canvas[patch.rows, patch.cols] = token

    if pattern.kind is PatternKind.FOVEATED:
        dx, dy = tokenized.offset
        canvas = translate(canvas, -dx, -dy)
    return canvas


def tokenize_any(image: np.ndarray, kind: PatternKind | str, gaze: GazePoint | None = None) -> TokenizedImage:
    """Resize to the pattern canvas when needed, then tokenize."""
    pattern = build_pattern(kind)
    return tokenize(resize_to_canvas(image, pattern), pattern, gaze)
