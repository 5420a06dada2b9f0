"""
PNG I/O and inspection plots (matplotlib, Agg backend).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from apps.foveation.fovea import (  # noqa: E402
    GazePoint,
    PatternKind,
    TokenizationPattern,
    TokenizedImage,
    assemble,
    gaze_offset,
)

LEVEL_COLORS = {0: "#e41a1c", 1: "#ff7f00", 2: "#377eb8"}


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels the way a PNG round trip does."""
    as_bytes = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.divide(as_bytes, 255, dtype=np.float32)


def write_png(image: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8))
    return path


def read_png(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")
    image = plt.imread(path)
    if image.dtype == np.uint8:
        image = np.divide(image, 255, dtype=np.float32)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    return np.ascontiguousarray(image[..., :3], dtype=np.float32)


def reference_card(width: int, height: int) -> np.ndarray:
    """Deterministic gradient-plus-checker image used under pattern overlays."""
    ys, xs = np.mgrid[0:height, 0:width]
    checker = ((xs // 16 + ys // 16) % 2).astype(np.float32)
    image = np.stack([xs / max(width - 1, 1), ys / max(height - 1, 1), 0.25 + 0.5 * checker], axis=2)
    return image.astype(np.float32)


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def draw_pattern(
    pattern: TokenizationPattern,
    path: Path,
    image: np.ndarray | None = None,
    gaze: GazePoint | None = None,
) -> int:
    """Overlay patch boundaries; returns the number of rectangles drawn.

    For Foveated patterns with a gaze, rectangles are drawn in the original
    image frame (shifted back by the gaze offset).
    """
    if image is None:
        image = reference_card(pattern.canvas_width, pattern.canvas_height)
    dx, dy = (0, 0)
    if pattern.kind is PatternKind.FOVEATED and gaze is not None:
        dx, dy = gaze_offset(gaze, pattern.canvas_width, pattern.canvas_height)

    fig, ax = plt.subplots(figsize=(pattern.canvas_width / 72, pattern.canvas_height / 72))
    ax.imshow(image, extent=(0, image.shape[1], image.shape[0], 0))
    drawn = 0
    for patch in pattern.patches:
        ax.add_patch(
            Rectangle(
                (patch.origin_x - dx, patch.origin_y - dy),
                patch.size,
                patch.size,
                fill=False,
                linewidth=1.0,
                edgecolor=LEVEL_COLORS.get(patch.level, "white"),
            )
        )
        drawn += 1
    ax.set_xlim(0, image.shape[1])
    ax.set_ylim(image.shape[0], 0)
    ax.set_title(f"{pattern.kind.value}: {pattern.n_tokens} tokens")
    ax.axis("off")
    _save(fig, path)
    return drawn


def save_mosaic(tokenized: TokenizedImage, path: Path) -> Path:
    return write_png(assemble(tokenized), path)


def save_mae_triptych(original: np.ndarray, masked: np.ndarray, reconstruction: np.ndarray, path: Path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.3))
    for ax, image, title in zip(axes, (original, masked, reconstruction), ("input", "masked", "reconstruction")):
        ax.imshow(np.clip(image, 0.0, 1.0))
        ax.set_title(title)
        ax.axis("off")
    return _save(fig, path)


def save_heatmap(
    values: np.ndarray,
    path: Path,
    keypoint: GazePoint | None = None,
    background: np.ndarray | None = None,
) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    extent = (0.0, 1.0, 1.0, 0.0)
    if background is not None:
        ax.imshow(np.clip(background, 0.0, 1.0), extent=extent)
        ax.imshow(values, cmap="magma", alpha=0.55, extent=extent, interpolation="nearest")
    else:
        ax.imshow(values, cmap="magma", extent=extent, interpolation="nearest")
    if keypoint is not None:
        ax.plot([keypoint.x], [keypoint.y], marker="+", color="cyan", markersize=14, mew=2)
    ax.axis("off")
    return _save(fig, path)


def plot_curves(df: pd.DataFrame, x: str, ys: list[str], path: Path, title: str = "", logy: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for column in ys:
        ax.plot(df[x], df[column], label=column, linewidth=1.0)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(x)
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_sync(t: np.ndarray, truth: np.ndarray, aligned: np.ndarray, measured: np.ndarray, path: Path) -> Path:
    fig, axes = plt.subplots(2, 1, figsize=(7, 4.5), sharex=True)
    for axis, ax in enumerate(axes):
        ax.plot(t, truth[:, axis], color="black", linewidth=1.0, label="true")
        ax.plot(t, aligned[:, axis], color="tab:blue", linewidth=1.0, label="aligned")
        ax.scatter(t[measured], aligned[measured, axis], s=8, color="tab:orange", label="measured", zorder=3)
        ax.set_ylabel("xy"[axis])
    axes[0].legend(loc="upper right")
    axes[1].set_xlabel("seconds")
    return _save(fig, path)
