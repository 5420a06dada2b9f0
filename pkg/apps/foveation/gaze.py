"""
Gaze prediction and the two ways predicted gaze reaches the policy.

Two-stage: a small fully convolutional encoder-decoder reads a 4x downscaled
camera frame, emits an 18x18 heatmap, and a spatial softmax turns it into a
keypoint. The keypoint picks the fovea and is appended to proprio.

Gaze-as-action: the policy's action vector carries two extra gaze columns.
The fovea for step n is the first gaze the policy predicted at step n - 1
(the image center at the start of an episode).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.nn import functional as F

from apps.foveation.encoder import token_pixels
from apps.foveation.errors import DivergenceError, NonFiniteError, ShapeMismatchError
from apps.foveation.fovea import (
    FOVEATED_CANVAS,
    GazePoint,
    PatternKind,
    area_downscale,
    build_pattern,
    gaze_offset,
    resize_to_canvas,
    tokenize,
)
from apps.foveation.imaging import save_heatmap
from apps.foveation.policy import FlowPolicy, Observation, euler_sample

logger = logging.getLogger(__name__)

GAZE_SOURCES = ("human", "unet", "policy")
GAZE_CSV_COLUMNS = ["frame_id", "x", "y", "source"]


@dataclass(frozen=True)
class GazePredictorConfig:
    downscale: int = 4
    grid: int = 18
    channels: tuple[int, int, int] = (16, 32, 64)
    temperature: float = 1.0
    lr: float = 1e-3
    steps: int = 400
    batch_size: int = 32
    seed: int = 0
    log_every: int = 100

    def __post_init__(self) -> None:
        if self.grid < 8:
            raise ValueError(f"Heatmap grid must be at least 8x8, got {self.grid}")
        if not self.temperature > 0:
            raise ValueError(f"Softmax temperature must be positive, got {self.temperature}")
        if FOVEATED_CANVAS % self.downscale:
            raise ValueError(f"downscale must divide {FOVEATED_CANVAS}")
        if self.input_side % self.grid or (self.input_side // self.grid) % 4:
            raise ValueError("input side must be a multiple of 4 * grid")

    @property
    def input_side(self) -> int:
        return FOVEATED_CANVAS // self.downscale


def cell_centers(h: int, w: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    return xs, ys


def spatial_softmax(heatmap: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Expected cell-center coordinate under softmax(heatmap / temperature).

    heatmap: (..., h, w) logits. Returns (..., 2) as normalized (x, y).
    """
    if not temperature > 0:
        raise ValueError(f"Softmax temperature must be positive, got {temperature}")
    if not torch.isfinite(heatmap).all():
        raise NonFiniteError("Heatmap contains non-finite values")
    h, w = heatmap.shape[-2:]
    probs = torch.softmax(heatmap.flatten(-2) / temperature, dim=-1).unflatten(-1, (h, w))
    xs, ys = cell_centers(h, w, heatmap.dtype)
    x = (probs.sum(dim=-2) * xs).sum(dim=-1)
    y = (probs.sum(dim=-1) * ys).sum(dim=-1)
    return torch.stack([x, y], dim=-1)


def heatmap_keypoint(heatmap: np.ndarray, temperature: float = 1.0) -> GazePoint:
    values = torch.as_tensor(np.asarray(heatmap, dtype=np.float64))
    return GazePoint.from_array(spatial_softmax(values, temperature).numpy())


def fovea_contains(gaze: GazePoint, point: GazePoint) -> bool:
    """Whether `point` lands in the full-resolution core when foveating at `gaze`."""
    pattern = build_pattern(PatternKind.FOVEATED)
    dx, dy = gaze_offset(gaze, pattern.canvas_width, pattern.canvas_height)
    px, py = point.x * pattern.canvas_width, point.y * pattern.canvas_height
    x0, y0, x1, y1 = pattern.fovea_box()
    return x0 <= px + dx < x1 and y0 <= py + dy < y1


def merge_binocular(left: GazePoint, right: GazePoint) -> GazePoint:
    return GazePoint((left.x + right.x) / 2.0, (left.y + right.y) / 2.0)


def downscale_image(image: np.ndarray, factor: int = 4) -> np.ndarray:
    """Area-average a frame down by `factor` after fitting it to the 288 px canvas."""
    image = resize_to_canvas(image, build_pattern(PatternKind.FOVEATED))
    return area_downscale(image, factor).astype(np.float32)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
    )


class GazePredictor(nn.Module):
    """Three-level conv encoder-decoder with skip connections, heatmap head."""

    def __init__(self, config: GazePredictorConfig | None = None):
        super().__init__()
        self.config = config or GazePredictorConfig()
        c1, c2, c3 = self.config.channels
        self.enc1 = _conv_block(3, c1)
        self.enc2 = _conv_block(c1, c2)
        self.bottleneck = _conv_block(c2, c3)
        self.up2 = nn.ConvTranspose2d(c3, c2, kernel_size=2, stride=2)
        self.dec2 = _conv_block(2 * c2, c2)
        self.up1 = nn.ConvTranspose2d(c2, c1, kernel_size=2, stride=2)
        self.dec1 = _conv_block(2 * c1, c1)
        self.head = nn.Conv2d(c1, 1, kernel_size=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) images -> (B, grid, grid) heatmap logits."""
        side = self.config.input_side
        if images.dim() != 4 or images.shape[1:] != (3, side, side):
            raise ShapeMismatchError(f"Expected (B, 3, {side}, {side}) images, got {tuple(images.shape)}")
        e1 = self.enc1(images)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        b = self.bottleneck(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        logits = self.head(d1)
        return F.avg_pool2d(logits, side // self.config.grid).squeeze(1)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        return spatial_softmax(self(images), self.config.temperature)

    @torch.no_grad()
    def heatmap(self, image: np.ndarray) -> np.ndarray:
        return self(_image_batch(image))[0].numpy()

    @torch.no_grad()
    def predict_point(self, image: np.ndarray) -> GazePoint:
        """Keypoint for one downscaled (S, S, 3) frame."""
        return GazePoint.from_array(self.predict(_image_batch(image))[0].numpy())


def _image_batch(images: np.ndarray) -> torch.Tensor:
    array = np.asarray(images, dtype=np.float32)
    if array.ndim == 3:
        array = array[None]
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2)))


@dataclass
class GazeTrainResult:
    predictor: GazePredictor
    losses: list[float]


def train_gaze_predictor(
    images: np.ndarray,
    gazes: np.ndarray,
    config: GazePredictorConfig | None = None,
) -> GazeTrainResult:
    """MSE between the spatial-softmax keypoint and the gaze label.

    images: (N, S, S, 3) downscaled frames; gazes: (N, 2) labels in [0, 1].
    """
    config = config or GazePredictorConfig()
    gazes = np.asarray(gazes, dtype=np.float32)
    if len(images) != len(gazes) or len(images) == 0:
        raise ShapeMismatchError(f"Got {len(images)} images for {len(gazes)} gaze labels")
    if gazes.min() < 0.0 or gazes.max() > 1.0:
        raise ValueError("Gaze labels must lie in [0, 1]")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    predictor = GazePredictor(config)
    optimizer = torch.optim.Adam(predictor.parameters(), lr=config.lr)
    inputs = _image_batch(images)
    targets = torch.from_numpy(gazes)

    losses: list[float] = []
    predictor.train()
    for step in range(config.steps):
        idx = torch.from_numpy(rng.choice(len(inputs), size=min(config.batch_size, len(inputs)), replace=False))
        loss = F.mse_loss(predictor.predict(inputs[idx]), targets[idx])
        value = float(loss.detach())
        if not math.isfinite(value):
            error = DivergenceError("Gaze predictor training diverged", step=step, recent_losses=losses)
            logger.error(error.diagnostics())
            raise error
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(value)
        if config.log_every and step % config.log_every == 0:
            logger.info("gaze step=%d loss=%.6f", step, value)
    predictor.eval()
    return GazeTrainResult(predictor=predictor, losses=losses)


@torch.no_grad()
def gaze_errors(predictor: GazePredictor, images: np.ndarray, gazes: np.ndarray) -> np.ndarray:
    """Euclidean error per image in normalized units."""
    predicted = predictor.predict(_image_batch(images)).numpy()
    return np.linalg.norm(predicted - np.asarray(gazes, dtype=np.float32), axis=1)


@dataclass
class GazeHistory:
    last: GazePoint = field(default_factory=GazePoint.center)
    initialized: bool = False

    def update(self, gaze: GazePoint) -> None:
        self.last = gaze
        self.initialized = True

    def reset(self) -> None:
        self.last = GazePoint.center()
        self.initialized = False


@dataclass
class ControlStep:
    """What either gaze variant hands to the control loop."""

    gaze: GazePoint
    gaze_trajectory: np.ndarray
    chunk: np.ndarray
    action_dim: int

    @property
    def actions(self) -> np.ndarray:
        return self.chunk[:, : self.action_dim]


def foveated_observation(image: np.ndarray, gaze: GazePoint, proprio: np.ndarray) -> Observation:
    pattern = build_pattern(PatternKind.FOVEATED)
    tokens = tokenize(resize_to_canvas(image, pattern), pattern, gaze)
    conditioned = np.concatenate([np.asarray(proprio, dtype=np.float32), gaze.as_array().astype(np.float32)])
    return Observation(proprio=torch.from_numpy(conditioned)[None], pixels=token_pixels(tokens))


def two_stage_step(
    image: np.ndarray,
    predictor: GazePredictor,
    policy: FlowPolicy,
    proprio: np.ndarray,
    seed: int | None = None,
) -> ControlStep:
    gaze = predictor.predict_point(downscale_image(image, predictor.config.downscale))
    chunk = euler_sample(policy, foveated_observation(image, gaze, proprio), seed=seed)[0].numpy()
    return ControlStep(
        gaze=gaze,
        gaze_trajectory=np.tile(gaze.as_array(), (chunk.shape[0], 1)),
        chunk=chunk,
        action_dim=chunk.shape[1],
    )


def gaze_as_action_step(
    image: np.ndarray,
    history: GazeHistory,
    policy: FlowPolicy,
    proprio: np.ndarray,
    seed: int | None = None,
) -> ControlStep:
    gaze = history.last
    chunk = euler_sample(policy, foveated_observation(image, gaze, proprio), seed=seed)[0].numpy()
    if chunk.shape[1] < 3:
        raise ShapeMismatchError("A gaze-as-action policy needs at least one action column plus two gaze columns")
    trajectory = np.clip(chunk[:, -2:], 0.0, 1.0)
    history.update(GazePoint.from_array(trajectory[0]))
    return ControlStep(gaze=gaze, gaze_trajectory=trajectory, chunk=chunk, action_dim=chunk.shape[1] - 2)


def gaze_frame(frame_ids, gazes: np.ndarray, source: str) -> pd.DataFrame:
    if source not in GAZE_SOURCES:
        raise ValueError(f"Unknown gaze source {source!r} (expected one of: {', '.join(GAZE_SOURCES)})")
    gazes = np.asarray(gazes, dtype=np.float64).reshape(-1, 2)
    return pd.DataFrame(
        {"frame_id": np.asarray(frame_ids, dtype=np.int64), "x": gazes[:, 0], "y": gazes[:, 1], "source": source},
        columns=GAZE_CSV_COLUMNS,
    )


def export_heatmap_png(predictor: GazePredictor, image: np.ndarray, path: Path) -> Path:
    """Write the heatmap for one downscaled frame, with its keypoint marked."""
    values = predictor.heatmap(image)
    keypoint = heatmap_keypoint(values, predictor.config.temperature)
    return save_heatmap(values, path, keypoint=keypoint, background=image)
