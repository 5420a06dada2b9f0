"""
Desk-scale synthetic tasks.

  - mixture2d: class-conditional 2-D Gaussians, the flow-matching sanity task.
  - blobgaze: one bright blob per frame; its centroid is the gaze label.
  - scripted reach: a point agent steers toward a small target dot while a
    scripted gaze runs ahead to the target. Frames are rendered on demand so
    the dataset only stores trajectories.
  - mae toy set: eight gray frames with colored blobs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import torch

from apps.foveation.encoder import EncoderConfig
from apps.foveation.fovea import FOVEATED_CANVAS, GazePoint, PatternKind, build_pattern, tokenize_any
from apps.foveation.gaze import GazeHistory, GazePredictor, downscale_image, gaze_as_action_step, two_stage_step
from apps.foveation.policy import (
    EnsembleBuffer,
    FlowPolicy,
    Observation,
    PolicyBatch,
    PolicyConfig,
    euler_sample,
    temporal_ensemble,
)

logger = logging.getLogger(__name__)

MIXTURE_MEANS = np.array([[3.0, 2.0], [-2.0, -3.0]])
MIXTURE_COVS = np.array(
    [
        [[0.09, 0.03], [0.03, 0.06]],
        [[0.06, -0.02], [-0.02, 0.08]],
    ]
)


class MixtureDataset:
    """Class one-hot in proprio, a single 2-D action drawn from that class's Gaussian."""

    def __init__(self, means: np.ndarray = MIXTURE_MEANS, covs: np.ndarray = MIXTURE_COVS):
        self.means = np.asarray(means, dtype=np.float64)
        self.covs = np.asarray(covs, dtype=np.float64)
        self.chols = np.linalg.cholesky(self.covs)

    @property
    def n_classes(self) -> int:
        return len(self.means)

    def sample(self, rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
        noise = rng.standard_normal((len(labels), 2))
        return self.means[labels] + np.einsum("nij,nj->ni", self.chols[labels], noise)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> PolicyBatch:
        labels = rng.integers(0, self.n_classes, size=batch_size)
        actions = self.sample(rng, labels)
        return PolicyBatch(
            observation=Observation(proprio=torch.from_numpy(one_hot(labels, self.n_classes))),
            actions=torch.from_numpy(actions.astype(np.float32))[:, None, :],
        )


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixture_policy_config(**overrides) -> PolicyConfig:
    defaults = dict(
        chunk_size=1,
        action_dim=2,
        proprio_dim=2,
        lr=1e-3,
        steps=2000,
        batch_size=128,
        proprio_dropout=0.0,
    )
    defaults.update(overrides)
    return PolicyConfig(**defaults)


def class_moments(policy: FlowPolicy, label: int, n_classes: int, n_samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and covariance of the policy's actions for one class."""
    proprio = torch.from_numpy(one_hot(np.full(n_samples, label), n_classes))
    samples = euler_sample(policy, Observation(proprio=proprio), seed=seed)[:, 0].double().numpy()
    return samples.mean(axis=0), np.cov(samples, rowvar=False)


def render_blob(
    center: np.ndarray,
    side: int,
    sigma: float,
    rng: np.random.Generator,
    noise: float = 0.05,
) -> np.ndarray:
    ys, xs = np.mgrid[0:side, 0:side]
    cx, cy = center[0] * side, center[1] * side
    blob = np.exp(-(((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2) / (2.0 * sigma**2)))
    base = noise * rng.random((side, side, 1))
    color = np.array([1.0, 0.9, 0.3])
    image = base + (1.0 - noise) * blob[..., None] * color
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def blob_dataset(
    n: int,
    seed: int,
    side: int = FOVEATED_CANVAS // 4,
    sigma: float | None = None,
    margin: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """(images (n, side, side, 3), gazes (n, 2)); gaze = blob centroid."""
    rng = np.random.default_rng(seed)
    sigma = side / 36.0 if sigma is None else sigma
    gazes = rng.uniform(margin, 1.0 - margin, size=(n, 2))
    images = np.stack([render_blob(g, side, sigma, rng) for g in gazes])
    return images, gazes.astype(np.float32)


def mae_toy_images(n: int = 8, seed: int = 0, side: int = FOVEATED_CANVAS) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:side, 0:side]
    images = []
    for _ in range(n):
        image = np.full((side, side, 3), 0.5, dtype=np.float64)
        for _ in range(3):
            cx, cy = rng.uniform(0.2, 0.8, size=2) * side
            radius = rng.uniform(0.08, 0.2) * side
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
            image[mask] = rng.uniform(0.0, 1.0, size=3)
        images.append(image.astype(np.float32))
    return np.stack(images)


class PolicyVariant(str, Enum):
    FINE = "fine"
    COARSE = "coarse"
    FOV_ACT = "fov-act"
    FOV_UNET = "fov-unet"

    @classmethod
    def parse(cls, value: "PolicyVariant | str") -> "PolicyVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            options = ", ".join(v.value for v in cls)
            raise ValueError(f"Unknown policy variant: {value!r} (expected one of: {options})") from None

    @property
    def pattern(self) -> PatternKind:
        if self is PolicyVariant.FINE:
            return PatternKind.FINE
        if self is PolicyVariant.COARSE:
            return PatternKind.COARSE
        return PatternKind.FOVEATED

    @property
    def gaze_in_proprio(self) -> bool:
        return self in (PolicyVariant.FOV_ACT, PolicyVariant.FOV_UNET)

    @property
    def gaze_in_actions(self) -> bool:
        return self is PolicyVariant.FOV_ACT


@dataclass(frozen=True)
class ReachConfig:
    episode_length: int = 40
    gain: float = 0.2
    max_speed: float = 0.05
    gaze_lead: float = 0.5
    target_radius: int = 4
    agent_radius: int = 7
    canvas: int = FOVEATED_CANVAS


@dataclass
class ReachEpisode:
    target: np.ndarray
    positions: np.ndarray
    actions: np.ndarray
    gazes: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def scripted_action(position: np.ndarray, target: np.ndarray, config: ReachConfig) -> np.ndarray:
    step = config.gain * (target - position)
    speed = np.linalg.norm(step)
    if speed > config.max_speed:
        step = step * (config.max_speed / speed)
    return step


def scripted_gaze(previous: np.ndarray, target: np.ndarray, config: ReachConfig) -> np.ndarray:
    return previous + config.gaze_lead * (target - previous)


def rollout_scripted(start: np.ndarray, target: np.ndarray, config: ReachConfig) -> ReachEpisode:
    positions = [np.asarray(start, dtype=np.float64)]
    actions, gazes = [], []
    gaze = GazePoint.center().as_array()
    for _ in range(config.episode_length):
        gaze = scripted_gaze(gaze, target, config)
        action = scripted_action(positions[-1], target, config)
        gazes.append(gaze)
        actions.append(action)
        positions.append(np.clip(positions[-1] + action, 0.0, 1.0))
    return ReachEpisode(
        target=np.asarray(target, dtype=np.float64),
        positions=np.array(positions),
        actions=np.array(actions),
        gazes=np.array(gazes),
    )


def sample_reach_starts(rng: np.random.Generator, n: int, min_distance: float = 0.25) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    while len(out) < n:
        start = rng.uniform(0.15, 0.85, size=2)
        target = rng.uniform(0.1, 0.9, size=2)
        if np.linalg.norm(target - start) >= min_distance:
            out.append((start, target))
    return out


def reach_episodes(n: int, seed: int, config: ReachConfig | None = None) -> list[ReachEpisode]:
    config = config or ReachConfig()
    return [rollout_scripted(s, t, config) for s, t in sample_reach_starts(np.random.default_rng(seed), n)]


def render_reach(position: np.ndarray, target: np.ndarray, config: ReachConfig) -> np.ndarray:
    side = config.canvas
    ys, xs = np.mgrid[0:side, 0:side] + 0.5
    image = np.empty((side, side, 3), dtype=np.float32)
    image[...] = (0.12, 0.12, 0.16)
    ax, ay = position * side
    image[(xs - ax) ** 2 + (ys - ay) ** 2 <= config.agent_radius**2] = (0.2, 0.8, 0.3)
    tx, ty = target * side
    image[(xs - tx) ** 2 + (ys - ty) ** 2 <= config.target_radius**2] = (1.0, 0.2, 0.2)
    return image


def _chunk(rows: np.ndarray, start: int, k: int, pad: np.ndarray) -> np.ndarray:
    out = rows[start : start + k]
    if len(out) < k:
        out = np.concatenate([out, np.repeat(pad[None], k - len(out), axis=0)])
    return out


def variant_observation(
    variant: PolicyVariant,
    image: np.ndarray,
    position: np.ndarray,
    gaze: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """(token pixels (n, E), proprio) for one frame."""
    if variant.gaze_in_proprio:
        point = GazePoint.from_array(gaze)
        tokens = tokenize_any(image, variant.pattern, point)
        proprio = np.concatenate([position, point.as_array()])
    else:
        tokens = tokenize_any(image, variant.pattern)
        proprio = np.asarray(position)
    return tokens.flat(), proprio.astype(np.float32)


class ReachDataset:
    """Frames sampled uniformly over (episode, step); rendered per batch."""

    def __init__(
        self,
        episodes: list[ReachEpisode],
        variant: PolicyVariant | str,
        chunk_size: int = 16,
        config: ReachConfig | None = None,
    ):
        if not episodes:
            raise ValueError("ReachDataset needs at least one episode")
        self.episodes = episodes
        self.variant = PolicyVariant.parse(variant)
        self.chunk_size = chunk_size
        self.config = config or ReachConfig()

    def fovea_gaze(self, episode: ReachEpisode, t: int) -> np.ndarray:
        # gaze-as-action foveates where the previous step looked
        if self.variant is PolicyVariant.FOV_ACT:
            return episode.gazes[t - 1] if t > 0 else GazePoint.center().as_array()
        return episode.gazes[t]

    def item(self, episode: ReachEpisode, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        image = render_reach(episode.positions[t], episode.target, self.config)
        pixels, proprio = variant_observation(self.variant, image, episode.positions[t], self.fovea_gaze(episode, t))
        actions = _chunk(episode.actions, t, self.chunk_size, np.zeros(2))
        if self.variant.gaze_in_actions:
            gazes = _chunk(episode.gazes, t, self.chunk_size, episode.gazes[-1])
            actions = np.concatenate([actions, gazes], axis=1)
        return pixels, proprio, actions.astype(np.float32)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> PolicyBatch:
        picks = rng.integers(0, len(self.episodes), size=batch_size)
        steps = rng.integers(0, self.config.episode_length, size=batch_size)
        items = [self.item(self.episodes[e], int(t)) for e, t in zip(picks, steps)]
        pixels, proprio, actions = (np.stack(column) for column in zip(*items))
        return PolicyBatch(
            observation=Observation(proprio=torch.from_numpy(proprio), pixels=torch.from_numpy(pixels)),
            actions=torch.from_numpy(actions),
        )

    def gaze_training_set(self, factor: int = 4) -> tuple[np.ndarray, np.ndarray]:
        """Downscaled frames with their scripted gaze, for the two-stage predictor."""
        images, gazes = [], []
        for episode in self.episodes:
            for t in range(len(episode)):
                frame = render_reach(episode.positions[t], episode.target, self.config)
                images.append(downscale_image(frame, factor))
                gazes.append(episode.gazes[t])
        return np.stack(images), np.clip(np.array(gazes, dtype=np.float32), 0.0, 1.0)


def variant_policy_config(
    variant: PolicyVariant | str,
    base: PolicyConfig,
    encoder: EncoderConfig | None = None,
) -> tuple[PolicyConfig, EncoderConfig]:
    """Policy and encoder configs for one variant.

    `encoder` carries the ViT and Q-Former settings; its token geometry is
    replaced by the variant's pattern and its query count by the policy's
    image token count. Without it a desk encoder as wide as the policy is used.
    """
    variant = PolicyVariant.parse(variant)
    policy = replace(
        base,
        action_dim=4 if variant.gaze_in_actions else 2,
        proprio_dim=4 if variant.gaze_in_proprio else 2,
    )
    if encoder is None:
        encoder = EncoderConfig.desk(variant.pattern, dim=base.dim, heads=base.heads)
    pattern = build_pattern(variant.pattern)
    encoder = replace(encoder, embed_input=pattern.embed_input, n_slots=pattern.n_tokens, n_queries=base.n_img_tokens)
    return policy, encoder


@dataclass
class ClosedLoopResult:
    final_distance: float
    gaze_error: float | None
    steps: int


def run_closed_loop(
    policy: FlowPolicy,
    variant: PolicyVariant | str,
    start: np.ndarray,
    target: np.ndarray,
    config: ReachConfig | None = None,
    predictor: GazePredictor | None = None,
    seed: int = 0,
) -> ClosedLoopResult:
    """Query every step, fuse chunks with the temporal ensemble, step the point agent."""
    variant = PolicyVariant.parse(variant)
    config = config or ReachConfig()
    if variant is PolicyVariant.FOV_UNET and predictor is None:
        raise ValueError("The fov-unet variant needs a gaze predictor")
    policy.eval()
    buffer = EnsembleBuffer(chunk_size=policy.config.chunk_size, m=policy.config.ensemble_m)
    history = GazeHistory()
    position = np.asarray(start, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    reference_gaze = GazePoint.center().as_array()
    gaze_errors = []

    for t in range(config.episode_length):
        image = render_reach(position, target, config)
        reference_gaze = scripted_gaze(reference_gaze, target, config)
        if variant is PolicyVariant.FOV_ACT:
            step = gaze_as_action_step(image, history, policy, position, seed=seed + t)
            chunk = step.actions
            gaze_errors.append(np.linalg.norm(step.gaze_trajectory[0] - reference_gaze))
        elif variant is PolicyVariant.FOV_UNET:
            step = two_stage_step(image, predictor, policy, position, seed=seed + t)
            chunk = step.actions
            gaze_errors.append(np.linalg.norm(step.gaze.as_array() - reference_gaze))
        else:
            pixels, proprio = variant_observation(variant, image, position, None)
            observation = Observation(proprio=torch.from_numpy(proprio)[None], pixels=torch.from_numpy(pixels)[None])
            chunk = euler_sample(policy, observation, seed=seed + t)[0].numpy()
        buffer.push(chunk, t)
        action = temporal_ensemble(buffer, t)
        position = np.clip(position + action, 0.0, 1.0)

    return ClosedLoopResult(
        final_distance=float(np.linalg.norm(position - target)),
        gaze_error=float(np.mean(gaze_errors)) if gaze_errors else None,
        steps=config.episode_length,
    )


def open_loop_gaze_error(policy: FlowPolicy, dataset: ReachDataset, n_frames: int, seed: int = 0) -> float:
    """Mean error of the first predicted gaze against the scripted gaze, on recorded observations."""
    if not dataset.variant.gaze_in_actions:
        raise ValueError("Open-loop gaze error needs a gaze-as-action dataset")
    rng = np.random.default_rng(seed)
    batch = dataset.sample_batch(rng, n_frames)
    predicted = euler_sample(policy, batch.observation, seed=seed)[:, 0, -2:].numpy()
    target = batch.actions[:, 0, -2:].numpy()
    return float(np.linalg.norm(predicted - target, axis=1).mean())
