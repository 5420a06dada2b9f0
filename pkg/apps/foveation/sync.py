"""
Frame/gaze stream synchronization and the episode container.

Every frame sent to the operator carries a unique integer ID; each gaze sample
comes back tagged with the ID of the frame it was observed on. Alignment is
therefore keyed by frame ID only, never by arrival time, and frames that never
got a sample are filled by linear interpolation over the frame index (held
constant outside the labeled span).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from apps.foveation.errors import EpisodeFormatError, ShapeMismatchError
from apps.foveation.fovea import GazePoint
from apps.foveation.imaging import read_png, write_png

logger = logging.getLogger(__name__)

RECORD_FPS = 25.0
EPISODE_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
COLUMNS_NAME = "columns.bin"
JITTER_KINDS = ("none", "uniform", "exponential")

GazeSource = Callable[[float], tuple[GazePoint, GazePoint]]


class Provenance(str, Enum):
    MEASURED = "measured"
    INTERPOLATED = "interpolated"


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    t_emit: float
    image_ref: str | None = None


@dataclass(frozen=True)
class GazeSample:
    frame_id: int
    left: GazePoint
    right: GazePoint
    t_arrive: float


@dataclass(frozen=True)
class LatencyModel:
    base_delay: float = 0.0
    jitter: str = "none"
    jitter_scale: float = 0.0
    drop_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.base_delay < 0 or self.jitter_scale < 0:
            raise ValueError("Latency delays must be nonnegative")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")
        if self.jitter not in JITTER_KINDS:
            raise ValueError(f"Unknown jitter kind {self.jitter!r} (expected one of: {', '.join(JITTER_KINDS)})")

    def draw_delay(self, rng: np.random.Generator) -> float:
        if self.jitter == "uniform":
            return self.base_delay + rng.uniform(0.0, self.jitter_scale)
        if self.jitter == "exponential":
            return self.base_delay + (rng.exponential(self.jitter_scale) if self.jitter_scale > 0 else 0.0)
        return self.base_delay


@dataclass
class AlignedGaze:
    """Gaze column for an episode: (n_frames, 2) per eye plus provenance."""

    frame_ids: np.ndarray
    left: np.ndarray
    right: np.ndarray
    provenance: list[Provenance]

    def __len__(self) -> int:
        return len(self.frame_ids)

    @property
    def measured_mask(self) -> np.ndarray:
        return np.array([p is Provenance.MEASURED for p in self.provenance], dtype=bool)

    def merged(self) -> np.ndarray:
        return (self.left + self.right) / 2.0


def make_frames(n_frames: int, fps: float = RECORD_FPS, start_id: int = 0) -> list[FrameRecord]:
    return [FrameRecord(frame_id=start_id + i, t_emit=i / fps) for i in range(n_frames)]


def _check_frames(frames: list[FrameRecord]) -> None:
    for prev, cur in zip(frames, frames[1:]):
        if cur.frame_id <= prev.frame_id:
            raise ValueError(f"Frame IDs must be strictly increasing ({prev.frame_id} -> {cur.frame_id})")
        if cur.t_emit < prev.t_emit:
            raise ValueError(f"Frame emission times must be nondecreasing at frame {cur.frame_id}")


def align_gaze(frames: list[FrameRecord], samples: list[GazeSample]) -> AlignedGaze:
    if not frames:
        raise ValueError("Cannot align gaze for an empty frame list")
    if not samples:
        raise EpisodeFormatError("Episode has no gaze samples at all; rejecting it")
    _check_frames(frames)
    frame_ids = np.array([f.frame_id for f in frames], dtype=np.int64)
    known = set(frame_ids.tolist())

    # out-of-order arrivals are fine; the first sample to arrive for an ID wins
    by_id: dict[int, GazeSample] = {}
    for sample in sorted(samples, key=lambda s: (s.frame_id, s.t_arrive)):
        if sample.frame_id not in known:
            raise ValueError(f"Gaze sample references unknown frame {sample.frame_id}")
        by_id.setdefault(sample.frame_id, sample)

    labeled = np.array(sorted(by_id), dtype=np.int64)
    index_of = {fid: i for i, fid in enumerate(frame_ids.tolist())}
    label_pos = np.array([index_of[fid] for fid in labeled], dtype=np.float64)
    positions = np.arange(len(frame_ids), dtype=np.float64)

    def column(eye: str) -> np.ndarray:
        values = np.array([getattr(by_id[fid], eye).as_array() for fid in labeled], dtype=np.float64)
        # np.interp holds the end values outside the labeled span
        out = np.stack([np.interp(positions, label_pos, values[:, axis]) for axis in range(2)], axis=1)
        out[label_pos.astype(np.int64)] = values
        return out

    provenance = [Provenance.MEASURED if fid in by_id else Provenance.INTERPOLATED for fid in frame_ids.tolist()]
    return AlignedGaze(frame_ids=frame_ids, left=column("left"), right=column("right"), provenance=provenance)


def simulate_stream(
    frames: list[FrameRecord],
    gaze_source: GazeSource,
    latency: LatencyModel,
    seed: int = 0,
) -> list[GazeSample]:
    """Samples in arrival order, each tagged with the frame it was observed on."""
    rng = np.random.default_rng(seed)
    samples = []
    for frame in frames:
        delay = latency.draw_delay(rng)
        if rng.random() < latency.drop_prob:
            continue
        left, right = gaze_source(frame.t_emit)
        samples.append(GazeSample(frame.frame_id, left, right, t_arrive=frame.t_emit + delay))
    samples.sort(key=lambda s: s.t_arrive)
    return samples


def sinusoid_gaze(
    freq_hz: float = 0.5,
    amplitude: float = 0.05,
    center: tuple[float, float] = (0.5, 0.5),
    vergence: float = 0.01,
) -> GazeSource:
    """Smooth analytic gaze: x and y oscillate in quadrature, eyes offset horizontally."""
    omega = 2.0 * math.pi * freq_hz

    def source(t: float) -> tuple[GazePoint, GazePoint]:
        x = center[0] + amplitude * math.sin(omega * t)
        y = center[1] + amplitude * math.cos(omega * t)
        return GazePoint(x - vergence, y), GazePoint(x + vergence, y)

    return source


def true_gaze(frames: list[FrameRecord], gaze_source: GazeSource) -> tuple[np.ndarray, np.ndarray]:
    pairs = [gaze_source(f.t_emit) for f in frames]
    left = np.array([l.as_array() for l, _ in pairs], dtype=np.float64)
    right = np.array([r.as_array() for _, r in pairs], dtype=np.float64)
    return left, right


def alignment_error(
    aligned: AlignedGaze,
    left: np.ndarray,
    right: np.ndarray,
    within_span: bool = False,
) -> tuple[float, float]:
    """(max, mean) absolute error over both coordinates of both eyes.

    With `within_span`, frames before the first or after the last measured frame
    (the held values) are left out, so only interpolated gaps count.
    """
    diff = np.abs(np.concatenate([aligned.left - left, aligned.right - right], axis=1))
    if within_span:
        measured = np.flatnonzero(aligned.measured_mask)
        diff = diff[measured[0] : measured[-1] + 1]
    return float(diff.max()), float(diff.mean())


def decimate(samples: list[GazeSample], gap: int) -> list[GazeSample]:
    """Keep only samples whose frame ID is a multiple of `gap`."""
    if gap < 1:
        raise ValueError("gap must be at least 1")
    return [s for s in samples if s.frame_id % gap == 0]


@dataclass
class SyncReport:
    max_error: float
    mean_error: float
    max_error_with_hold: float
    n_frames: int
    n_samples: int
    gap_errors: pd.DataFrame
    aligned: AlignedGaze = field(repr=False)


def sinusoid_benchmark(
    latency: LatencyModel,
    seconds: float = 4.0,
    fps: float = RECORD_FPS,
    freq_hz: float = 0.5,
    amplitude: float = 0.05,
    gaps: tuple[int, ...] = (1, 2, 4, 8),
    seed: int = 0,
) -> SyncReport:
    frames = make_frames(int(round(seconds * fps)), fps)
    source = sinusoid_gaze(freq_hz, amplitude)
    left, right = true_gaze(frames, source)

    samples = simulate_stream(frames, source, latency, seed=seed)
    aligned = align_gaze(frames, samples)
    max_err, mean_err = alignment_error(aligned, left, right, within_span=True)
    hold_err, _ = alignment_error(aligned, left, right)
    logger.info("sync benchmark: %d/%d samples delivered, max err %.5f", len(samples), len(frames), max_err)

    # gap breakdown runs on the loss-free stream so only the gap size varies
    complete = simulate_stream(frames, source, LatencyModel(base_delay=latency.base_delay), seed=seed)
    rows = []
    for gap in gaps:
        gap_max, gap_mean = alignment_error(align_gaze(frames, decimate(complete, gap)), left, right, within_span=True)
        rows.append({"gap": gap, "max_error": gap_max, "mean_error": gap_mean})
    return SyncReport(
        max_error=max_err,
        mean_error=mean_err,
        max_error_with_hold=hold_err,
        n_frames=len(frames),
        n_samples=len(samples),
        gap_errors=pd.DataFrame(rows, columns=["gap", "max_error", "mean_error"]),
        aligned=aligned,
    )


@dataclass
class EpisodeLog:
    """Per-frame rows of one recorded episode; gaze is always filled."""

    frame_ids: np.ndarray
    joints: np.ndarray
    actions: np.ndarray
    gaze_left: np.ndarray
    gaze_right: np.ndarray
    provenance: list[Provenance]
    images: list[np.ndarray] | None = None
    fps: float = RECORD_FPS

    def __post_init__(self) -> None:
        n = len(self.frame_ids)
        for name in ("joints", "actions", "gaze_left", "gaze_right"):
            value = getattr(self, name)
            if value.ndim != 2 or len(value) != n:
                raise ShapeMismatchError(f"Column {name} has shape {value.shape} for {n} frames")
        if len(self.provenance) != n or (self.images is not None and len(self.images) != n):
            raise ShapeMismatchError("Provenance and image columns must cover every frame")
        if n and not np.array_equal(self.frame_ids, np.arange(self.frame_ids[0], self.frame_ids[0] + n)):
            raise EpisodeFormatError("Episode frame IDs must form a gap-free increasing range")

    def __len__(self) -> int:
        return len(self.frame_ids)

    def numeric_columns(self) -> dict[str, np.ndarray]:
        return {
            "frame_id": self.frame_ids.astype("<i8").reshape(-1, 1),
            "joints": self.joints.astype("<f8"),
            "actions": self.actions.astype("<f8"),
            "gaze_left": self.gaze_left.astype("<f8"),
            "gaze_right": self.gaze_right.astype("<f8"),
            "measured": np.array([p is Provenance.MEASURED for p in self.provenance], dtype="<u1").reshape(-1, 1),
        }


def record_episode(
    frames: list[FrameRecord],
    aligned: AlignedGaze,
    joints: np.ndarray,
    actions: np.ndarray,
    images: list[np.ndarray] | None = None,
    fps: float = RECORD_FPS,
) -> EpisodeLog:
    joints = np.asarray(joints, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    n = len(frames)
    if len(aligned) != n or len(joints) != n or len(actions) != n:
        raise ShapeMismatchError(
            f"Column lengths differ: frames={n} gaze={len(aligned)} joints={len(joints)} actions={len(actions)}"
        )
    return EpisodeLog(
        frame_ids=aligned.frame_ids.copy(),
        joints=joints.reshape(n, -1),
        actions=actions.reshape(n, -1),
        gaze_left=aligned.left.copy(),
        gaze_right=aligned.right.copy(),
        provenance=list(aligned.provenance),
        images=images,
        fps=fps,
    )


def write_episode(episode: EpisodeLog, out_dir: Path) -> Path:
    """Directory container: manifest.json, little-endian columns.bin, {frame_id:06d}.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = episode.numeric_columns()
    specs = []
    with (out_dir / COLUMNS_NAME).open("wb") as handle:
        for name, values in columns.items():
            handle.write(np.ascontiguousarray(values).tobytes())
            specs.append({"name": name, "dtype": values.dtype.str, "width": int(values.shape[1])})

    image_files = None
    if episode.images is not None:
        image_files = []
        for fid, image in zip(episode.frame_ids.tolist(), episode.images):
            name = f"{fid:06d}.png"
            write_png(image, out_dir / name)
            image_files.append(name)

    manifest = {
        "schema_version": EPISODE_SCHEMA_VERSION,
        "fps": episode.fps,
        "rows": len(episode),
        "byte_order": "little",
        "columns": specs,
        "images": image_files,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return out_dir


def read_episode(path: Path) -> EpisodeLog:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"Missing episode manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        rows = int(manifest["rows"])
        specs = manifest["columns"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise EpisodeFormatError(f"Malformed episode manifest {manifest_path}: {exc}") from exc
    if manifest.get("schema_version") != EPISODE_SCHEMA_VERSION:
        raise EpisodeFormatError(f"Unsupported episode schema version: {manifest.get('schema_version')!r}")

    raw = (path / COLUMNS_NAME).read_bytes()
    columns: dict[str, np.ndarray] = {}
    offset = 0
    for spec in specs:
        dtype = np.dtype(spec["dtype"])
        count = rows * int(spec["width"])
        end = offset + count * dtype.itemsize
        if end > len(raw):
            raise EpisodeFormatError(f"{COLUMNS_NAME} is truncated in column {spec['name']!r}")
        columns[spec["name"]] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(rows, -1).copy()
        offset = end
    if offset != len(raw):
        raise EpisodeFormatError(f"{COLUMNS_NAME} has {len(raw) - offset} trailing bytes")
    missing = {"frame_id", "joints", "actions", "gaze_left", "gaze_right", "measured"} - set(columns)
    if missing:
        raise EpisodeFormatError(f"Episode is missing columns: {sorted(missing)}")

    images = None
    if manifest.get("images"):
        images = [read_png(path / name) for name in manifest["images"]]

    return EpisodeLog(
        frame_ids=columns["frame_id"][:, 0],
        joints=columns["joints"],
        actions=columns["actions"],
        gaze_left=columns["gaze_left"],
        gaze_right=columns["gaze_right"],
        provenance=[Provenance.MEASURED if m else Provenance.INTERPOLATED for m in columns["measured"][:, 0]],
        images=images,
        fps=float(manifest.get("fps", RECORD_FPS)),
    )
