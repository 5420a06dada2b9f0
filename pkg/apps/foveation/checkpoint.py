"""
Named-tensor checkpoints: one .npz entry per state-dict tensor plus a JSON
`__meta__` entry (format version, model kind, constructor configuration).
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from apps.foveation.encoder import EncoderConfig
from apps.foveation.errors import EpisodeFormatError
from apps.foveation.gaze import GazePredictor, GazePredictorConfig
from apps.foveation.mae import MaeConfig, MaskedAutoencoder
from apps.foveation.policy import FlowPolicy, PolicyConfig

CHECKPOINT_VERSION = 1
META_KEY = "__meta__"


def save_checkpoint(path: Path, module: nn.Module | dict, kind: str, config: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = module if isinstance(module, dict) else module.state_dict()
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in state.items()}
    if META_KEY in arrays:
        raise ValueError(f"State dict may not contain the reserved key {META_KEY!r}")
    meta = {"version": CHECKPOINT_VERSION, "kind": kind, "config": config}
    with path.open("wb") as handle:
        np.savez(handle, **arrays, **{META_KEY: np.array(json.dumps(meta, sort_keys=True))})
    return path


def load_checkpoint(path: Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if META_KEY not in archive.files:
            raise EpisodeFormatError(f"{path} has no {META_KEY} entry; not a checkpoint")
        meta = json.loads(str(archive[META_KEY]))
        state = {name: torch.from_numpy(archive[name].copy()) for name in archive.files if name != META_KEY}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise EpisodeFormatError(f"Unsupported checkpoint version {meta.get('version')!r} in {path}")
    return state, meta


def _rebuild(cls, values: dict[str, Any]):
    known = {f.name for f in fields(cls)}
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items() if k in known}
    return cls(**kwargs)


def save_policy(path: Path, policy: FlowPolicy, state: dict | None = None) -> Path:
    config = {
        "policy": asdict(policy.config),
        "encoder": asdict(policy.encoder_config) if policy.encoder_config is not None else None,
    }
    return save_checkpoint(path, state if state is not None else policy, "policy", config)


def load_policy(path: Path) -> FlowPolicy:
    state, meta = load_checkpoint(path)
    if meta["kind"] != "policy":
        raise EpisodeFormatError(f"{path} holds a {meta['kind']!r} checkpoint, expected 'policy'")
    encoder = meta["config"].get("encoder")
    policy = FlowPolicy(
        _rebuild(PolicyConfig, meta["config"]["policy"]),
        _rebuild(EncoderConfig, encoder) if encoder is not None else None,
    )
    policy.load_state_dict(state)
    return policy.eval()


def save_gaze_predictor(path: Path, predictor: GazePredictor) -> Path:
    return save_checkpoint(path, predictor, "gaze", asdict(predictor.config))


def load_gaze_predictor(path: Path) -> GazePredictor:
    state, meta = load_checkpoint(path)
    if meta["kind"] != "gaze":
        raise EpisodeFormatError(f"{path} holds a {meta['kind']!r} checkpoint, expected 'gaze'")
    predictor = GazePredictor(_rebuild(GazePredictorConfig, meta["config"]))
    predictor.load_state_dict(state)
    return predictor.eval()


def save_mae(path: Path, model: MaskedAutoencoder, encoder: EncoderConfig, mae: MaeConfig) -> Path:
    return save_checkpoint(path, model, "mae", {"encoder": asdict(encoder), "mae": asdict(mae)})


def load_mae(path: Path) -> tuple[MaskedAutoencoder, EncoderConfig]:
    state, meta = load_checkpoint(path)
    if meta["kind"] != "mae":
        raise EpisodeFormatError(f"{path} holds a {meta['kind']!r} checkpoint, expected 'mae'")
    encoder = _rebuild(EncoderConfig, meta["config"]["encoder"])
    mae = _rebuild(MaeConfig, meta["config"]["mae"])
    model = MaskedAutoencoder(encoder, mae.decoder_config(encoder))
    model.load_state_dict(state)
    return model.eval(), encoder
