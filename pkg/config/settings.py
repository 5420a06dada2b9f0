"""
Typed run configuration loaded from INI text.

Resolution order: dataclass defaults < config file < `--set section.key=value`
overrides (and `--seed`, which sets run.seed).
"""

from __future__ import annotations

import configparser
import io
import logging
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from apps.foveation.errors import ConfigError
from config.paths import DEFAULT_CONFIG_INI, RESOLVED_CONFIG_NAME

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    log_every: int = 100


@dataclass(frozen=True)
class FoveaSettings:
    kind: str = "foveated"
    gaze_x: float = 0.5
    gaze_y: float = 0.5
    image: str = ""


@dataclass(frozen=True)
class EncoderSettings:
    preset: str = "desk"
    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    qformer_depth: int = 1
    n_queries: int = 16


@dataclass(frozen=True)
class MaeSettings:
    mask_ratio: float = 0.75
    decoder_depth: int = 1
    decoder_dim: int = 32
    decoder_heads: int = 4
    lr: float = 2e-3
    steps: int = 200
    n_images: int = 8


@dataclass(frozen=True)
class PolicySettings:
    chunk_size: int = 16
    flow_steps: int = 8
    ema_decay: float = 0.99
    ensemble_m: float = 0.01
    proprio_dropout: float = 0.1
    proprio_dropout_mode: str = "vector"
    lr: float = 1e-4
    vit_lr: float = 1e-5
    schedule: str = "cosine"
    steps: int = 2000
    batch_size: int = 64
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_every: int = 0


@dataclass(frozen=True)
class GazeSettings:
    downscale: int = 4
    grid: int = 18
    temperature: float = 1.0
    lr: float = 1e-3
    steps: int = 400
    batch_size: int = 32
    n_train: int = 512
    n_test: int = 128


@dataclass(frozen=True)
class SyncSettings:
    base_delay: float = 0.08
    jitter: str = "exponential"
    jitter_scale: float = 0.03
    drop_prob: float = 0.5
    freq_hz: float = 0.5
    amplitude: float = 0.05
    seconds: float = 4.0
    fps: float = 25.0


@dataclass(frozen=True)
class ToytrainSettings:
    task: str = "mixture2d"
    mixture_lr: float = 1e-3
    mixture_samples: int = 2000
    variants: str = "fine,coarse,fov-act,fov-unet"
    episodes: int = 64
    episode_length: int = 40
    eval_episodes: int = 4
    mae_checkpoint: str = ""


@dataclass(frozen=True)
class Settings:
    run: RunSettings = field(default_factory=RunSettings)
    fovea: FoveaSettings = field(default_factory=FoveaSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    mae: MaeSettings = field(default_factory=MaeSettings)
    policy: PolicySettings = field(default_factory=PolicySettings)
    gaze: GazeSettings = field(default_factory=GazeSettings)
    sync: SyncSettings = field(default_factory=SyncSettings)
    toytrain: ToytrainSettings = field(default_factory=ToytrainSettings)


SECTIONS: dict[str, type] = {f.name: typing.get_type_hints(Settings)[f.name] for f in fields(Settings)}


def _coerce(section: str, key: str, raw: str, kind: type):
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in {"1", "true", "yes", "on"}:
                return True
            if lowered in {"0", "false", "no", "off"}:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None


def _apply(settings: Settings, section: str, values: dict[str, str]) -> Settings:
    if section not in SECTIONS:
        raise ConfigError(f"Unknown config section [{section}] (expected one of: {', '.join(SECTIONS)})")
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    updates = {}
    for key, raw in values.items():
        if key not in hints:
            raise ConfigError(f"Unknown key {key!r} in [{section}] (expected one of: {', '.join(hints)})")
        updates[key] = _coerce(section, key, raw, hints[key])
    return replace(settings, **{section: replace(getattr(settings, section), **updates)})


def parse_ini(text: str, settings: Settings | None = None) -> Settings:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"Malformed config: {exc}") from exc
    settings = settings or Settings()
    for section in parser.sections():
        settings = _apply(settings, section, dict(parser.items(section)))
    return settings


def apply_overrides(settings: Settings, overrides: list[str] | None) -> Settings:
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"Override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        settings = _apply(settings, section, {key: value})
    return settings


def load_settings(
    path: Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> Settings:
    settings = Settings()
    path = DEFAULT_CONFIG_INI if path is None else Path(path)
    if path.exists():
        settings = parse_ini(path.read_text(encoding="utf-8"), settings)
    elif path != DEFAULT_CONFIG_INI:
        raise ConfigError(f"Config file not found: {path}")
    settings = apply_overrides(settings, overrides)
    if seed is not None:
        settings = replace(settings, run=replace(settings.run, seed=int(seed)))
    return settings


def to_ini(settings: Settings) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        parser[name] = {key: str(value) for key, value in asdict(getattr(settings, name)).items()}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def write_resolved(settings: Settings, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    text = to_ini(settings)
    path.write_text(text, encoding="utf-8")
    logger.info("Resolved configuration:\n%s", text.rstrip())
    return path
