"""
Analytic MAC accounting for the ViT encoder.

One multiply-accumulate is counted as one FLOP, which matches the magnitudes
usually reported for ViT-B at batch 64.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import pandas as pd
import torch

from apps.foveation.encoder import EncoderConfig, VisionTransformer
from apps.foveation.fovea import PatternKind, build_pattern

FLOPS_COLUMNS = ["pattern", "tokens", "embed_input", "patch_embed_macs", "attention_macs", "mlp_macs", "total_macs", "batch", "gflops"]

PRESETS = {
    "vit-b": EncoderConfig.vit_base,
    "desk": EncoderConfig.desk,
}


@dataclass(frozen=True)
class FlopsReport:
    patch_embed_macs: int
    attention_macs: int
    mlp_macs: int
    total_macs: int
    batch: int

    @property
    def gflops(self) -> float:
        return self.total_macs * self.batch / 1e9


def count_flops(config: EncoderConfig, n_tokens: int, embed_input: int, batch: int) -> FlopsReport:
    if n_tokens <= 0 or embed_input <= 0 or batch <= 0:
        raise ValueError("n_tokens, embed_input and batch must be positive")
    n, d = n_tokens, config.dim
    patch_embed = n * embed_input * d
    # QKV + output projections, then scores and the weighted sum
    attention = config.depth * (4 * n * d * d + 2 * n * n * d)
    mlp = config.depth * (2 * n * d * config.mlp_hidden)
    return FlopsReport(
        patch_embed_macs=patch_embed,
        attention_macs=attention,
        mlp_macs=mlp,
        total_macs=patch_embed + attention + mlp,
        batch=batch,
    )


def count_pattern_flops(kind: PatternKind | str, batch: int, preset: str = "vit-b") -> FlopsReport:
    pattern = build_pattern(kind)
    config = resolve_preset(preset, pattern.kind)
    return count_flops(config, pattern.n_tokens, pattern.embed_input, batch)


def resolve_preset(preset: str, kind: PatternKind | str) -> EncoderConfig:
    factory = PRESETS.get(str(preset).strip().lower())
    if factory is None:
        raise ValueError(f"Unknown encoder preset: {preset!r} (expected one of: {', '.join(PRESETS)})")
    return factory(kind)


def flops_table(batch: int = 64, preset: str = "vit-b") -> pd.DataFrame:
    rows = []
    for kind in (PatternKind.FINE, PatternKind.COARSE, PatternKind.FOVEATED):
        pattern = build_pattern(kind)
        report = count_pattern_flops(kind, batch, preset)
        rows.append(
            {
                "pattern": kind.value,
                "tokens": pattern.n_tokens,
                "embed_input": pattern.embed_input,
                **asdict(report),
                "gflops": report.gflops,
            }
        )
    return pd.DataFrame(rows, columns=FLOPS_COLUMNS)


def time_forward(
    kind: PatternKind | str,
    batch: int = 32,
    repeats: int = 3,
    seed: int = 0,
    **overrides,
) -> float:
    """Best-of-`repeats` wall time (ms) of one ViT forward pass on random tokens."""
    pattern = build_pattern(kind)
    config = EncoderConfig.desk(pattern.kind, **overrides)
    torch.manual_seed(seed)
    model = VisionTransformer(config).eval()
    pixels = torch.rand(batch, pattern.n_tokens, pattern.embed_input)
    best = float("inf")
    with torch.no_grad():
        model(pixels)
        for _ in range(repeats):
            started = time.perf_counter()
            model(pixels)
            best = min(best, (time.perf_counter() - started) * 1000.0)
    return best


def timing_table(batch: int = 32, repeats: int = 3, **overrides) -> pd.DataFrame:
    rows = []
    for kind in (PatternKind.FINE, PatternKind.COARSE, PatternKind.FOVEATED):
        rows.append(
            {
                "pattern": kind.value,
                "tokens": build_pattern(kind).n_tokens,
                "batch": batch,
                "forward_ms": time_forward(kind, batch, repeats, **overrides),
            }
        )
    return pd.DataFrame(rows)
