"""
Vision Transformer observation encoder and Q-Former.

Token pixels arrive as (batch, n, embed_input) tensors, one row per patch of a
TokenizationPattern in pattern order. Positional embeddings are a learned
per-slot table indexed by that order, so a foveated slot always means the same
gaze-relative location.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from apps.foveation.errors import NonFiniteError, ShapeMismatchError
from apps.foveation.fovea import PatternKind, TokenizedImage, build_pattern

QFORMER_QUERIES = 16


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    embed_input: int = 768
    n_slots: int = 20
    qformer_depth: int = 1
    n_queries: int = QFORMER_QUERIES

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim ({self.dim}) must be divisible by heads ({self.heads})")
        for name in ("depth", "dim", "heads", "embed_input", "n_slots", "n_queries"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def mlp_hidden(self) -> int:
        return int(self.mlp_ratio * self.dim)

    @property
    def token_geometry(self) -> tuple[int, int]:
        return self.embed_input, self.n_slots

    def vit_fields(self) -> tuple:
        """Fields that shape the ViT weights; the Q-Former settings are left out."""
        return self.depth, self.dim, self.heads, self.mlp_ratio, self.embed_input, self.n_slots

    @classmethod
    def desk(cls, kind: PatternKind | str = PatternKind.FOVEATED, **overrides) -> "EncoderConfig":
        pattern = build_pattern(kind)
        base = cls(depth=2, dim=64, heads=4, embed_input=pattern.embed_input, n_slots=pattern.n_tokens)
        return replace(base, **overrides)

    @classmethod
    def vit_base(cls, kind: PatternKind | str = PatternKind.FOVEATED) -> "EncoderConfig":
        pattern = build_pattern(kind)
        return cls(depth=12, dim=768, heads=12, mlp_ratio=4.0, embed_input=pattern.embed_input, n_slots=pattern.n_tokens)


def init_weights(module: nn.Module) -> None:
    """Truncated-normal (std 0.02) projections, zero biases, unit LayerNorm."""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm) and module.elementwise_affine:
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def scaled_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scale = q.shape[-1] ** -0.5
    weights = torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)
    return weights @ v


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        out = scaled_attention(*(_split_heads(t, self.heads) for t in (q, k, v)))
        return self.proj(_merge_heads(out))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(context_dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        k, v = self.kv(context).chunk(2, dim=-1)
        q = _split_heads(self.q(x), self.heads)
        out = scaled_attention(q, _split_heads(k, self.heads), _split_heads(v, self.heads))
        return self.proj(_merge_heads(out))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU(approximate="tanh")
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))

    def residual_projections(self) -> list[nn.Linear]:
        return [self.attn.proj, self.mlp.fc2]


class PatchEmbed(nn.Module):
    def __init__(self, embed_input: int, dim: int, n_slots: int):
        super().__init__()
        self.embed_input = embed_input
        self.proj = nn.Linear(embed_input, dim)
        self.pos_embed = nn.Parameter(torch.zeros(n_slots, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, pixels: torch.Tensor, slots: torch.Tensor | None = None) -> torch.Tensor:
        if pixels.shape[-1] != self.embed_input:
            raise ShapeMismatchError(
                f"Patch embed expects {self.embed_input} values per token, got {pixels.shape[-1]}"
            )
        if slots is None:
            if pixels.shape[1] != self.pos_embed.shape[0]:
                raise ShapeMismatchError(
                    f"Got {pixels.shape[1]} tokens for a {self.pos_embed.shape[0]}-slot positional table"
                )
            pos = self.pos_embed.unsqueeze(0)
        else:
            pos = self.pos_embed[slots]
        return self.proj(pixels) + pos


class VisionTransformer(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config.embed_input, config.dim, config.n_slots)
        self.blocks = nn.ModuleList(Block(config.dim, config.heads, config.mlp_hidden) for _ in range(config.depth))
        self.apply(init_weights)

    def forward_blocks(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.dim:
            raise ShapeMismatchError(f"Sequence width {x.shape[-1]} != encoder dim {self.config.dim}")
        if not torch.isfinite(x).all():
            raise NonFiniteError("ViT input contains non-finite values")
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, pixels: torch.Tensor, slots: torch.Tensor | None = None) -> torch.Tensor:
        return self.forward_blocks(self.patch_embed(pixels, slots))


class QFormerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross = CrossAttention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_hidden)

    def forward(self, queries: torch.Tensor, seq: torch.Tensor) -> torch.Tensor:
        queries = queries + self.cross(self.norm_q(queries), self.norm_kv(seq))
        return queries + self.mlp(self.norm_mlp(queries))


class QFormer(nn.Module):
    """Learned queries that cross-attend to a token sequence of any length."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.queries = nn.Parameter(torch.zeros(config.n_queries, config.dim))
        self.blocks = nn.ModuleList(
            QFormerBlock(config.dim, config.heads, config.mlp_hidden) for _ in range(config.qformer_depth)
        )
        self.apply(init_weights)
        nn.init.trunc_normal_(self.queries, std=0.02)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        if seq.shape[1] == 0:
            raise ShapeMismatchError("Q-Former needs a nonempty token sequence")
        queries = self.queries.unsqueeze(0).expand(seq.shape[0], -1, -1)
        for block in self.blocks:
            queries = block(queries, seq)
        return queries


class ObservationEncoder(nn.Module):
    """Tokenized image -> ViT -> Q-Former -> c_img (batch, 16, dim)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.vit = VisionTransformer(config)
        self.qformer = QFormer(config)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.qformer(self.vit(pixels))


def token_pixels(tokens: TokenizedImage | list[TokenizedImage]) -> torch.Tensor:
    """Stack tokenized images into a (batch, n, embed_input) float32 tensor."""
    items = [tokens] if isinstance(tokens, TokenizedImage) else list(tokens)
    return torch.from_numpy(np.stack([item.flat() for item in items]))


def patch_embed(tokens: TokenizedImage, embed: PatchEmbed) -> torch.Tensor:
    return embed(token_pixels(tokens))[0]
