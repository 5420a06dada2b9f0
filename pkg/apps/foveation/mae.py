"""
Masked-autoencoder machinery over tokenized images.

The encoder only ever receives the visible token rows (gathered before patch
embedding), the decoder sees the full slot sequence with a shared learned mask
token in the masked slots, and the loss is the pixel MSE over masked tokens.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from apps.foveation.encoder import Block, EncoderConfig, VisionTransformer, init_weights
from apps.foveation.errors import DivergenceError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskPlan:
    n: int
    mask_ratio: float
    visible: np.ndarray
    masked: np.ndarray


@dataclass(frozen=True)
class MaeConfig:
    mask_ratio: float = 0.75
    decoder_depth: int = 1
    decoder_dim: int = 32
    decoder_heads: int = 4
    lr: float = 2e-3
    steps: int = 200
    seed: int = 0
    log_every: int = 50

    def decoder_config(self, encoder: EncoderConfig) -> EncoderConfig:
        return EncoderConfig(
            depth=self.decoder_depth,
            dim=self.decoder_dim,
            heads=self.decoder_heads,
            mlp_ratio=encoder.mlp_ratio,
            embed_input=encoder.embed_input,
            n_slots=encoder.n_slots,
        )


def mae_mask(n: int, mask_ratio: float, seed: int) -> MaskPlan:
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    n_masked = int(math.floor(mask_ratio * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    return MaskPlan(
        n=n,
        mask_ratio=mask_ratio,
        visible=np.sort(order[n_masked:]),
        masked=np.sort(order[:n_masked]),
    )


class MaskedAutoencoder(nn.Module):
    def __init__(self, encoder: EncoderConfig, decoder: EncoderConfig):
        super().__init__()
        if decoder.n_slots != encoder.n_slots:
            raise ValueError("Encoder and decoder must share the slot count")
        self.encoder = VisionTransformer(encoder)
        self.enc_to_dec = nn.Linear(encoder.dim, decoder.dim)
        self.mask_token = nn.Parameter(torch.zeros(decoder.dim))
        self.decoder_pos = nn.Parameter(torch.zeros(decoder.n_slots, decoder.dim))
        self.decoder_blocks = nn.ModuleList(
            Block(decoder.dim, decoder.heads, decoder.mlp_hidden) for _ in range(decoder.depth)
        )
        self.decoder_norm = nn.LayerNorm(decoder.dim)
        self.head = nn.Linear(decoder.dim, encoder.embed_input)
        for module in (self.enc_to_dec, self.decoder_blocks, self.decoder_norm, self.head):
            module.apply(init_weights)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.decoder_pos, std=0.02)

    def encode_visible(self, pixels: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        visible = torch.as_tensor(plan.visible, dtype=torch.long)
        slots = visible.unsqueeze(0).expand(pixels.shape[0], -1)
        return self.encoder(pixels[:, visible], slots=slots)

    def forward(self, pixels: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        batch, n, _ = pixels.shape
        latent = self.enc_to_dec(self.encode_visible(pixels, plan))
        full = self.mask_token.to(latent.dtype).expand(batch, n, -1).clone()
        full[:, torch.as_tensor(plan.visible, dtype=torch.long)] = latent
        x = full + self.decoder_pos
        for block in self.decoder_blocks:
            x = block(x)
        return self.head(self.decoder_norm(x))


def mae_reconstruct(
    model: MaskedAutoencoder,
    pixels: torch.Tensor,
    plan: MaskPlan,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token reconstruction and the masked-token pixel MSE (0 when nothing is masked)."""
    if plan.n != pixels.shape[1] or len(plan.visible) + len(plan.masked) != plan.n:
        raise ShapeMismatchError(f"Mask plan covers {plan.n} tokens but the input has {pixels.shape[1]}")
    recon = model(pixels, plan)
    if len(plan.masked) == 0:
        return recon, recon.sum() * 0.0
    masked = torch.as_tensor(plan.masked, dtype=torch.long)
    loss = ((recon[:, masked] - pixels[:, masked]) ** 2).mean()
    return recon, loss


def train_mae(model: MaskedAutoencoder, pixels: torch.Tensor, config: MaeConfig) -> list[float]:
    """Full-batch Adam on a small fixed image set; a fresh mask is drawn every step."""
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    model.train()
    losses: list[float] = []
    for step in range(config.steps):
        plan = mae_mask(pixels.shape[1], config.mask_ratio, seed=config.seed + step)
        _, loss = mae_reconstruct(model, pixels, plan)
        value = float(loss.detach())
        if not math.isfinite(value):
            logger.error("MAE loss diverged at step %d", step)
            raise DivergenceError("MAE training diverged", step=step, recent_losses=losses)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(value)
        if config.log_every and step % config.log_every == 0:
            logger.info("mae step=%d loss=%.5f", step, value)
    model.eval()
    return losses


def transfer_encoder(model: MaskedAutoencoder, vit: VisionTransformer) -> VisionTransformer:
    """Copy pretrained encoder weights (patch embed, slot table, blocks) into `vit`."""
    if model.encoder.config.vit_fields() != vit.config.vit_fields():
        raise ShapeMismatchError(
            f"MAE encoder config {model.encoder.config} does not match the target ViT {vit.config}"
        )
    vit.load_state_dict(model.encoder.state_dict())
    return vit
