"""
Conditional flow-matching action policy.

The velocity field v(z_t, t, O) is a small DiT: the K action-latent tokens and
one proprio token form the self-attention sequence, every block cross-attends
to the image condition tokens, and the flow time conditions every block through
AdaLN-Zero modulation (all gates and the output projection start at zero, so a
fresh network predicts exactly zero velocity).

Training follows the usual recipe: t ~ U[0, 1], z0 ~ N(0, I),
z_t = (1 - t) z0 + t A, target velocity A - z0, cosine learning-rate schedule
and an EMA copy of the weights that is used for sampling.
"""

from __future__ import annotations

import copy
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
from torch import nn

from apps.foveation.encoder import (
    Attention,
    CrossAttention,
    EncoderConfig,
    Mlp,
    ObservationEncoder,
    init_weights,
)
from apps.foveation.errors import DivergenceError, NonFiniteError, PolicyStallError, ShapeMismatchError

logger = logging.getLogger(__name__)

PROPRIO_DROPOUT_MODES = ("vector", "element")
SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class PolicyConfig:
    chunk_size: int = 16
    action_dim: int = 2
    proprio_dim: int = 2
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    n_img_tokens: int = 16
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
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 200
    eval_every: int = 0

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim ({self.dim}) must be divisible by heads ({self.heads})")
        if self.chunk_size < 1 or self.flow_steps < 1:
            raise ValueError("chunk_size and flow_steps must be at least 1")
        if self.proprio_dropout_mode not in PROPRIO_DROPOUT_MODES:
            raise ValueError(f"proprio_dropout_mode must be one of {PROPRIO_DROPOUT_MODES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not 0.0 <= self.proprio_dropout < 1.0:
            raise ValueError("proprio_dropout must lie in [0, 1)")


@dataclass
class Observation:
    """Raw policy input: proprio (B, P) and optional token pixels (B, n, embed_input)."""

    proprio: torch.Tensor
    pixels: torch.Tensor | None = None

    @property
    def batch_size(self) -> int:
        return self.proprio.shape[0]


@dataclass
class EncodedObservation:
    c_img: torch.Tensor
    c_proprio: torch.Tensor


@dataclass
class PolicyBatch:
    observation: Observation
    actions: torch.Tensor


class PolicyDataset(Protocol):
    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> PolicyBatch: ...


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return (scale.unsqueeze(1) + 1.0) * x + shift.unsqueeze(1)


def adaln_modulate(x: torch.Tensor, c: torch.Tensor, modulation: nn.Module, norm: nn.Module) -> torch.Tensor:
    """(gamma(c) + 1) * LN(x) + beta(c), with [beta, gamma] = modulation(c)."""
    shift, scale = modulation(c).chunk(2, dim=-1)
    return modulate(norm(x), shift, scale)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = (1000.0 * t)[:, None] * freqs[None]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
    return embedding


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, frequency_dim: int = 128):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(nn.Linear(frequency_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.frequency_dim))


class DiTBlock(nn.Module):
    """Self-attention, cross-attention to image tokens and MLP, each AdaLN-Zero gated."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int, context_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.cross = CrossAttention(dim, heads, context_dim=context_dim)
        self.norm3 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, mlp_hidden)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 9 * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        (
            shift_sa, scale_sa, gate_sa,
            shift_ca, scale_ca, gate_ca,
            shift_mlp, scale_mlp, gate_mlp,
        ) = self.adaLN_modulation(c).chunk(9, dim=-1)
        x = x + gate_sa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_sa, scale_sa))
        x = x + gate_ca.unsqueeze(1) * self.cross(modulate(self.norm2(x), shift_ca, scale_ca), context)
        return x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm3(x), shift_mlp, scale_mlp))

    def gates(self, c: torch.Tensor) -> torch.Tensor:
        chunks = self.adaLN_modulation(c).chunk(9, dim=-1)
        return torch.stack([chunks[2], chunks[5], chunks[8]])


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, out_dim)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return self.linear(adaln_modulate(x, c, self.adaLN_modulation, self.norm))


class VelocityNet(nn.Module):
    def __init__(self, config: PolicyConfig, context_dim: int | None = None):
        super().__init__()
        self.config = config
        dim = config.dim
        self.action_in = nn.Linear(config.action_dim, dim)
        self.action_pos = nn.Parameter(torch.zeros(config.chunk_size, dim))
        self.t_embedder = TimestepEmbedder(dim)
        self.blocks = nn.ModuleList(
            DiTBlock(dim, config.heads, int(config.mlp_ratio * dim), context_dim or dim)
            for _ in range(config.depth)
        )
        self.final = FinalLayer(dim, config.action_dim)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.action_pos, std=0.02)
        self.zero_gates()

    def zero_gates(self) -> None:
        for block in self.blocks:
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.final.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final.linear.weight)
        nn.init.zeros_(self.final.linear.bias)

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        c_img: torch.Tensor,
        c_proprio: torch.Tensor,
    ) -> torch.Tensor:
        batch, k, d = z.shape
        if d != self.config.action_dim or k > self.config.chunk_size:
            raise ShapeMismatchError(f"Latent shape {tuple(z.shape)} does not fit the velocity net")
        if not (torch.isfinite(z).all() and torch.isfinite(c_img).all() and torch.isfinite(c_proprio).all()):
            raise NonFiniteError("Velocity net input contains non-finite values")
        x = torch.cat([self.action_in(z) + self.action_pos[:k], c_proprio], dim=1)
        c = self.t_embedder(t)
        for block in self.blocks:
            x = block(x, c, c_img)
        return self.final(x[:, :k], c)


class ProprioEncoder(nn.Module):
    def __init__(self, proprio_dim: int, dim: int, dropout: float, mode: str):
        super().__init__()
        self.dropout = dropout
        self.mode = mode
        self.mlp = nn.Sequential(nn.Linear(proprio_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, proprio: torch.Tensor) -> torch.Tensor:
        if self.training and self.dropout > 0.0:
            if self.mode == "vector":
                keep = (torch.rand(proprio.shape[0], 1, device=proprio.device) >= self.dropout).to(proprio.dtype)
                proprio = proprio * keep
            else:
                proprio = nn.functional.dropout(proprio, self.dropout, training=True)
        return self.mlp(proprio).unsqueeze(1)


class FlowPolicy(nn.Module):
    """Observation encoder (optional ViT + Q-Former), proprio MLP and DiT velocity net."""

    def __init__(self, config: PolicyConfig, encoder: EncoderConfig | None = None):
        super().__init__()
        self.config = config
        self.encoder_config = encoder
        if encoder is not None:
            if encoder.n_queries != config.n_img_tokens:
                raise ValueError("Q-Former query count must equal n_img_tokens")
            self.observation_encoder = ObservationEncoder(encoder)
            context_dim = encoder.dim
        else:
            self.observation_encoder = None
            self.null_image = nn.Parameter(torch.zeros(config.n_img_tokens, config.dim))
            nn.init.trunc_normal_(self.null_image, std=0.02)
            context_dim = config.dim
        self.proprio_encoder = ProprioEncoder(
            config.proprio_dim, config.dim, config.proprio_dropout, config.proprio_dropout_mode
        )
        self.proprio_encoder.apply(init_weights)
        self.velocity_net = VelocityNet(config, context_dim=context_dim)

    def encode(self, observation: Observation) -> EncodedObservation:
        proprio = observation.proprio
        if proprio.shape[-1] != self.config.proprio_dim:
            raise ShapeMismatchError(f"Proprio width {proprio.shape[-1]} != {self.config.proprio_dim}")
        if self.observation_encoder is not None:
            if observation.pixels is None:
                raise ValueError("This policy needs image tokens in its observation")
            c_img = self.observation_encoder(observation.pixels)
        else:
            c_img = self.null_image.unsqueeze(0).expand(proprio.shape[0], -1, -1)
        return EncodedObservation(c_img=c_img, c_proprio=self.proprio_encoder(proprio))

    def velocity(self, z: torch.Tensor, t: torch.Tensor, encoded: EncodedObservation) -> torch.Tensor:
        return self.velocity_net(z, t, encoded.c_img, encoded.c_proprio)

    def vit_parameters(self) -> list[nn.Parameter]:
        if self.observation_encoder is None:
            return []
        return list(self.observation_encoder.vit.parameters())


def flow_path(actions: torch.Tensor, z0: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
    if not isinstance(t, torch.Tensor):
        t = torch.full((actions.shape[0],), float(t), dtype=actions.dtype)
    t = t.to(actions.dtype).reshape(-1, *([1] * (actions.dim() - 1)))
    return (1.0 - t) * z0 + t * actions


def _as_time(t: torch.Tensor | float, batch: int, dtype: torch.dtype) -> torch.Tensor:
    if not isinstance(t, torch.Tensor):
        t = torch.full((batch,), float(t), dtype=dtype)
    t = t.to(dtype).reshape(-1)
    if t.shape[0] == 1 and batch > 1:
        t = t.expand(batch)
    if t.numel() and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("Flow time t must lie in [0, 1]")
    return t


@dataclass
class FlowState:
    z: torch.Tensor
    t: torch.Tensor
    z0: torch.Tensor | None = None


def dit_forward(policy: FlowPolicy, state: FlowState, encoded: EncodedObservation) -> torch.Tensor:
    """Predicted velocity for the K action tokens of `state`."""
    t = _as_time(state.t, state.z.shape[0], state.z.dtype)
    return policy.velocity(state.z, t, encoded)


def cfm_loss(
    policy: FlowPolicy,
    actions: torch.Tensor,
    observation: Observation,
    t: torch.Tensor | float,
    z0: torch.Tensor,
) -> torch.Tensor:
    if z0.shape != actions.shape:
        raise ShapeMismatchError(f"Noise shape {tuple(z0.shape)} != action shape {tuple(actions.shape)}")
    t = _as_time(t, actions.shape[0], actions.dtype)
    z_t = flow_path(actions, z0, t)
    predicted = policy.velocity(z_t, t, policy.encode(observation))
    return ((predicted - (actions - z0)) ** 2).mean()


@torch.no_grad()
def euler_sample(
    policy: FlowPolicy,
    observation: Observation,
    steps: int | None = None,
    seed: int | None = None,
    z0: torch.Tensor | None = None,
    chunk_size: int | None = None,
) -> torch.Tensor:
    """Integrate dz/dt = v(z, t, O) from t=0 to 1 with fixed Euler steps."""
    steps = policy.config.flow_steps if steps is None else steps
    if steps < 1:
        raise ValueError("Euler sampling needs at least one step")
    batch = observation.batch_size
    shape = (batch, chunk_size or policy.config.chunk_size, policy.config.action_dim)
    if z0 is None:
        generator = torch.Generator().manual_seed(seed) if seed is not None else None
        z0 = torch.randn(shape, generator=generator, dtype=observation.proprio.dtype)
    z = z0.clone()
    encoded = policy.encode(observation)
    dt = 1.0 / steps
    for i in range(steps):
        t = torch.full((batch,), i / steps, dtype=z.dtype)
        z = z + dt * policy.velocity(z, t, encoded)
        if not torch.isfinite(z).all():
            raise NonFiniteError(f"Euler sampling produced non-finite values at step {i}")
    return z


@dataclass
class EnsembleBuffer:
    """Chunks emitted at past control steps, fused with weights exp(-m * age)."""

    chunk_size: int
    m: float = 0.01
    entries: deque = field(default_factory=deque)

    def push(self, chunk: np.ndarray, step: int) -> None:
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.ndim != 2 or chunk.shape[0] < 1:
            raise ShapeMismatchError(f"Expected a (K, D) chunk, got {chunk.shape}")
        self.entries.append((int(step), chunk))
        live = [(emitted, c) for emitted, c in self.entries if step - emitted < len(c)]
        self.entries = deque(live)
        while len(self.entries) > self.chunk_size:
            self.entries.popleft()

    def predictions_for(self, now: int) -> list[tuple[int, np.ndarray]]:
        out = []
        for emitted, chunk in self.entries:
            age = now - emitted
            if 0 <= age < len(chunk):
                out.append((age, chunk[age]))
        return out

    def reset(self) -> None:
        self.entries.clear()


def temporal_ensemble(buffer: EnsembleBuffer, now: int) -> np.ndarray:
    predictions = buffer.predictions_for(now)
    if not predictions:
        raise PolicyStallError(f"No buffered chunk covers control step {now}")
    ages = np.array([age for age, _ in predictions], dtype=np.float64)
    actions = np.stack([action for _, action in predictions])
    weights = np.exp(-buffer.m * ages)
    return (weights[:, None] * actions).sum(axis=0) / weights.sum()


class EmaModel:
    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.module = copy.deepcopy(model).eval()
        for param in self.module.parameters():
            param.requires_grad_(False)

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for ema_param, param in zip(self.module.parameters(), model.parameters()):
            ema_param.mul_(self.decay).add_(param.detach(), alpha=1.0 - self.decay)
        for ema_buf, buf in zip(self.module.buffers(), model.buffers()):
            ema_buf.copy_(buf)


def lr_factor(schedule: str, step: int, total: int) -> float:
    if schedule == "constant" or total <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


@dataclass
class TrainResult:
    policy: FlowPolicy
    losses: list[float]
    evaluations: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_score: float | None = None


def build_optimizer(policy: FlowPolicy, config: PolicyConfig, pretrained_vit: bool) -> torch.optim.Optimizer:
    vit_params = policy.vit_parameters() if pretrained_vit else []
    vit_ids = {id(p) for p in vit_params}
    rest = [p for p in policy.parameters() if id(p) not in vit_ids]
    groups = [{"params": rest, "lr": config.lr}]
    if vit_params:
        groups.append({"params": vit_params, "lr": config.vit_lr})
    return torch.optim.AdamW(groups, weight_decay=config.weight_decay)


def train_policy(
    policy: FlowPolicy,
    dataset: PolicyDataset,
    config: PolicyConfig | None = None,
    evaluator: Callable[[FlowPolicy], float] | None = None,
    pretrained_vit: bool = False,
) -> TrainResult:
    config = config or policy.config
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    optimizer = build_optimizer(policy, config, pretrained_vit)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: lr_factor(config.schedule, step, config.steps)
    )
    ema = EmaModel(policy, config.ema_decay)
    result = TrainResult(policy=ema.module, losses=[])

    policy.train()
    for step in range(config.steps):
        batch = dataset.sample_batch(rng, config.batch_size)
        actions = batch.actions
        t = torch.rand(actions.shape[0], dtype=actions.dtype)
        z0 = torch.randn_like(actions)
        loss = cfm_loss(policy, actions, batch.observation, t, z0)
        value = float(loss.detach())
        if not math.isfinite(value):
            error = DivergenceError("Policy training diverged", step=step, recent_losses=result.losses)
            logger.error(error.diagnostics())
            raise error

        optimizer.zero_grad()
        loss.backward()
        if config.grad_clip > 0:
            nn.utils.clip_grad_norm_(policy.parameters(), config.grad_clip)
        optimizer.step()
        scheduler.step()
        ema.update(policy)
        result.losses.append(value)

        if config.log_every and step % config.log_every == 0:
            logger.info("policy step=%d loss=%.5f lr=%.3g", step, value, scheduler.get_last_lr()[0])

        if evaluator is not None and config.eval_every and (step + 1) % config.eval_every == 0:
            score = float(evaluator(ema.module))
            result.evaluations.append({"step": step + 1, "score": score})
            logger.info("policy eval step=%d score=%.5f", step + 1, score)
            if result.best_score is None or score > result.best_score:
                result.best_score = score
                result.best_state = copy.deepcopy(ema.module.state_dict())

    policy.eval()
    return result
