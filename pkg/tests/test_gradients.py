import unittest

import torch
from torch import nn
from torch.autograd import gradcheck
from torch.func import functional_call

from apps.foveation.encoder import Attention, EncoderConfig, Mlp, PatchEmbed, QFormer, QFormerBlock
from apps.foveation.gaze import spatial_softmax
from apps.foveation.policy import FlowPolicy, Observation, PolicyConfig, adaln_modulate, cfm_loss


class _CfmLoss(nn.Module):
    def __init__(self, policy: FlowPolicy, t: torch.Tensor):
        super().__init__()
        self.policy = policy
        self.register_buffer("t", t)

    def forward(self, actions, proprio, z0):
        return cfm_loss(self.policy, actions, Observation(proprio=proprio), self.t, z0)


class _AdaLN(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Linear(dim, 2 * dim)

    def forward(self, x, c):
        return adaln_modulate(x, c, self.modulation, self.norm)


class _SpatialSoftmax(nn.Module):
    def forward(self, heatmap):
        return spatial_softmax(heatmap, temperature=0.5)


def _randomize_zero_init(module: nn.Module, seed: int) -> None:
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            if not param.any():
                param.copy_(0.1 * torch.randn(param.shape, generator=generator, dtype=param.dtype))


class GradientTests(unittest.TestCase):
    """Autograd against central finite differences, parameters and inputs alike, in float64."""

    def _check(self, module: nn.Module, *inputs: torch.Tensor) -> None:
        module = module.double()
        names = [name for name, _ in module.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())
        inputs = tuple(
            x.double().requires_grad_(True) if x.is_floating_point() else x
            for x in inputs
        )

        def fn(*args):
            state = dict(zip(names, args[: len(names)]))
            return functional_call(module, state, args[len(names):])

        self.assertTrue(gradcheck(fn, params + inputs, eps=1e-6, atol=1e-6, rtol=1e-4))

    def setUp(self):
        torch.manual_seed(0)

    def test_patch_embed(self):
        embed = PatchEmbed(embed_input=12, dim=8, n_slots=6)
        self._check(embed, torch.rand(2, 6, 12))

    def test_patch_embed_with_slots(self):
        embed = PatchEmbed(embed_input=12, dim=8, n_slots=6)
        self._check(embed, torch.rand(1, 3, 12), torch.tensor([[0, 2, 5]]))

    def test_attention(self):
        self._check(Attention(dim=8, heads=2), torch.randn(2, 5, 8))

    def test_mlp(self):
        self._check(Mlp(dim=8, hidden=16), torch.randn(2, 5, 8))

    def test_layer_norm(self):
        norm = nn.LayerNorm(8)
        _randomize_zero_init(norm, seed=1)
        self._check(norm, torch.randn(3, 8))

    def test_qformer(self):
        config = EncoderConfig(depth=1, dim=8, heads=2, embed_input=12, n_slots=6, n_queries=4)
        self._check(QFormerBlock(8, 2, 16), torch.randn(1, 4, 8), torch.randn(1, 6, 8))
        self._check(QFormer(config), torch.randn(2, 6, 8))

    def test_adaln_modulation(self):
        self._check(_AdaLN(8), torch.randn(2, 5, 8), torch.randn(2, 8))

    def test_spatial_softmax(self):
        self._check(_SpatialSoftmax(), torch.randn(2, 9, 10))

    def test_cfm_loss(self):
        config = PolicyConfig(
            chunk_size=3,
            action_dim=2,
            proprio_dim=2,
            dim=16,
            depth=1,
            heads=2,
            mlp_ratio=2.0,
            n_img_tokens=2,
            proprio_dropout=0.0,
        )
        policy = FlowPolicy(config).eval()
        # zero-initialized gates would cut most paths out of the check
        _randomize_zero_init(policy, seed=2)
        actions = torch.randn(2, 3, 2)
        self._check(_CfmLoss(policy, torch.tensor([0.3, 0.8])), actions, torch.randn(2, 2), torch.randn(2, 3, 2))


if __name__ == "__main__":
    unittest.main()
