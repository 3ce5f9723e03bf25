"""Tests for query initialization, masked cross-attention and the decoder loop."""

import math

import numpy as np
import pytest
import torch
from torch import nn
from torch.func import functional_call

from scene_recon.backbone import VoxelUNetBackbone
from scene_recon.config import BackboneConfig
from scene_recon.dtd import (
    AttentionMask,
    CrossAttention,
    DisentangledDecoder,
    QuerySet,
    RefinementModule,
    decode,
    init_queries,
    masked_cross_attention,
    refine_level,
)
from scene_recon.exceptions import InvalidArgumentError, MaskContractError
from scene_recon.heads import PredictionHeads


def _zero_(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class TestInitQueries:
    def test_reproducible(self):
        a = init_queries(20, seed=3)
        b = init_queries(20, seed=3)
        assert a.semantic.shape == (20, 128) and a.geometric.shape == (20, 128)
        assert torch.equal(a.semantic, b.semantic) and torch.equal(a.geometric, b.geometric)

    def test_seeds_differ(self):
        assert not torch.equal(init_queries(4, seed=0).semantic, init_queries(4, seed=1).semantic)

    def test_scale(self):
        """Mean magnitude of N(0, 0.02^2) entries is 0.02 * sqrt(2 / pi)."""
        q = init_queries(50, seed=0, semantic_dim=100, geometric_dim=100)
        magnitude = torch.cat([q.semantic, q.geometric]).abs().mean().item()
        assert magnitude == pytest.approx(0.02 * math.sqrt(2 / math.pi), rel=0.1)

    def test_requires_a_query(self):
        with pytest.raises(InvalidArgumentError):
            init_queries(0, seed=0)


class TestQuerySet:
    def test_join_and_split(self):
        q = init_queries(5, seed=0, semantic_dim=3, geometric_dim=4)
        back = QuerySet.split(q.joined(), 3)
        assert torch.equal(back.semantic, q.semantic) and torch.equal(back.geometric, q.geometric)

    def test_mismatched_halves(self):
        with pytest.raises(InvalidArgumentError):
            QuerySet(torch.zeros(3, 2), torch.zeros(4, 2))


class TestAttentionMask:
    def test_cell_in_mask_if_any_point_is(self):
        point_masks = torch.tensor([[True, False, False, False], [False, False, False, False]])
        point_to_cell = torch.tensor([0, 0, 1, 1])
        mask = AttentionMask.from_point_masks(point_masks, point_to_cell, 2)
        assert mask.mask.tolist() == [[True, False], [True, True]]
        assert mask.fallback.tolist() == [False, True]
        assert mask.num_fallback == 1


class TestMaskedCrossAttention:
    def _weights(self, d=4, df=6, heads=2):
        torch.manual_seed(0)
        return CrossAttention(d, df, heads).double()

    def test_singleton_feature(self):
        weights = self._weights()
        part = torch.randn(3, 4, dtype=torch.float64)
        features = torch.randn(1, 6, dtype=torch.float64)
        out = masked_cross_attention(part, features, AttentionMask.full(3, 1), weights)
        torch.testing.assert_close(out, weights.v(features).expand(3, 4))

    def test_masked_feature_does_not_affect_row(self):
        weights = self._weights()
        part = torch.randn(2, 4, dtype=torch.float64)
        features = torch.randn(5, 6, dtype=torch.float64)
        mask = AttentionMask(
            torch.tensor([[True, True, False, False, False], [False, False, True, True, True]]),
            torch.zeros(2, dtype=torch.bool),
        )
        before = masked_cross_attention(part, features, mask, weights)
        perturbed = features.clone()
        perturbed[3] += 10.0
        after = masked_cross_attention(part, perturbed, mask, weights)
        torch.testing.assert_close(after[0], before[0], rtol=0, atol=0)
        assert not torch.allclose(after[1], before[1])

    def test_masked_gradient_is_exactly_zero(self):
        weights = self._weights()
        part = torch.randn(3, 4, dtype=torch.float64)
        features = torch.randn(8, 6, dtype=torch.float64, requires_grad=True)
        rows = torch.rand(3, 8, generator=torch.Generator().manual_seed(1)) < 0.5
        rows[:, 0] = True
        mask = AttentionMask(rows, torch.zeros(3, dtype=torch.bool))
        for i in range(3):
            features.grad = None
            masked_cross_attention(part, features, mask, weights)[i].sum().backward()
            assert torch.all(features.grad[~rows[i]] == 0)

    def test_uniform_logits_average_values(self):
        weights = self._weights()
        nn.init.zeros_(weights.q.weight)
        nn.init.zeros_(weights.q.bias)
        part = torch.randn(2, 4, dtype=torch.float64)
        features = torch.randn(5, 6, dtype=torch.float64)
        rows = torch.tensor([[True, False, True, False, True], [True, True, True, True, True]])
        out = masked_cross_attention(part, features, AttentionMask(rows, torch.zeros(2, dtype=torch.bool)), weights)
        values = weights.v(features)
        torch.testing.assert_close(out[0], values[rows[0]].mean(dim=0))
        torch.testing.assert_close(out[1], values.mean(dim=0))

    def test_all_masked_row_is_a_contract_violation(self):
        weights = self._weights()
        mask = AttentionMask(torch.tensor([[True, False], [False, False]]), torch.zeros(2, dtype=torch.bool))
        with pytest.raises(MaskContractError):
            masked_cross_attention(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(2, 6, dtype=torch.float64), mask, weights)

    def test_shape_mismatch(self):
        weights = self._weights()
        with pytest.raises(InvalidArgumentError):
            masked_cross_attention(
                torch.zeros(2, 4, dtype=torch.float64), torch.zeros(3, 6, dtype=torch.float64), AttentionMask.full(2, 4), weights
            )

    def test_gradcheck(self):
        weights = self._weights()
        part = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        features = torch.randn(30, 6, dtype=torch.float64, requires_grad=True)
        rows = torch.rand(3, 30, generator=torch.Generator().manual_seed(2)) < 0.6
        rows[:, 0] = True
        mask = AttentionMask(rows, torch.zeros(3, dtype=torch.bool))
        assert torch.autograd.gradcheck(lambda p, f: masked_cross_attention(p, f, mask, weights), (part, features))


class TestRefinementModule:
    def test_zero_weights_are_identity(self):
        module = _zero_(RefinementModule(4, 6, 5, num_heads=2))
        q = QuerySet(torch.randn(3, 4), torch.randn(3, 6))
        out = refine_level(q, torch.randn(7, 5), AttentionMask.full(3, 7), module)
        torch.testing.assert_close(out.semantic, q.semantic, rtol=0, atol=0)
        torch.testing.assert_close(out.geometric, q.geometric, rtol=0, atol=0)

    @pytest.mark.parametrize("disentangled", [True, False])
    @pytest.mark.parametrize("m,ds,dg", [(1, 4, 4), (5, 8, 2)])
    def test_shape_preserved(self, disentangled, m, ds, dg):
        module = RefinementModule(ds, dg, 3, num_heads=2, disentangled=disentangled)
        q = QuerySet(torch.randn(m, ds), torch.randn(m, dg))
        out = module(q, torch.randn(9, 3), AttentionMask.full(m, 9))
        assert out.semantic.shape == (m, ds) and out.geometric.shape == (m, dg)

    def test_disjoint_masks_isolate_cross_attention(self):
        """Before self-attention, query 0's update ignores the features only query 1 sees."""
        module = RefinementModule(4, 4, 5, num_heads=2).double()
        q = QuerySet(torch.randn(2, 4, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64))
        features = torch.randn(6, 5, dtype=torch.float64)
        rows = torch.tensor([[True, True, True, False, False, False], [False, False, False, True, True, True]])
        mask = AttentionMask(rows, torch.zeros(2, dtype=torch.bool))
        before = module.cross_attend(q, features, mask)
        perturbed = features.clone()
        perturbed[3:] = torch.randn(3, 5, dtype=torch.float64)
        after = module.cross_attend(q, perturbed, mask)
        torch.testing.assert_close(after.semantic[0], before.semantic[0], rtol=0, atol=0)
        torch.testing.assert_close(after.geometric[0], before.geometric[0], rtol=0, atol=0)

    def test_rejects_wrong_query_dims(self):
        module = RefinementModule(4, 4, 5, num_heads=2)
        with pytest.raises(InvalidArgumentError):
            module(QuerySet(torch.randn(2, 3), torch.randn(2, 4)), torch.randn(6, 5), AttentionMask.full(2, 6))

    def test_weights_gradcheck(self):
        """Finite differences on every weight of one step, 64-bit, M=3 over 30 features."""
        torch.manual_seed(0)
        module = RefinementModule(4, 4, 5, num_heads=2, ffn_multiplier=1).double()
        q = QuerySet(torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64))
        features = torch.randn(30, 5, dtype=torch.float64)
        rows = torch.rand(3, 30, generator=torch.Generator().manual_seed(3)) < 0.5
        rows[:, 0] = True
        mask = AttentionMask(rows, torch.zeros(3, dtype=torch.bool))
        names = [name for name, _ in module.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())

        def run(*values):
            out = functional_call(module, dict(zip(names, values)), (q, features, mask))
            return out.joined()

        assert torch.autograd.gradcheck(run, params, eps=1e-6, atol=1e-5, rtol=1e-3)


class TestDecode:
    def _setup(self, small_backbone_config, small_model_config, rng):
        torch.manual_seed(0)
        backbone = VoxelUNetBackbone(small_backbone_config).double()
        decoder = DisentangledDecoder(small_model_config, small_backbone_config.feature_dim).double()
        heads = PredictionHeads(small_model_config, small_backbone_config.feature_dim).double()
        pyramid = backbone(torch.as_tensor(rng.uniform(0, 1, size=(120, 3))))
        q0 = init_queries(small_model_config.num_queries, 0, 8, 8, dtype=torch.float64)
        return q0, pyramid, decoder, heads

    def test_twelve_steps_coarse_to_fine(self, small_backbone_config, small_model_config, rng):
        q0, pyramid, decoder, heads = self._setup(small_backbone_config, small_model_config, rng)
        final, intermediates = decode(q0, pyramid, decoder, heads)
        assert len(intermediates) == 12
        assert intermediates[-1] is final
        assert [level for _, level in decoder.schedule()] == [4, 3, 2, 1] * 3

    def test_deterministic(self, small_backbone_config, small_model_config, rng):
        q0, pyramid, decoder, heads = self._setup(small_backbone_config, small_model_config, rng)
        a, _ = decode(q0, pyramid, decoder, heads)
        b, _ = decode(q0, pyramid, decoder, heads)
        assert torch.equal(a.joined(), b.joined())

    def test_query_permutation_equivariance(self, small_backbone_config, small_model_config, rng):
        q0, pyramid, decoder, heads = self._setup(small_backbone_config, small_model_config, rng)
        order = torch.as_tensor(np.random.default_rng(0).permutation(q0.num_queries))
        a, _ = decode(q0, pyramid, decoder, heads)
        b, _ = decode(q0.permute(order), pyramid, decoder, heads)
        torch.testing.assert_close(b.joined(), a.joined()[order], atol=1e-10, rtol=1e-8)

    def test_oracle_masks_fix_attention(self, small_backbone_config, small_model_config, rng):
        """Oracle masks replace the predicted ones at every step."""
        q0, pyramid, decoder, heads = self._setup(small_backbone_config, small_model_config, rng)
        oracle = torch.zeros(q0.num_queries, 120, dtype=torch.bool)
        oracle[:, :60] = True
        final, intermediates = decode(q0, pyramid, decoder, heads, oracle_masks=oracle)
        assert len(intermediates) == 12
        assert torch.isfinite(final.joined()).all()

    def test_level_count_mismatch(self, small_model_config, rng):
        backbone = VoxelUNetBackbone(BackboneConfig(grid_size=16, width=2, feature_dim=8, levels=2))
        decoder = DisentangledDecoder(small_model_config, 8)
        heads = PredictionHeads(small_model_config, 8)
        pyramid = backbone(torch.as_tensor(rng.uniform(0, 1, size=(50, 3)), dtype=torch.float32))
        with pytest.raises(InvalidArgumentError):
            decode(init_queries(small_model_config.num_queries, 0, 8, 8), pyramid, decoder, heads)
