"""Velocity network components: embeddings, masked attention, modulation."""

import math

import numpy as np
import pytest
import torch

from conftest import small_config
from pathflow import (
    ConditionEncoder,
    ConditionalBlock,
    GraphAttentionBlock,
    MaskedSelfAttention,
    NetworkConfig,
    TimestepEmbedder,
    VelocityNetwork,
    build_graph,
    combine_conditioning,
    sinusoidal_features,
)
from pathflow.network import generator_dropout, modulate


class TestNetworkConfig:
    def test_validation_table(self):
        NetworkConfig(condition_dim=4)
        cases = [
            dict(condition_dim=4, depth=0),
            dict(condition_dim=4, hidden=10, heads=4),
            dict(condition_dim=4, hidden=1, heads=1),
            dict(condition_dim=0),
            dict(condition_dim=4, cluster_count=0),
            dict(condition_dim=4, dropout=1.0),
            dict(condition_dim=4, dropout=-0.1),
        ]
        for kwargs in cases:
            with pytest.raises(ValueError):
                NetworkConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = small_config(depth=3)
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


class TestGeneratorDropout:
    def test_identity_when_inactive(self):
        x = torch.randn(5, 5)
        assert generator_dropout(x, 0.5, training=False, rng=None) is x
        assert generator_dropout(x, 0.0, training=True, rng=None) is x

    def test_training_requires_a_generator(self):
        with pytest.raises(ValueError, match="generator"):
            generator_dropout(torch.randn(2, 2), 0.5, training=True, rng=None)

    def test_inverted_scaling_and_keep_rate(self):
        rng = torch.Generator().manual_seed(0)
        x = torch.ones(100, 100)
        out = generator_dropout(x, 0.3, training=True, rng=rng)
        kept = out[out != 0.0]
        assert torch.allclose(kept, torch.full_like(kept, 1.0 / 0.7))
        keep_rate = float((out != 0).float().mean())
        assert abs(keep_rate - 0.7) < 4 * math.sqrt(0.3 * 0.7 / 10000)

    def test_reproducible_from_the_seed(self):
        x = torch.randn(8, 8)
        a = generator_dropout(x, 0.4, True, torch.Generator().manual_seed(3))
        b = generator_dropout(x, 0.4, True, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)


class TestSinusoidalFeatures:
    def test_hand_oracle_dim4(self):
        t = torch.tensor([0.25], dtype=torch.float64)
        feats = sinusoidal_features(t, 4, scale=1000.0, max_period=10000.0)
        freqs = np.exp(-np.log(10000.0) * np.arange(2) / 2)
        args = 0.25 * 1000.0 * freqs
        expected = np.concatenate([np.cos(args), np.sin(args)])
        np.testing.assert_allclose(feats[0].numpy(), expected, rtol=1e-12)

    def test_odd_dim_pads_a_zero(self):
        feats = sinusoidal_features(torch.tensor([0.5]), 5)
        assert feats.shape == (1, 5)
        assert feats[0, 4] == 0.0

    def test_t_zero_gives_cos_one_sin_zero(self):
        feats = sinusoidal_features(torch.tensor([0.0]), 6)
        np.testing.assert_allclose(feats[0, :3].numpy(), 1.0)
        np.testing.assert_allclose(feats[0, 3:].numpy(), 0.0)


class TestTimestepEmbedder:
    def test_shape_and_range_check(self):
        emb = TimestepEmbedder(16)
        out = emb(torch.tensor([0.0, 0.5, 1.0]))
        assert out.shape == (3, 16)
        for bad in (-0.01, 1.01):
            with pytest.raises(ValueError, match=r"\[0, 1\]"):
                emb(torch.tensor([bad]))

    def test_distinct_times_embed_differently(self):
        torch.manual_seed(0)
        emb = TimestepEmbedder(16)
        out = emb(torch.tensor([0.1, 0.9]))
        assert not torch.allclose(out[0], out[1])


class TestMaskedSelfAttention:
    def test_probabilities_are_a_distribution(self):
        torch.manual_seed(0)
        attn = MaskedSelfAttention(8, 2)
        _, probs = attn(torch.randn(3, 5, 8), return_weights=True)
        assert probs.shape == (3, 2, 5, 5)
        np.testing.assert_allclose(probs.sum(dim=-1).detach().numpy(), 1.0, rtol=1e-6)

    def test_neg_inf_mask_zeroes_probabilities_exactly(self):
        rng = np.random.default_rng(60)
        for trial in range(25):
            n = int(rng.integers(2, 7))
            heads = int(rng.choice([1, 2, 4]))
            dim = 4 * heads
            torch.manual_seed(trial)
            attn = MaskedSelfAttention(dim, heads)
            mask = np.where(rng.random((n, n)) < 0.5, 0.0, -np.inf)
            np.fill_diagonal(mask, 0.0)
            _, probs = attn(
                torch.randn(2, n, dim), torch.tensor(mask), return_weights=True
            )
            off = torch.tensor(np.isneginf(mask))
            assert (probs[:, :, off] == 0.0).all()
            np.testing.assert_allclose(probs.sum(-1).detach().numpy(), 1.0, rtol=1e-5)

    def test_matches_manual_softmax_with_finite_mask(self):
        torch.manual_seed(1)
        attn = MaskedSelfAttention(6, 1).double()
        x = torch.randn(1, 4, 6, dtype=torch.float64)
        mask = torch.randn(4, 4, dtype=torch.float64)
        _, probs = attn(x, mask, return_weights=True)
        qkv = attn.qkv(x).reshape(1, 4, 3, 1, 6).permute(2, 0, 3, 1, 4)
        q, k, _ = qkv
        logits = q @ k.transpose(-2, -1) / math.sqrt(6) + mask
        np.testing.assert_allclose(
            probs.detach().numpy(), torch.softmax(logits, -1).detach().numpy(), rtol=1e-12
        )

    def test_dim_heads_divisibility(self):
        with pytest.raises(ValueError):
            MaskedSelfAttention(6, 4)


class TestGraphAttentionBlock:
    def _mask3(self):
        # nodes 0-1 connected, node 2 isolated
        return np.array([[0.0, 0.0, -np.inf], [0.0, 0.0, -np.inf],
                         [-np.inf, -np.inf, 0.0]])

    def test_isolated_token_ignores_the_others(self):
        torch.manual_seed(0)
        block = GraphAttentionBlock(8, 2, self._mask3(), dropout=0.0)
        block.eval()
        tokens = torch.randn(2, 3, 8)
        base = block(tokens)
        bumped = tokens.clone()
        bumped[:, 0, :] += 5.0
        out = block(bumped)
        assert torch.equal(out[:, 2, :], base[:, 2, :])
        assert not torch.allclose(out[:, 1, :], base[:, 1, :])

    def test_token_count_must_match_mask(self):
        block = GraphAttentionBlock(8, 2, self._mask3())
        with pytest.raises(ValueError, match="mask"):
            block.eval()(torch.randn(1, 4, 8))

    def test_zeroed_ffn_and_residual_scale_give_identity(self):
        torch.manual_seed(0)
        block = GraphAttentionBlock(8, 2, self._mask3(), dropout=0.0)
        block.eval()
        with torch.no_grad():
            block.residual_scale.zero_()
            block.ffn[2].weight.zero_()
            block.ffn[2].bias.zero_()
        tokens = torch.randn(2, 3, 8)
        assert torch.equal(block(tokens), tokens)

    def test_training_dropout_is_generator_driven(self):
        torch.manual_seed(0)
        block = GraphAttentionBlock(8, 2, self._mask3(), dropout=0.5)
        block.train()
        tokens = torch.randn(2, 3, 8)
        a = block(tokens, rng=torch.Generator().manual_seed(7))
        b = block(tokens, rng=torch.Generator().manual_seed(7))
        c = block(tokens, rng=torch.Generator().manual_seed(8))
        assert torch.equal(a, b)
        assert not torch.equal(a, c)
        with pytest.raises(ValueError, match="generator"):
            block(tokens)

    def test_return_weights_exposes_the_probabilities(self):
        block = GraphAttentionBlock(8, 2, self._mask3(), dropout=0.0)
        block.eval()
        _, weights = block(torch.randn(1, 3, 8), return_weights=True)
        assert (weights[:, :, 2, :2] == 0.0).all()
        assert (weights[:, :, :2, 2] == 0.0).all()


class TestConditionalBlock:
    def test_identity_at_initialization(self):
        torch.manual_seed(0)
        block = ConditionalBlock(16, 2)
        x = torch.randn(3, 4, 16)
        c = torch.randn(3, 16)
        assert torch.equal(block(x, c), x)

    def test_modulate_algebra(self):
        x = torch.tensor([[[2.0, 4.0]]])
        shift = torch.tensor([[1.0, -1.0]])
        scale = torch.tensor([[0.5, 0.25]])
        np.testing.assert_allclose(
            modulate(x, shift, scale).numpy(), [[[4.0, 4.0]]]
        )

    def test_condition_steers_the_output_after_training_starts(self):
        torch.manual_seed(0)
        block = ConditionalBlock(16, 2)
        with torch.no_grad():
            torch.nn.init.normal_(block.modulation[1].weight, std=0.1)
            torch.nn.init.normal_(block.modulation[1].bias, std=0.1)
        x = torch.randn(2, 4, 16)
        out1 = block(x, torch.randn(2, 16))
        out2 = block(x, torch.randn(2, 16))
        assert not torch.allclose(out1, out2)


class TestConditionEncoder:
    def test_permutation_invariance_over_clusters(self):
        torch.manual_seed(0)
        enc = ConditionEncoder(cluster_count=6, cond_dim=4, hidden=8).double()
        y = torch.randn(3, 6, 4, dtype=torch.float64)
        base = enc(y)
        for seed in range(4):
            perm = torch.randperm(6, generator=torch.Generator().manual_seed(seed))
            np.testing.assert_allclose(
                enc(y[:, perm, :]).detach().numpy(), base.detach().numpy(), atol=1e-12
            )

    def test_null_embedding_starts_at_zero(self):
        enc = ConditionEncoder(3, 4, 8)
        assert torch.equal(enc.null(5), torch.zeros(5, 8))

    def test_combine_conditioning_is_the_sum(self):
        t_emb = torch.randn(2, 8)
        assert torch.equal(combine_conditioning(t_emb, torch.zeros(2, 8)), t_emb)
        c = torch.randn(2, 8)
        assert torch.equal(combine_conditioning(t_emb, c), t_emb + c)

    def test_validation(self):
        enc = ConditionEncoder(3, 4, 8)
        with pytest.raises(ValueError, match="condition must be"):
            enc(torch.randn(2, 4, 4))
        with pytest.raises(ValueError, match="non-finite"):
            enc(torch.full((1, 3, 4), float("inf")))


class TestVelocityNetwork:
    def _model(self, collection, **overrides):
        torch.manual_seed(0)
        return VelocityNetwork(small_config(**overrides), collection)

    def test_output_shape_and_finiteness(self, toy_collection):
        model = self._model(toy_collection)
        model.eval()
        out = model(torch.randn(4, 12), 0.5, torch.randn(4, 3, 6))
        assert out.shape == (4, 12)
        assert torch.isfinite(out).all()

    def test_three_sigma_inputs_stay_finite(self, toy_collection):
        model = self._model(toy_collection)
        model.eval()
        rng = np.random.default_rng(61)
        for _ in range(10):
            x = torch.tensor(rng.uniform(-3, 3, size=(2, 12)), dtype=torch.float32)
            y = torch.tensor(rng.uniform(-3, 3, size=(2, 3, 6)), dtype=torch.float32)
            t = float(rng.uniform(0, 1))
            assert torch.isfinite(model(x, t, y)).all()

    def test_scalar_time_broadcasts_exactly(self, toy_collection):
        model = self._model(toy_collection)
        model.eval()
        x = torch.randn(3, 12)
        y = torch.randn(3, 3, 6)
        assert torch.equal(model(x, 0.25, y), model(x, torch.full((3,), 0.25), y))

    def test_single_condition_broadcasts_over_the_batch(self, toy_collection):
        model = self._model(toy_collection)
        model.eval()
        x = torch.randn(3, 12)
        y1 = torch.randn(3, 6)
        stacked = y1.unsqueeze(0).expand(3, -1, -1)
        assert torch.equal(model(x, 0.5, y1), model(x, 0.5, stacked))

    def test_null_condition_equals_full_dropout_mask(self, toy_collection):
        model = self._model(toy_collection)
        model.eval()
        x = torch.randn(3, 12)
        y = torch.randn(3, 3, 6)
        dropped = model(x, 0.5, y, cond_drop_mask=torch.ones(3, dtype=torch.bool))
        assert torch.equal(dropped, model(x, 0.5, None))

    def test_condition_changes_the_field(self, toy_collection):
        model = self._model(toy_collection)
        model.eval()
        x = torch.randn(2, 12)
        a = model(x, 0.5, torch.randn(2, 3, 6))
        b = model(x, 0.5, torch.randn(2, 3, 6))
        assert not torch.allclose(a, b)

    def test_background_gene_is_routed_around_the_token_stack(self, toy_collection):
        # gene 11 is background: it feeds only the background token, and its
        # output comes only from the background head
        model = self._model(toy_collection)
        model.eval()
        x = torch.randn(2, 12)
        y = torch.randn(2, 3, 6)
        base = model(x, 0.5, y)
        bumped = x.clone()
        bumped[:, 11] += 4.0
        out = model(bumped, 0.5, y)
        assert torch.equal(out[:, :11], base[:, :11])
        assert not torch.allclose(out[:, 11], base[:, 11])
        bumped2 = x.clone()
        bumped2[:, 0] += 4.0
        out2 = model(bumped2, 0.5, y)
        assert torch.equal(out2[:, 11], base[:, 11])
        assert not torch.allclose(out2[:, :11], base[:, :11])

    def test_time_outside_unit_interval_rejected(self, toy_collection):
        model = self._model(toy_collection)
        model.eval()
        with pytest.raises(ValueError):
            model(torch.randn(1, 12), 1.5, None)

    def test_condition_batch_mismatch_rejected(self, toy_collection):
        model = self._model(toy_collection)
        model.eval()
        with pytest.raises(ValueError, match="batch"):
            model(torch.randn(3, 12), 0.5, torch.randn(2, 3, 6))

    def test_mask_shape_guard(self, toy_collection):
        from pathflow import PathwayGraph

        graph = build_graph(toy_collection)
        bad = PathwayGraph(
            adjacency=graph.adjacency[:2, :2],
            normalized=graph.normalized[:2, :2],
            mask=graph.mask[:2, :2],
        )
        with pytest.raises(ValueError, match="mask"):
            VelocityNetwork(small_config(), toy_collection, graph=bad)

    def test_empty_background_width_zero_head(self, covered_collection):
        model = self._model(covered_collection)
        model.eval()
        out = model(torch.randn(2, 12), 0.5, torch.randn(2, 3, 6))
        assert out.shape == (2, 12)
        assert model.background_head.out_features == 0
