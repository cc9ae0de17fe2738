"""Encoder semantics: init, forward, capture, counting, FLOPs."""

import os

import numpy as np
import pytest

from minidistill import tensor as T
from minidistill.gradcheck import compare_grads
from minidistill.model import (AttentionCapture, CaptureRequest, ModelConfig,
                               TransformerModel, count_other_params,
                               count_params, flops_per_token)

import oracles

DATA = os.path.join(os.path.dirname(__file__), "data")


def tiny_config(**kw):
    base = dict(vocab_size=32, layers=2, hidden=8, heads=2, ff=16, max_len=16)
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_head_dim_division(self):
        cfg = tiny_config(hidden=12, heads=3)
        assert cfg.head_dim == 4

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError):
            tiny_config(hidden=10, heads=3)

    def test_ff_defaults_to_four_hidden(self):
        cfg = ModelConfig(vocab_size=10, layers=1, hidden=8, heads=2)
        assert cfg.ff == 32

    def test_nonpositive_fields_rejected(self):
        with pytest.raises(ValueError):
            tiny_config(layers=0)
        with pytest.raises(ValueError):
            tiny_config(vocab_size=-5)

    def test_dropout_range(self):
        with pytest.raises(ValueError):
            tiny_config(dropout_rate=1.0)

    def test_roundtrip_dict(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_same_seed_bitwise_identical(self):
        # determinism
        a = TransformerModel(tiny_config(), seed=7)
        b = TransformerModel(tiny_config(), seed=7)
        assert a.parameters.keys() == b.parameters.keys()
        for k in a.parameters:
            np.testing.assert_array_equal(a.parameters[k].data,
                                          b.parameters[k].data)

    def test_different_seeds_differ(self):
        a = TransformerModel(tiny_config(), seed=7)
        b = TransformerModel(tiny_config(), seed=8)
        assert any(not np.array_equal(a.parameters[k].data,
                                      b.parameters[k].data)
                   for k in a.parameters)

    def test_weight_statistics_and_truncation(self):
        m = TransformerModel(tiny_config(vocab_size=2000, hidden=32, ff=128),
                             seed=1)
        w = m.parameters["embeddings.token"].data
        # truncation at 2 sigma shrinks the std by the factor ~0.8796
        assert abs(w.std() - 0.02 * 0.8796) < 0.002
        assert np.abs(w).max() <= 0.04 + 1e-12

    def test_biases_zero_gains_one(self):
        m = TransformerModel(tiny_config(), seed=0)
        assert np.all(m.parameters["layers.1.attention.bq"].data == 0)
        assert np.all(m.parameters["layers.2.ffn.ln.gamma"].data == 1)
        assert np.all(m.parameters["mlm.bias"].data == 0)


class TestCountParams:
    def test_closed_form_on_tiny_config(self):
        # closed-form count, 2 layers d_h=8 A_h=2
        cfg = tiny_config()
        emd, trm = count_params(cfg)
        d, f = 8, 16
        per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
        assert (emd, trm) == (32 * 8, 2 * per_layer)

    def test_base_configuration_counts(self):
        # 85.1M / 23.4M reference accounting
        emd, trm = count_params(ModelConfig(
            vocab_size=30522, layers=12, hidden=768, heads=12, ff=3072,
            max_len=512))
        assert trm == 85_054_464
        assert emd == 23_440_896

    def test_half_width_six_layer_counts(self):
        # 10.6M / 11.7M reference accounting
        emd, trm = count_params(ModelConfig(
            vocab_size=30522, layers=6, hidden=384, heads=12, ff=1536,
            max_len=512))
        assert trm == 10_646_784
        assert emd == 11_720_448

    def test_three_layer_half_width(self):
        # 5.3M reference accounting
        _, trm = count_params(ModelConfig(
            vocab_size=30522, layers=3, hidden=384, heads=12, ff=1536,
            max_len=512))
        assert trm == 5_323_392

    def test_counts_match_allocated_traversal(self):
        cfg = tiny_config(layers=3, hidden=12, heads=3, ff=20)
        m = TransformerModel(cfg, seed=0)
        emd, trm = count_params(cfg)
        stack = sum(t.data.size for n, t in m.parameters.items()
                    if n.startswith("layers."))
        token = m.parameters["embeddings.token"].data.size
        rest = sum(t.data.size for t in m.parameters.values()) - stack - token
        assert stack == trm
        assert token == emd
        assert rest == count_other_params(cfg)


class TestFlops:
    def test_linear_in_layers(self):
        # linearity in L
        one = flops_per_token(tiny_config(layers=1), 16)
        two = flops_per_token(tiny_config(layers=2), 16)
        assert two == 2 * one

    def test_depth_ratio_two(self):
        # halving depth at equal width halves inference work
        full = flops_per_token(ModelConfig(vocab_size=30522, layers=12,
                                           hidden=768, heads=12, max_len=512),
                               128)
        half = flops_per_token(ModelConfig(vocab_size=30522, layers=6,
                                           hidden=768, heads=12, max_len=512),
                               128)
        assert full / half == 2.0

    def test_instrumented_forward_agrees(self):
        # instrumented-forward oracle, within 5%
        cfg = tiny_config(layers=2, hidden=8, heads=2, ff=16)
        m = TransformerModel(cfg, seed=3, dtype=np.float64)
        ids = np.arange(6) + 1
        with T.flop_counter() as fc:
            m.encode(ids)
        measured = fc.flops / len(ids)
        analytic = flops_per_token(cfg, len(ids))
        assert abs(measured - analytic) / analytic < 0.05


class TestEncode:
    def test_single_token_attention_is_one(self):
        # softmax over one key
        m = TransformerModel(tiny_config(), seed=1, dtype=np.float64)
        _, cap = m.encode([5], capture=CaptureRequest(attention_layers=(1, 2)))
        for l in (1, 2):
            for a in cap.attentions[l]:
                np.testing.assert_array_equal(a.data, [[1.0]])

    def test_identical_tokens_uniform_attention(self):
        # identical Q/K rows force uniform scores
        m = TransformerModel(tiny_config(), seed=2, dtype=np.float64)
        m.parameters["embeddings.position"].data[:] = 0.0
        _, cap = m.encode([9, 9], capture=CaptureRequest(attention_layers=(1,)))
        for a in cap.attentions[1]:
            np.testing.assert_allclose(a.data, [[0.5, 0.5], [0.5, 0.5]],
                                       atol=1e-12)

    def test_golden_reference_forward(self):
        # frozen 64-bit reference of a fixed seed/input forward
        cfg = ModelConfig(vocab_size=64, layers=3, hidden=16, heads=4, ff=64,
                          max_len=32)
        m = TransformerModel(cfg, seed=2024, dtype=np.float64)
        h, _ = m.encode([5, 41, 7, 23, 60, 2, 19, 11])
        golden = np.load(os.path.join(DATA, "golden_hidden.npy"))
        np.testing.assert_allclose(h.data, golden, rtol=1e-10, atol=1e-12)

    def test_repeated_encode_bitwise_identical(self):
        m = TransformerModel(tiny_config(), seed=4)
        ids = [1, 2, 3, 4]
        h1, _ = m.encode(ids)
        h2, _ = m.encode(ids)
        np.testing.assert_array_equal(h1.data, h2.data)

    def test_captured_attention_rows_are_distributions(self):
        m = TransformerModel(tiny_config(layers=3), seed=5, dtype=np.float64)
        mask = np.array([1, 1, 1, 1, 0, 0])
        _, cap = m.encode([3, 1, 4, 1, 0, 0], attn_mask=mask,
                          capture=CaptureRequest(attention_layers=(1, 2, 3)))
        for l, heads in cap.attentions.items():
            for a in heads:
                np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-12)
                assert np.all(a.data[:, 4:] == 0.0)

    def test_padding_isolation(self):
        # changing padded token ids must not change unpadded outputs
        m = TransformerModel(tiny_config(layers=2), seed=6, dtype=np.float64)
        mask = np.array([1, 1, 1, 0, 0])
        h1, _ = m.encode([7, 8, 9, 0, 0], attn_mask=mask)
        h2, _ = m.encode([7, 8, 9, 30, 12], attn_mask=mask)
        np.testing.assert_allclose(h1.data[:3], h2.data[:3],
                                   rtol=1e-12, atol=1e-12)

    def test_padded_prefix_matches_unpadded_run(self):
        m = TransformerModel(tiny_config(layers=2), seed=6, dtype=np.float64)
        mask = np.array([1, 1, 1, 0, 0])
        hp, cp = m.encode([7, 8, 9, 0, 0], attn_mask=mask,
                          capture=CaptureRequest(attention_layers=(2,)))
        hu, cu = m.encode([7, 8, 9],
                          capture=CaptureRequest(attention_layers=(2,)))
        np.testing.assert_allclose(hp.data[:3], hu.data, rtol=1e-12, atol=1e-12)
        for ap, au in zip(cp.attentions[2], cu.attentions[2]):
            np.testing.assert_allclose(ap.data[:3, :3], au.data,
                                       rtol=1e-12, atol=1e-12)

    def test_capture_exact_layers_only(self):
        m = TransformerModel(tiny_config(layers=3), seed=7)
        _, cap = m.encode([1, 2], capture=CaptureRequest(
            attention_layers=(2,), hidden_layers=(0, 3)))
        assert set(cap.attentions) == {2}
        assert set(cap.queries) == {2}
        assert set(cap.hidden) == {0, 3}
        assert cap.last_attention_layer() == 2

    def test_capture_head_shapes(self):
        cfg = tiny_config(hidden=8, heads=2)
        m = TransformerModel(cfg, seed=8)
        _, cap = m.encode([1, 2, 3], capture=CaptureRequest(attention_layers=(1,)))
        assert len(cap.values[1]) == 2
        assert cap.values[1][0].shape == (3, 4)
        assert cap.attentions[1][0].shape == (3, 3)

    def test_attention_matches_loop_oracle(self):
        # loop attention on captured Q/K/V
        m = TransformerModel(tiny_config(), seed=9, dtype=np.float64)
        ids = [4, 11, 25, 2]
        _, cap = m.encode(ids, capture=CaptureRequest(attention_layers=(1,)))
        q = cap.queries[1][0].data
        k = cap.keys[1][0].data
        v = cap.values[1][0].data
        want_attn, _ = oracles.loop_attention_head(
            q.tolist(), k.tolist(), v.tolist(), dk=q.shape[1])
        np.testing.assert_allclose(cap.attentions[1][0].data, want_attn,
                                   rtol=1e-10, atol=1e-12)

    def test_input_validation(self):
        m = TransformerModel(tiny_config(max_len=4), seed=0)
        with pytest.raises(T.ShapeError):
            m.encode([1, 2, 3, 4, 5])           # too long
        with pytest.raises(T.ShapeError):
            m.encode([1, 99])                   # id out of range
        with pytest.raises(T.ShapeError):
            m.encode([])                        # empty
        with pytest.raises(T.MaskError):
            m.encode([1, 2], attn_mask=[0, 0])  # degenerate mask
        with pytest.raises(T.ShapeError):
            m.encode([1, 2], segment_ids=[0, 5])

    def test_dropout_changes_forward_and_rate_zero_does_not(self):
        m = TransformerModel(tiny_config(dropout_rate=0.3), seed=1)
        h1, _ = m.encode([1, 2, 3], dropout_rng=np.random.default_rng(0))
        h2, _ = m.encode([1, 2, 3], dropout_rng=np.random.default_rng(1))
        assert not np.array_equal(h1.data, h2.data)
        h3, _ = m.encode([1, 2, 3])   # no rng: identity
        h4, _ = m.encode([1, 2, 3])
        np.testing.assert_array_equal(h3.data, h4.data)


class TestMlmHead:
    def test_logit_shape_and_row_distribution(self):
        # shape; softmax rows sum to 1
        m = TransformerModel(tiny_config(), seed=10, dtype=np.float64)
        h, _ = m.encode([1, 2, 3])
        logits = m.mlm_logits(h)
        assert logits.shape == (3, 32)
        probs = T.softmax_rows(logits)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)

    def test_decoder_tied_to_token_embeddings(self):
        m = TransformerModel(tiny_config(), seed=11, dtype=np.float64)
        h, _ = m.encode([1, 2])
        logits = m.mlm_logits(h)
        T.backward(T.mean_all(T.mul(logits, logits)))
        assert m.parameters["embeddings.token"].grad is not None
        assert np.any(m.parameters["embeddings.token"].grad != 0)

    def test_mlm_gradient_finite_differences(self):
        # finite-difference oracle on a 4-token toy model
        cfg = ModelConfig(vocab_size=11, layers=1, hidden=6, heads=2, ff=12,
                          max_len=8)
        m = TransformerModel(cfg, seed=12, dtype=np.float64)
        ids = [1, 5, 8, 2]
        targets = [3, 7]
        positions = [0, 2]

        def loss():
            logp = T.log_softmax_rows(m.mlm_logits(m.encode(ids)[0]))
            picked = T.gather_elements(logp, positions, targets)
            return T.scale(T.sum_all(picked), -0.5)

        worst = compare_grads(loss, list(m.parameters.values()))
        assert worst < 1e-4
