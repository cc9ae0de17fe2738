"""Distillation objectives: closed forms, loop oracles, gradient flow."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minidistill import losses as L
from minidistill import tensor as T
from minidistill.gradcheck import compare_grads
from minidistill.model import (AttentionCapture, CaptureRequest, ModelConfig,
                               TransformerModel)

import oracles


def synth_capture(attn_by_layer, values_by_layer=None, seq_len=None):
    """Build a capture from raw arrays: {layer: [per-head matrix, ...]}."""
    cap = AttentionCapture(seq_len=seq_len)
    for l, heads in attn_by_layer.items():
        cap.attentions[l] = [T.Tensor(np.asarray(h, dtype=np.float64))
                             for h in heads]
    for l, heads in (values_by_layer or {}).items():
        cap.values[l] = [T.Tensor(np.asarray(h, dtype=np.float64))
                         for h in heads]
    return cap


def real_pair(t_layers=2, s_layers=1, t_hidden=8, s_hidden=4, heads=2,
              seed=0, ids=(2, 7, 9), capture_all=False):
    teacher = TransformerModel(
        ModelConfig(vocab_size=13, layers=t_layers, hidden=t_hidden,
                    heads=heads, ff=2 * t_hidden, max_len=8),
        seed=seed, dtype=np.float64)
    student = TransformerModel(
        ModelConfig(vocab_size=13, layers=s_layers, hidden=s_hidden,
                    heads=heads, ff=2 * s_hidden, max_len=8),
        seed=seed + 1, dtype=np.float64)
    ids = np.asarray(ids)
    t_req = CaptureRequest(attention_layers=tuple(range(1, t_layers + 1))
                           if capture_all else (t_layers,))
    s_req = CaptureRequest(attention_layers=tuple(range(1, s_layers + 1))
                           if capture_all else (s_layers,))
    with T.no_grad():
        _, tcap = teacher.encode(ids, capture=t_req)
    _, scap = student.encode(ids, capture=s_req)
    return teacher, student, tcap, scap, ids


class TestAttentionTransfer:
    def test_identity_is_zero(self):
        # student capture == teacher capture
        a = [[0.3, 0.7], [0.6, 0.4]]
        t = synth_capture({1: [a]}, seq_len=2)
        s = synth_capture({1: [list(map(list, a))]}, seq_len=2)
        assert L.attention_transfer_loss(t, s, 2).item() == pytest.approx(
            0.0, abs=1e-15)

    def test_closed_form_ln2(self):
        # (1/2)(ln2 + ln2) = ln2
        t = synth_capture({1: [[[1.0, 0.0], [0.0, 1.0]]]}, seq_len=2)
        s = synth_capture({1: [[[0.5, 0.5], [0.5, 0.5]]]}, seq_len=2)
        got = L.attention_transfer_loss(t, s, 2).item()
        assert got == pytest.approx(math.log(2.0), abs=1e-12)

    def test_matches_scalar_loop_oracle(self):
        # loop KL over heads and rows, 1e-10 at 64-bit
        _, _, tcap, scap, ids = real_pair(heads=2, ids=(2, 7, 9))
        got = L.attention_transfer_loss(tcap, scap, len(ids)).item()
        tl, sl = tcap.last_attention_layer(), scap.last_attention_layer()
        per_head = [oracles.loop_kl_rows(tcap.attentions[tl][a].data.tolist(),
                                         scap.attentions[sl][a].data.tolist())
                    for a in range(2)]
        assert got == pytest.approx(sum(per_head) / 2, abs=1e-10)

    def test_head_count_mismatch_rejected(self):
        t = synth_capture({1: [[[1.0]], [[1.0]]]}, seq_len=1)
        s = synth_capture({1: [[[1.0]]]}, seq_len=1)
        with pytest.raises(ValueError, match="head"):
            L.attention_transfer_loss(t, s, 1)

    def test_length_mismatch_rejected(self):
        t = synth_capture({1: [[[1.0, 0.0], [0.0, 1.0]]]}, seq_len=2)
        s = synth_capture({1: [[[1.0]]]}, seq_len=1)
        with pytest.raises(ValueError, match="length"):
            L.attention_transfer_loss(t, s, 1)

    def test_student_zero_on_teacher_support_rejected(self):
        t = synth_capture({1: [[[0.5, 0.5], [0.5, 0.5]]]}, seq_len=2)
        s = synth_capture({1: [[[1.0, 0.0], [0.5, 0.5]]]}, seq_len=2)
        with pytest.raises(T.DistributionError):
            L.attention_transfer_loss(t, s, 2)

    def test_padded_run_matches_unpadded(self):
        # valid-region restriction: padding must not change the loss
        teacher = TransformerModel(
            ModelConfig(vocab_size=13, layers=2, hidden=8, heads=2, ff=16,
                        max_len=8), seed=3, dtype=np.float64)
        student = TransformerModel(
            ModelConfig(vocab_size=13, layers=1, hidden=4, heads=2, ff=8,
                        max_len=8), seed=4, dtype=np.float64)
        short = np.array([2, 7, 9, 5, 3])
        padded = np.array([2, 7, 9, 5, 3, 0, 0, 0])
        mask = np.array([1, 1, 1, 1, 1, 0, 0, 0])
        with T.no_grad():
            _, t_short = teacher.encode(short, capture=CaptureRequest(
                attention_layers=(2,)))
            _, t_pad = teacher.encode(padded, attn_mask=mask,
                                      capture=CaptureRequest(
                                          attention_layers=(2,)))
        _, s_short = student.encode(short, capture=CaptureRequest(
            attention_layers=(1,)))
        _, s_pad = student.encode(padded, attn_mask=mask,
                                  capture=CaptureRequest(attention_layers=(1,)))
        a = L.attention_transfer_loss(t_short, s_short, 5).item()
        b = L.attention_transfer_loss(t_pad, s_pad, 5).item()
        assert b == pytest.approx(a, abs=1e-10)
        va = L.value_relation_loss(t_short.values[2], s_short.values[1],
                                   5).item()
        vb = L.value_relation_loss(t_pad.values[2], s_pad.values[1], 5).item()
        assert vb == pytest.approx(va, abs=1e-10)


class TestValueRelation:
    def test_single_position(self):
        # one position
        out = L.value_relation(T.Tensor([[1.0, 2.0]]), 2, 1)
        np.testing.assert_array_equal(out.data, [[1.0]])

    def test_zero_values_uniform(self):
        # symmetry
        out = L.value_relation(T.Tensor(np.zeros((3, 4))), 4, 3)
        np.testing.assert_allclose(out.data, 1.0 / 3.0, atol=1e-15)

    def test_closed_form_identity_values(self):
        # rows softmax([1,0]) and softmax([0,1])
        out = L.value_relation(T.Tensor([[1.0, 0.0], [0.0, 1.0]]), 1, 2)
        np.testing.assert_allclose(
            out.data, [[0.73106, 0.26894], [0.26894, 0.73106]], atol=1e-4)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(13)
        v = rng.standard_normal((4, 3))
        got = L.value_relation(T.Tensor(v), 3, 4).data
        want = oracles.loop_value_relation(v.tolist(), 3)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_scale_dim_validation(self):
        with pytest.raises(ValueError):
            L.value_relation(T.Tensor([[1.0]]), 0, 1)
        with pytest.raises(ValueError):
            L.value_relation(T.Tensor([[1.0]]), 2, 0)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_invariant_under_orthogonal_rotation(self, seed):
        # V Q (Q orthogonal) has the same Gram matrix, hence same relation
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((4, 3))
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        a = L.value_relation(T.Tensor(v), 3, 4).data
        b = L.value_relation(T.Tensor(v @ q), 3, 4).data
        np.testing.assert_allclose(a, b, atol=1e-8)


class TestValueRelationLoss:
    def test_identical_values_zero(self):
        v = np.random.default_rng(14).standard_normal((3, 4))
        got = L.value_relation_loss([T.Tensor(v)], [T.Tensor(v.copy())], 3)
        assert got.item() == pytest.approx(0.0, abs=1e-15)

    def test_width_mismatch_is_fine_without_projection(self):
        # teacher d_k=8 vs student d_k'=2 needs no parameters
        rng = np.random.default_rng(15)
        tv = [T.Tensor(rng.standard_normal((4, 8))) for _ in range(2)]
        sv = [T.Tensor(rng.standard_normal((4, 2))) for _ in range(2)]
        val = L.value_relation_loss(tv, sv, 4).item()
        assert np.isfinite(val) and val >= 0

    def test_matches_scalar_loop_oracle(self):
        # loop VR + loop KL, 1e-10 at 64-bit
        rng = np.random.default_rng(16)
        tv = [rng.standard_normal((4, 6)) for _ in range(2)]
        sv = [rng.standard_normal((4, 2)) for _ in range(2)]
        got = L.value_relation_loss([T.Tensor(v) for v in tv],
                                    [T.Tensor(v) for v in sv], 4).item()
        per_head = []
        for t, s in zip(tv, sv):
            p = oracles.loop_value_relation(t.tolist(), 6)
            q = oracles.loop_value_relation(s.tolist(), 2)
            per_head.append(oracles.loop_kl_rows(p, q))
        assert got == pytest.approx(sum(per_head) / 2, abs=1e-10)

    def test_own_scale_dims_used(self):
        # teacher scaled by sqrt(6), student by sqrt(2): check against
        # explicitly scaled relations
        rng = np.random.default_rng(17)
        tv = rng.standard_normal((3, 6))
        sv = rng.standard_normal((3, 2))
        got = L.value_relation_loss([T.Tensor(tv)], [T.Tensor(sv)], 3).item()
        p = L.value_relation(T.Tensor(tv), 6, 3)
        q = L.value_relation(T.Tensor(sv), 2, 3)
        want = T.kl_div_rows(p, q).item()
        assert got == pytest.approx(want, rel=1e-12)


class TestCombined:
    def test_identity_zero(self):
        _, _, tcap, scap, ids = real_pair()
        same = L.minilm_loss(tcap, tcap, len(ids)).item()
        assert same == pytest.approx(0.0, abs=1e-12)

    def test_equals_sum_of_components(self):
        # definitional
        _, _, tcap, scap, ids = real_pair()
        whole = L.minilm_loss(tcap, scap, len(ids)).item()
        at = L.attention_transfer_loss(tcap, scap, len(ids)).item()
        vr = L.value_relation_loss(tcap.values[2], scap.values[1],
                                   len(ids)).item()
        assert whole == pytest.approx(at + vr, rel=1e-12)

    def test_gradients_pass_fd_through_two_layer_student(self):
        # finite differences, rel err < 1e-4 at 64-bit
        teacher = TransformerModel(
            ModelConfig(vocab_size=13, layers=2, hidden=8, heads=2, ff=16,
                        max_len=8), seed=20, dtype=np.float64)
        student = TransformerModel(
            ModelConfig(vocab_size=13, layers=2, hidden=4, heads=2, ff=8,
                        max_len=8), seed=21, dtype=np.float64)
        ids = np.array([2, 7, 9])
        with T.no_grad():
            _, tcap = teacher.encode(ids, capture=CaptureRequest(
                attention_layers=(2,)))

        def build():
            _, scap = student.encode(ids, capture=CaptureRequest(
                attention_layers=(2,)))
            return L.minilm_loss(tcap, scap, len(ids))

        worst = compare_grads(build, list(student.parameters.values()))
        assert worst < 1e-4


class TestSoftLabel:
    def test_identical_logits_zero(self):
        logits = T.Tensor(np.random.default_rng(22).standard_normal((3, 5)))
        got = L.soft_label_loss(logits, T.Tensor(logits.data.copy()), [0, 2])
        assert got.item() == pytest.approx(0.0, abs=1e-15)

    def test_closed_form_two_token_vocab(self):
        # p=(2/3,1/3), q=(1/2,1/2) ->
        #  (2/3)ln(4/3) + (1/3)ln(2/3) = 0.056633...
        t = T.Tensor([[math.log(2.0), 0.0]])
        s = T.Tensor([[0.0, 0.0]])
        got = L.soft_label_loss(t, s, [0], temperature=1.0).item()
        want = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.0566, abs=1e-4)

    def test_temperature_on_identical_still_zero(self):
        logits = T.Tensor(np.random.default_rng(23).standard_normal((2, 6)))
        got = L.soft_label_loss(logits, T.Tensor(logits.data.copy()), [1],
                                temperature=2.0)
        assert got.item() == pytest.approx(0.0, abs=1e-15)

    def test_temperature_squared_factor(self):
        # at large T both distributions flatten; the T^2 factor keeps the
        # loss from collapsing: verify the exact definitional identity
        rng = np.random.default_rng(24)
        t = T.Tensor(rng.standard_normal((2, 4)))
        s = T.Tensor(rng.standard_normal((2, 4)))
        temp = 3.0
        got = L.soft_label_loss(t, s, [0, 1], temperature=temp).item()
        p = T.softmax_rows(T.scale(t, 1 / temp)).data
        q = T.softmax_rows(T.scale(s, 1 / temp)).data
        want = temp ** 2 * oracles.loop_kl_rows(p.tolist(), q.tolist())
        assert got == pytest.approx(want, rel=1e-10)

    def test_empty_masked_positions_rejected(self):
        logits = T.Tensor(np.zeros((2, 4)))
        with pytest.raises(ValueError, match="masked position"):
            L.soft_label_loss(logits, logits, [])

    def test_only_masked_rows_contribute(self):
        rng = np.random.default_rng(25)
        t = rng.standard_normal((4, 5))
        s = rng.standard_normal((4, 5))
        t2 = t.copy()
        s2 = s.copy()
        t2[1] = 99.0   # unmasked rows may differ arbitrarily
        s2[3] = -7.0
        a = L.soft_label_loss(T.Tensor(t), T.Tensor(s), [0, 2]).item()
        b = L.soft_label_loss(T.Tensor(t2), T.Tensor(s2), [0, 2]).item()
        assert a == pytest.approx(b, rel=1e-12)


class TestLayerToLayer:
    def test_uniform_map_twelve_to_three(self):
        # g(i) = i * (L/M)
        assert L.uniform_layer_map(12, 3) == {1: 4, 2: 8, 3: 12}

    def test_identity_map_and_zero_loss(self):
        # M == L, identical models
        assert L.uniform_layer_map(4, 4) == {1: 1, 2: 2, 3: 3, 4: 4}
        model = TransformerModel(
            ModelConfig(vocab_size=13, layers=2, hidden=8, heads=2, ff=16,
                        max_len=8), seed=26, dtype=np.float64)
        ids = np.array([2, 7, 9])
        req = CaptureRequest(attention_layers=(1, 2))
        with T.no_grad():
            _, cap = model.encode(ids, capture=req)
        got = L.layer_to_layer_loss(cap, cap, len(ids)).item()
        assert got == pytest.approx(0.0, abs=1e-12)

    def test_indivisible_rejected(self):
        # precondition
        with pytest.raises(ValueError, match="divisible"):
            L.uniform_layer_map(12, 5)

    def test_matches_scalar_loop_oracle(self):
        # loop KL + loop VR at mapped pairs, averaged
        _, _, tcap, scap, ids = real_pair(t_layers=2, s_layers=2,
                                          capture_all=True, seed=30)
        got = L.layer_to_layer_loss(tcap, scap, len(ids)).item()
        pair_losses = []
        for s_layer, t_layer in ((1, 1), (2, 2)):
            at_heads = [oracles.loop_kl_rows(
                tcap.attentions[t_layer][a].data.tolist(),
                scap.attentions[s_layer][a].data.tolist()) for a in range(2)]
            vr_heads = []
            for a in range(2):
                tv = tcap.values[t_layer][a].data
                sv = scap.values[s_layer][a].data
                p = oracles.loop_value_relation(tv.tolist(), tv.shape[1])
                q = oracles.loop_value_relation(sv.tolist(), sv.shape[1])
                vr_heads.append(oracles.loop_kl_rows(p, q))
            pair_losses.append(sum(at_heads) / 2 + sum(vr_heads) / 2)
        assert got == pytest.approx(sum(pair_losses) / 2, abs=1e-10)

    def test_single_pair_equals_last_layer_objective(self):
        _, _, tcap, scap, ids = real_pair(t_layers=2, s_layers=1,
                                          capture_all=True, seed=31)
        l2l = L.layer_to_layer_loss(tcap, scap, len(ids)).item()
        last = L.minilm_loss(tcap, scap, len(ids)).item()
        assert l2l == pytest.approx(last, rel=1e-12)


class TestValueMse:
    def test_identity_zero_without_projection(self):
        # equal widths
        v = np.random.default_rng(32).standard_normal((3, 4))
        got = L.value_mse_loss([T.Tensor(v)], [T.Tensor(v.copy())])
        assert got.item() == 0.0

    def test_hand_value_with_fixed_projection(self):
        # (2 - 1)^2 = 1
        got = L.value_mse_loss([T.Tensor([[2.0]])], [T.Tensor([[1.0]])],
                               projection=T.Tensor([[1.0]]))
        assert got.item() == pytest.approx(1.0, abs=1e-15)

    def test_projection_required_on_width_mismatch(self):
        tv = [T.Tensor(np.zeros((2, 4)))]
        sv = [T.Tensor(np.zeros((2, 2)))]
        with pytest.raises(ValueError, match="projection"):
            L.value_mse_loss(tv, sv)

    def test_projection_gradient_flows(self):
        # finite differences incl. the projection parameter
        rng = np.random.default_rng(33)
        tv = [T.Tensor(rng.standard_normal((3, 4))) for _ in range(2)]
        proj = L.make_value_projection(2, 4, seed=0)
        sv_data = [rng.standard_normal((3, 2)) for _ in range(2)]
        sv = [T.Tensor(d, requires_grad=True) for d in sv_data]
        worst = compare_grads(
            lambda: L.value_mse_loss(tv, sv, projection=proj), [proj] + sv)
        assert worst < 1e-4
        assert proj.grad is not None and np.any(proj.grad != 0)

    def test_averaged_over_heads(self):
        a = L.value_mse_loss([T.Tensor([[2.0]]), T.Tensor([[0.0]])],
                             [T.Tensor([[0.0]]), T.Tensor([[0.0]])])
        assert a.item() == pytest.approx(2.0, abs=1e-15)


class TestHiddenRelation:
    def test_identical_hidden_zero(self):
        h = np.random.default_rng(34).standard_normal((3, 8))
        got = L.hidden_relation_loss(T.Tensor(h), T.Tensor(h.copy()), 3,
                                     heads=2)
        assert got.item() == pytest.approx(0.0, abs=1e-15)

    def test_width_mismatch_feasible(self):
        # d_h=8 teacher vs d_h'=4 student
        rng = np.random.default_rng(35)
        got = L.hidden_relation_loss(T.Tensor(rng.standard_normal((3, 8))),
                                     T.Tensor(rng.standard_normal((3, 4))),
                                     3, heads=2)
        assert np.isfinite(got.item()) and got.item() >= 0

    def test_matches_scalar_loop_oracle(self):
        # pseudo-head split + loop VR + loop KL
        rng = np.random.default_rng(36)
        th = rng.standard_normal((3, 8))
        sh = rng.standard_normal((3, 4))
        got = L.hidden_relation_loss(T.Tensor(th), T.Tensor(sh), 3,
                                     heads=2).item()
        per_head = []
        for a in range(2):
            t_part = th[:, a * 4:(a + 1) * 4]
            s_part = sh[:, a * 2:(a + 1) * 2]
            p = oracles.loop_value_relation(t_part.tolist(), 4)
            q = oracles.loop_value_relation(s_part.tolist(), 2)
            per_head.append(oracles.loop_kl_rows(p, q))
        assert got == pytest.approx(sum(per_head) / 2, abs=1e-10)

    def test_indivisible_width_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            L.hidden_relation_loss(T.Tensor(np.zeros((2, 9))),
                                   T.Tensor(np.zeros((2, 4))), 2, heads=2)


class TestDistillSpec:
    def test_valid_modes_accepted(self):
        for mode in L.MODES:
            assert L.DistillSpec(mode=mode).mode == mode

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            L.DistillSpec(mode="逆蒸留")

    def test_bad_temperature_rejected(self):
        with pytest.raises(ValueError):
            L.DistillSpec(mode="soft_label", soft_label_temperature=0.0)


class TestNonNegativity:
    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_relation_losses_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        tv = [T.Tensor(rng.standard_normal((3, 4)))]
        sv = [T.Tensor(rng.standard_normal((3, 2)))]
        assert L.value_relation_loss(tv, sv, 3).item() >= -1e-12
