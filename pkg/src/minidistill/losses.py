"""Distillation objectives over captured encoder activations.

The primary objective transfers two kinds of last-layer knowledge from
teacher to student, both as per-head, per-row KL divergences normalized
by 1/(heads * valid_len):

  * attention transfer: teacher vs student self-attention distributions;
  * value relation: row-softmax of V V^T / sqrt(d_k), each model scaled
    by its own head dimension, which makes the matrices |x| x |x| and
    therefore comparable across different student widths without any
    projection parameters.

Baselines: soft-label MLM KD, uniform layer-to-layer transfer, value
MSE with a trainable width projection, attention-only, and a hidden-state
relation variant.

Teacher activations are expected to come from a ``no_grad`` forward;
gradients flow into the student side only.

Padding: every loss runs over the first ``valid_len`` positions. The
valid-region attention distribution is recomputed from captured Q/K rows,
which equals restricting the full masked softmax to valid keys and
renormalizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .model import AttentionCapture
from .tensor import Tensor

MODES = ("minilm", "att_only", "soft_label", "layer_to_layer",
         "value_mse", "hidden_relation")


@dataclass(frozen=True)
class DistillSpec:
    mode: str
    soft_label_temperature: float = 1.0
    projection_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(
                f"unknown distillation mode {self.mode!r}; expected one of "
                f"{', '.join(MODES)}")
        if self.soft_label_temperature <= 0:
            raise ValueError("soft_label_temperature must be > 0, got "
                             f"{self.soft_label_temperature}")


def _mean_scalars(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def _check_valid_len(valid_len: int, seq_len: int) -> None:
    if not 1 <= valid_len <= seq_len:
        raise ValueError(
            f"valid_len {valid_len} outside 1..{seq_len}")


def _check_heads(n_teacher: int, n_student: int) -> None:
    if n_teacher != n_student:
        raise ValueError(
            f"relation transfer needs equal head counts, got teacher "
            f"{n_teacher} vs student {n_student}")


def _valid_attention(cap: AttentionCapture, layer: int, head: int,
                     valid_len: int) -> Tensor:
    """Attention distribution over the first valid_len positions."""
    if valid_len == cap.seq_len:
        return cap.attentions[layer][head]
    if layer not in cap.queries or not cap.queries[layer]:
        raise ValueError(
            "padded attention transfer needs captured queries/keys")
    q = T.slice_rows(cap.queries[layer][head], 0, valid_len)
    k = T.slice_rows(cap.keys[layer][head], 0, valid_len)
    dk = q.shape[1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    return T.softmax_rows(scores)


def _attention_kl(teacher_cap: AttentionCapture, student_cap: AttentionCapture,
                  t_layer: int, s_layer: int, valid_len: int) -> Tensor:
    t_heads = teacher_cap.attentions[t_layer]
    s_heads = student_cap.attentions[s_layer]
    _check_heads(len(t_heads), len(s_heads))
    if teacher_cap.seq_len != student_cap.seq_len:
        raise ValueError(
            f"sequence lengths differ: teacher {teacher_cap.seq_len} vs "
            f"student {student_cap.seq_len}")
    _check_valid_len(valid_len, teacher_cap.seq_len)
    terms = []
    for a in range(len(t_heads)):
        p = _valid_attention(teacher_cap, t_layer, a, valid_len)
        q = _valid_attention(student_cap, s_layer, a, valid_len)
        terms.append(T.kl_div_rows(p, q))
    return _mean_scalars(terms)


def attention_transfer_loss(teacher_cap: AttentionCapture,
                            student_cap: AttentionCapture,
                            valid_len: int) -> Tensor:
    """Mean per-head, per-row KL between last-layer attention maps."""
    return _attention_kl(teacher_cap, student_cap,
                         teacher_cap.last_attention_layer(),
                         student_cap.last_attention_layer(), valid_len)


def value_relation(values: Tensor, scale_dim: int, valid_len: int) -> Tensor:
    """Row-softmax of V V^T / sqrt(scale_dim) over valid positions.

    The output is valid_len x valid_len for any head width, which is what
    lets teacher and student relations be compared directly.
    """
    if scale_dim <= 0:
        raise ValueError(f"scale_dim must be positive, got {scale_dim}")
    if valid_len <= 0:
        raise ValueError(f"degenerate valid_len {valid_len}")
    _check_valid_len(valid_len, values.shape[0])
    v = T.slice_rows(values, 0, valid_len) \
        if valid_len < values.shape[0] else values
    scores = T.scale(T.matmul(v, T.transpose(v)), 1.0 / math.sqrt(scale_dim))
    return T.softmax_rows(scores)


def _value_relation_kl(teacher_values: Sequence[Tensor],
                       student_values: Sequence[Tensor],
                       valid_len: int) -> Tensor:
    _check_heads(len(teacher_values), len(student_values))
    if teacher_values[0].shape[0] != student_values[0].shape[0]:
        raise ValueError(
            f"sequence lengths differ: teacher {teacher_values[0].shape[0]} "
            f"vs student {student_values[0].shape[0]}")
    terms = []
    for tv, sv in zip(teacher_values, student_values):
        p = value_relation(tv, tv.shape[1], valid_len)
        q = value_relation(sv, sv.shape[1], valid_len)
        terms.append(T.kl_div_rows(p, q))
    return _mean_scalars(terms)


def value_relation_loss(teacher_values: Sequence[Tensor],
                        student_values: Sequence[Tensor],
                        valid_len: int) -> Tensor:
    """Mean per-head, per-row KL between value-relation matrices.

    Each side is scaled by the square root of its own head width, so no
    projection parameters are introduced for a thinner student.
    """
    return _value_relation_kl(teacher_values, student_values, valid_len)


def minilm_loss(teacher_cap: AttentionCapture, student_cap: AttentionCapture,
                valid_len: int) -> Tensor:
    """Attention transfer plus value relation on the last layers."""
    at = attention_transfer_loss(teacher_cap, student_cap, valid_len)
    vr = value_relation_loss(
        teacher_cap.values[teacher_cap.last_attention_layer()],
        student_cap.values[student_cap.last_attention_layer()], valid_len)
    return T.add(at, vr)


def soft_label_loss(teacher_logits: Tensor, student_logits: Tensor,
                    masked_positions: Sequence[int],
                    temperature: float = 1.0) -> Tensor:
    """Temperature-scaled KL on MLM output distributions, masked rows only.

    Mean over masked positions of KL(softmax(t/T) || softmax(s/T)),
    multiplied by T^2 so gradient magnitudes stay comparable across T.
    """
    positions = list(masked_positions)
    if not positions:
        raise ValueError("soft_label_loss needs at least one masked position")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if teacher_logits.shape != student_logits.shape:
        raise T.ShapeError(
            f"logit shapes differ: {teacher_logits.shape} vs "
            f"{student_logits.shape}")
    inv_t = 1.0 / temperature
    p = T.softmax_rows(T.scale(T.select_rows(teacher_logits, positions), inv_t))
    q = T.softmax_rows(T.scale(T.select_rows(student_logits, positions), inv_t))
    return T.scale(T.kl_div_rows(p, q), temperature * temperature)


def uniform_layer_map(teacher_layers: int, student_layers: int) -> dict[int, int]:
    """Student layer i -> teacher layer i * (L/M); requires divisibility."""
    if teacher_layers % student_layers != 0:
        raise ValueError(
            f"teacher layers {teacher_layers} not divisible by student "
            f"layers {student_layers}")
    step = teacher_layers // student_layers
    return {i: i * step for i in range(1, student_layers + 1)}


def layer_to_layer_loss(teacher_cap: AttentionCapture,
                        student_cap: AttentionCapture,
                        valid_len: int,
                        projection: Optional[Tensor] = None) -> Tensor:
    """Attention + value-relation KL at uniformly mapped layer pairs.

    Captures must hold every layer of both models. The mapped pairs each
    contribute the same two KL terms as the last-layer objective; the
    result is their average over pairs. ``projection`` is accepted for
    interface parity with feature-MSE variants and is not used by the
    relation KL terms.
    """
    t_layers = teacher_cap.last_attention_layer()
    s_layers = student_cap.last_attention_layer()
    mapping = uniform_layer_map(t_layers, s_layers)
    terms = []
    for s_layer, t_layer in mapping.items():
        at = _attention_kl(teacher_cap, student_cap, t_layer, s_layer,
                           valid_len)
        vr = _value_relation_kl(teacher_cap.values[t_layer],
                                student_cap.values[s_layer], valid_len)
        terms.append(T.add(at, vr))
    return _mean_scalars(terms)


def make_value_projection(student_dk: int, teacher_dk: int, seed: int,
                          dtype=np.float64) -> Tensor:
    """Trainable d_k' -> d_k map for the value-MSE baseline (shared
    across heads)."""
    rng = np.random.default_rng(seed)
    data = rng.normal(0.0, 0.02, size=(student_dk, teacher_dk)).astype(dtype)
    return Tensor(data, requires_grad=True, name="value_projection")


def value_mse_loss(teacher_values: Sequence[Tensor],
                   student_values: Sequence[Tensor],
                   projection: Optional[Tensor] = None) -> Tensor:
    """Mean squared error between teacher values and projected student
    values, averaged over heads; the projection is trained jointly."""
    _check_heads(len(teacher_values), len(student_values))
    t_dk = teacher_values[0].shape[1]
    s_dk = student_values[0].shape[1]
    if projection is None:
        if s_dk != t_dk:
            raise ValueError(
                f"value widths differ (teacher {t_dk}, student {s_dk}); "
                "a projection is required")
    elif projection.shape != (s_dk, t_dk):
        raise T.ShapeError(
            f"projection shape {projection.shape} does not map "
            f"{s_dk} -> {t_dk}")
    terms = []
    for tv, sv in zip(teacher_values, student_values):
        mapped = sv if projection is None else T.matmul(sv, projection)
        terms.append(T.mse(tv, mapped))
    return _mean_scalars(terms)


def hidden_relation_loss(teacher_hidden: Tensor, student_hidden: Tensor,
                         valid_len: int, heads: int) -> Tensor:
    """Value-relation construction applied to last hidden states.

    Splits each hidden width into ``heads`` equal pseudo-heads and
    compares their relation matrices; experimental baseline.
    """
    if heads <= 0:
        raise ValueError(f"heads must be positive, got {heads}")
    for label, h in (("teacher", teacher_hidden), ("student", student_hidden)):
        if h.shape[1] % heads != 0:
            raise ValueError(
                f"{label} hidden width {h.shape[1]} not divisible into "
                f"{heads} pseudo-heads")

    def split(h: Tensor) -> list[Tensor]:
        dk = h.shape[1] // heads
        return [T.slice_cols(h, a * dk, (a + 1) * dk) for a in range(heads)]

    return _value_relation_kl(split(teacher_hidden), split(student_hidden),
                              valid_len)
