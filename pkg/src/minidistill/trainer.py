"""Adam optimization, MLM pretraining, distillation stages, TA plans.

Optimization is Adam with bias correction and decoupled weight decay
(2-D parameters only; biases and layernorm affines are exempt), linear
warmup followed by linear decay, and optional global-norm gradient
clipping. Sequences are processed one at a time and averaged over the
batch; teacher forwards run without gradient recording and with dropout
disabled.

A distillation run is a DistillPlan of one or two stages: when the
requested student is at most half the teacher's depth AND at most half
its width, an intermediate assistant with the teacher's depth and the
student's width is trained first and then acts as the teacher for the
final stage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as D
from . import losses as L
from . import tensor as T
from .model import CaptureRequest, ModelConfig, TransformerModel
from .tensor import AutodiffError, Tensor


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError(f"total_steps must be positive, got "
                             f"{self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"warmup_steps {self.warmup_steps} outside "
                f"0..{self.total_steps}")
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup to the peak, then linear decay to zero."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(
            f"step {step} outside 0..{schedule.total_steps}")
    if step <= schedule.warmup_steps:
        if schedule.warmup_steps == 0:
            return 0.0 if step == 0 else schedule.peak_lr
        return schedule.peak_lr * step / schedule.warmup_steps
    return (schedule.peak_lr * (schedule.total_steps - step)
            / (schedule.total_steps - schedule.warmup_steps))


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              clip_norm: Optional[float] = None) -> None:
    """One bias-corrected Adam update over every parameter with a grad.

    Decoupled weight decay applies to 2-D parameters only (weight
    matrices and embeddings); 1-D biases and layernorm affines are
    exempt. Raises on non-finite gradients, naming the parameter.
    """
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            bad = int((~np.isfinite(t.grad)).sum())
            raise AutodiffError(
                f"non-finite gradient in {name!r} ({bad} entries) at "
                f"optimizer step {state.step + 1}; aborting")
    scale = 1.0
    if clip_norm is not None:
        norm = global_grad_norm(params)
        if norm > clip_norm:
            scale = clip_norm / norm
    state.step += 1
    t_step = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad * scale if scale != 1.0 else p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise AutodiffError(
                f"moment shape {m.shape} does not match parameter "
                f"{name!r} shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t_step)
        vhat = v / (1.0 - b2 ** t_step)
        update = mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay != 0.0 and p.data.ndim == 2:
            update = update + state.weight_decay * p.data
        p.data = p.data - lr * update


def write_metrics(path: str, metrics: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in metrics:
            fh.write(json.dumps(row) + "\n")


def _prepare_sequences(vocab: D.Vocab, corpus: Sequence[str],
                       max_len: int) -> list[list[int]]:
    seqs = []
    for doc in corpus:
        ids = vocab.encode(D.tokenize(doc))
        if ids:
            seqs.append(ids[:max_len - 2])
    if not seqs:
        raise ValueError("corpus produced no usable sequences")
    return seqs


def _check_finite_loss(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise AutodiffError(
            f"training diverged: loss {value} at step {step}")


def _mlm_step(model: TransformerModel, batch: D.MaskedBatch):
    """Batch-mean masked cross-entropy and top-1 accuracy."""
    total: Optional[Tensor] = None
    correct = 0
    count = 0
    b = len(batch)
    for i in range(b):
        n = int(batch.valid_lens[i])
        ids = batch.token_ids[i, :n]
        positions = batch.masked_positions[i]
        labels = batch.labels[i]
        h, _ = model.encode(ids, segment_ids=batch.segment_ids[i, :n])
        logits = model.mlm_logits(h)
        logp = T.log_softmax_rows(logits)
        picked = T.gather_elements(logp, positions, labels)
        seq_loss = T.scale(T.sum_all(picked), -1.0 / (len(positions) * b))
        total = seq_loss if total is None else T.add(total, seq_loss)
        pred = logits.data[positions].argmax(axis=1)
        correct += int((pred == np.asarray(labels)).sum())
        count += len(labels)
    return total, correct, count


def pretrain_teacher(config: ModelConfig, corpus: Sequence[str],
                     schedule: Schedule, seed: int, *,
                     steps: Optional[int] = None, batch_size: int = 8,
                     mask_rate: float = 0.15, clip_norm: Optional[float] = 1.0,
                     dtype=np.float32, vocab: Optional[D.Vocab] = None,
                     on_step: Optional[Callable[[dict], None]] = None):
    """Train a masked-LM teacher from scratch.

    The vocabulary is built from the corpus, capped at config.vocab_size;
    the model is sized to the actual vocabulary. Returns
    (model, vocab, metrics).
    """
    if vocab is None:
        vocab = D.build_vocab(corpus, config.vocab_size)
    config = replace(config, vocab_size=len(vocab))
    seqs = _prepare_sequences(vocab, corpus, config.max_len)
    model = TransformerModel(config, seed=seed, dtype=dtype)
    state = AdamState()
    rng = np.random.default_rng(seed)
    n_steps = schedule.total_steps if steps is None else steps
    metrics = []
    for step in range(1, n_steps + 1):
        chosen = [seqs[j] for j in rng.integers(0, len(seqs), batch_size)]
        batch = D.make_mlm_batch(vocab, chosen, mask_rate=mask_rate,
                                 seed=int(rng.integers(2 ** 31)))
        model.zero_grads()
        loss, correct, count = _mlm_step(model, batch)
        value = loss.item()
        _check_finite_loss(value, step)
        T.backward(loss)
        lr = lr_at(schedule, min(step, schedule.total_steps))
        adam_step(model.parameters, state, lr, clip_norm=clip_norm)
        row = {"step": step, "lr": lr, "loss": value, "loss_at": 0.0,
               "loss_vr": 0.0, "mlm_acc": correct / max(count, 1)}
        metrics.append(row)
        if on_step:
            on_step(row)
    return model, vocab, metrics


def _capture_request(mode: str, model_layers: int) -> CaptureRequest:
    if mode in ("minilm", "att_only", "value_mse"):
        return CaptureRequest(attention_layers=(model_layers,))
    if mode == "layer_to_layer":
        return CaptureRequest(attention_layers=tuple(
            range(1, model_layers + 1)))
    if mode == "hidden_relation":
        return CaptureRequest()          # final hidden comes from encode
    if mode == "soft_label":
        return CaptureRequest()
    raise ValueError(f"unknown mode {mode!r}")


def _sequence_distill_loss(mode: str, teacher: TransformerModel,
                           student: TransformerModel, ids: np.ndarray,
                           spec: L.DistillSpec,
                           masked_positions: Sequence[int],
                           projection: Optional[Tensor]):
    """Loss for one sequence; returns (loss, at_value, vr_value)."""
    t_req = _capture_request(mode, teacher.config.layers)
    s_req = _capture_request(mode, student.config.layers)
    with T.no_grad():
        t_hidden, t_cap = teacher.encode(ids, capture=t_req)
    s_hidden, s_cap = student.encode(ids, capture=s_req)
    n = len(ids)
    if mode == "minilm":
        at = L.attention_transfer_loss(t_cap, s_cap, n)
        vr = L.value_relation_loss(
            t_cap.values[teacher.config.layers],
            s_cap.values[student.config.layers], n)
        return T.add(at, vr), at.item(), vr.item()
    if mode == "att_only":
        at = L.attention_transfer_loss(t_cap, s_cap, n)
        return at, at.item(), 0.0
    if mode == "layer_to_layer":
        loss = L.layer_to_layer_loss(t_cap, s_cap, n)
        return loss, 0.0, 0.0
    if mode == "value_mse":
        loss = L.value_mse_loss(t_cap.values[teacher.config.layers],
                                s_cap.values[student.config.layers],
                                projection=projection)
        return loss, 0.0, 0.0
    if mode == "hidden_relation":
        loss = L.hidden_relation_loss(t_hidden, s_hidden, n,
                                      heads=teacher.config.heads)
        return loss, 0.0, 0.0
    if mode == "soft_label":
        with T.no_grad():
            t_logits = teacher.mlm_logits(t_hidden)
        s_logits = student.mlm_logits(s_hidden)
        loss = L.soft_label_loss(t_logits, s_logits, masked_positions,
                                 temperature=spec.soft_label_temperature)
        return loss, 0.0, 0.0
    raise ValueError(f"unknown mode {mode!r}")


RELATION_MODES = ("minilm", "att_only", "layer_to_layer", "value_mse",
                  "hidden_relation")


def distill_stage(teacher: TransformerModel, student_config: ModelConfig,
                  spec: L.DistillSpec, schedule: Schedule,
                  corpus: Sequence[str], vocab: D.Vocab, seed: int, *,
                  steps: Optional[int] = None, batch_size: int = 8,
                  mask_rate: float = 0.15, clip_norm: Optional[float] = 1.0,
                  dtype=np.float32,
                  init_from: Optional[TransformerModel] = None,
                  on_step: Optional[Callable[[dict], None]] = None):
    """Train one student against a frozen teacher. Returns
    (student, metrics)."""
    mode = spec.mode
    if mode in RELATION_MODES and mode != "value_mse":
        if teacher.config.heads != student_config.heads:
            raise ValueError(
                f"{mode} requires equal head counts, teacher has "
                f"{teacher.config.heads}, student {student_config.heads}")
    if mode == "layer_to_layer":
        L.uniform_layer_map(teacher.config.layers, student_config.layers)
    if teacher.config.vocab_size != student_config.vocab_size:
        raise ValueError(
            f"student vocab {student_config.vocab_size} must match teacher "
            f"vocab {teacher.config.vocab_size}")
    student = TransformerModel(student_config, seed=seed, dtype=dtype)
    if init_from is not None:
        if init_from.config != student_config:
            raise ValueError("init_from model config does not match the "
                             "student config")
        for name, tensor in student.parameters.items():
            tensor.data = init_from.parameters[name].data.astype(
                student.dtype).copy()
    projection = None
    if mode == "value_mse" and \
            teacher.config.head_dim != student_config.head_dim:
        projection = L.make_value_projection(
            student_config.head_dim, teacher.config.head_dim,
            seed=spec.projection_seed, dtype=dtype)
    train_params = dict(student.parameters)
    if projection is not None:
        train_params["value_projection"] = projection
    seqs = _prepare_sequences(vocab, corpus, student_config.max_len)
    state = AdamState()
    rng = np.random.default_rng(seed)
    n_steps = schedule.total_steps if steps is None else steps
    metrics = []
    for step in range(1, n_steps + 1):
        chosen = [seqs[j] for j in rng.integers(0, len(seqs), batch_size)]
        batch = D.make_mlm_batch(vocab, chosen, mask_rate=mask_rate,
                                 seed=int(rng.integers(2 ** 31)))
        for t in train_params.values():
            t.grad = None
        total = None
        at_total = vr_total = 0.0
        for i in range(len(batch)):
            n = int(batch.valid_lens[i])
            ids = batch.token_ids[i, :n]
            loss_i, at_i, vr_i = _sequence_distill_loss(
                mode, teacher, student, ids, spec,
                batch.masked_positions[i], projection)
            loss_i = T.scale(loss_i, 1.0 / len(batch))
            total = loss_i if total is None else T.add(total, loss_i)
            at_total += at_i / len(batch)
            vr_total += vr_i / len(batch)
        value = total.item()
        _check_finite_loss(value, step)
        T.backward(total)
        lr = lr_at(schedule, min(step, schedule.total_steps))
        adam_step(train_params, state, lr, clip_norm=clip_norm)
        row = {"step": step, "lr": lr, "loss": value,
               "loss_at": at_total, "loss_vr": vr_total}
        metrics.append(row)
        if on_step:
            on_step(row)
    return student, metrics


@dataclass(frozen=True)
class Stage:
    student_config: ModelConfig
    spec: L.DistillSpec
    schedule: Schedule
    steps: int
    is_assistant: bool = False


@dataclass(frozen=True)
class DistillPlan:
    stages: tuple

    def __post_init__(self):
        if not 1 <= len(self.stages) <= 2:
            raise ValueError("a plan has one stage, or two with an assistant")


def build_plan(teacher_config: ModelConfig, student_layers: int,
               student_hidden: int, spec: L.DistillSpec, schedule: Schedule,
               steps: int, ta: str | tuple[int, int] = "auto") -> DistillPlan:
    """Assemble the stage list, inserting an assistant when asked or when
    the auto rule fires: student at most half the teacher's depth and at
    most half its width. The assistant keeps the teacher's depth at the
    student's width and gets the same budget as the final stage."""
    tc = teacher_config
    if student_hidden % tc.heads != 0:
        raise ValueError(
            f"student hidden {student_hidden} must be divisible by the "
            f"shared head count {tc.heads}")

    def student_cfg(layers: int, hidden: int) -> ModelConfig:
        return replace(tc, layers=layers, hidden=hidden, ff=4 * hidden)

    final = Stage(student_cfg(student_layers, student_hidden), spec,
                  schedule, steps)
    assistant_shape: Optional[tuple[int, int]] = None
    if ta == "auto":
        if (2 * student_layers <= tc.layers
                and 2 * student_hidden <= tc.hidden):
            assistant_shape = (tc.layers, student_hidden)
    elif ta == "off":
        assistant_shape = None
    elif isinstance(ta, tuple):
        assistant_shape = ta
    else:
        raise ValueError(f"ta must be 'auto', 'off', or (layers, hidden); "
                         f"got {ta!r}")
    if assistant_shape is None:
        return DistillPlan(stages=(final,))
    ta_stage = Stage(student_cfg(*assistant_shape), spec, schedule, steps,
                     is_assistant=True)
    return DistillPlan(stages=(ta_stage, final))


def run_plan(teacher: TransformerModel, plan: DistillPlan,
             corpus: Sequence[str], vocab: D.Vocab, seed: int, *,
             batch_size: int = 8, mask_rate: float = 0.15,
             clip_norm: Optional[float] = 1.0, dtype=np.float32,
             on_step: Optional[Callable[[dict], None]] = None):
    """Execute the stages in order; each stage's student teaches the next.

    Returns (final_student, stage_reports, final_stage_metrics)."""
    current_teacher = teacher
    reports = []
    last_metrics: list[dict] = []
    for idx, stage in enumerate(plan.stages, start=1):
        student, metrics = distill_stage(
            current_teacher, stage.student_config, stage.spec,
            stage.schedule, corpus, vocab, seed + idx - 1,
            steps=stage.steps, batch_size=batch_size, mask_rate=mask_rate,
            clip_norm=clip_norm, dtype=dtype, on_step=on_step)
        tc, sc = current_teacher.config, stage.student_config
        reports.append({
            "stage": idx,
            "role": "assistant" if stage.is_assistant else "student",
            "teacher": f"{tc.layers}x{tc.hidden}",
            "student": f"{sc.layers}x{sc.hidden}",
            "steps": stage.steps,
            "initial_loss": metrics[0]["loss"],
            "final_loss": metrics[-1]["loss"],
        })
        current_teacher = student
        last_metrics = metrics
    return current_teacher, reports, last_metrics
