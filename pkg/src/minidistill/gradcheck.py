"""Finite-difference verification of every differentiable operation.

Central differences with h = 1e-5 on float64 inputs, compared against
the reverse-mode gradient. Relative error uses a unit floor in the
denominator so near-zero gradients are compared absolutely:

    rel = |analytic - numeric| / max(1, |analytic|, |numeric|)

``run_gradcheck`` walks a registry holding one entry per differentiable
op, so the report names each exactly once.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(f: Callable[[], T.Tensor], leaf: T.Tensor,
                 h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. leaf.data."""
    out = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def compare_grads(f: Callable[[], T.Tensor],
                  leaves: list[T.Tensor],
                  h: float = FD_STEP) -> float:
    """Worst relative error between reverse-mode and numeric gradients."""
    for leaf in leaves:
        leaf.zero_grad()
    loss = f()
    T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numeric_grad(f, leaf, h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        rel = np.abs(analytic - numeric) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


def _leaf(rng: np.random.Generator, shape, lo=-1.0, hi=1.0) -> T.Tensor:
    return T.Tensor(rng.uniform(lo, hi, size=shape).astype(np.float64),
                    requires_grad=True)


def _mean_sq(t: T.Tensor) -> T.Tensor:
    # squared reduction keeps FD sensitive to every entry's sign
    return T.mean_all(T.mul(t, t))


def _check_matmul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    return compare_grads(lambda: _mean_sq(T.matmul(a, b)), [a, b])


def _check_add(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    bias = _leaf(rng, (4,))
    worst = compare_grads(lambda: _mean_sq(T.add(a, b)), [a, b])
    c = _leaf(rng, (3, 4))
    return max(worst,
               compare_grads(lambda: _mean_sq(T.add(c, bias)), [c, bias]))


def _check_mul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    return compare_grads(lambda: _mean_sq(T.mul(a, b)), [a, b])


def _check_scale(rng):
    a = _leaf(rng, (3, 4))
    return compare_grads(lambda: _mean_sq(T.scale(a, -1.7)), [a])


def _check_transpose(rng):
    a = _leaf(rng, (3, 5))
    w = _leaf(rng, (3, 5))
    return compare_grads(lambda: _mean_sq(T.mul(T.transpose(T.transpose(a)), w)), [a, w])


def _check_softmax_rows(rng):
    x = _leaf(rng, (4, 6), -2.0, 2.0)
    w = _leaf(rng, (4, 6))
    worst = compare_grads(lambda: _mean_sq(T.mul(T.softmax_rows(x), w)), [x])
    mask = np.ones((4, 6))
    mask[:, 4:] = 0
    y = _leaf(rng, (4, 6), -2.0, 2.0)
    return max(worst,
               compare_grads(lambda: _mean_sq(T.mul(T.softmax_rows(y, mask), w)), [y]))


def _check_log_softmax_rows(rng):
    x = _leaf(rng, (4, 6), -2.0, 2.0)
    w = _leaf(rng, (4, 6))
    return compare_grads(lambda: _mean_sq(T.mul(T.log_softmax_rows(x), w)), [x])


def _check_kl_div_rows(rng):
    p = T.Tensor(T.softmax_rows(_leaf(rng, (3, 5), -1.5, 1.5)).data)
    x = _leaf(rng, (3, 5), -1.5, 1.5)
    return compare_grads(lambda: T.kl_div_rows(p, T.softmax_rows(x)), [x])


def _check_layernorm(rng):
    x = _leaf(rng, (3, 6), -2.0, 2.0)
    gamma = _leaf(rng, (6,), 0.5, 1.5)
    beta = _leaf(rng, (6,))
    w = _leaf(rng, (3, 6))
    return compare_grads(
        lambda: _mean_sq(T.mul(T.layernorm(x, gamma, beta), w)),
        [x, gamma, beta])


def _check_gelu(rng):
    x = _leaf(rng, (4, 5), -3.0, 3.0)
    return compare_grads(lambda: _mean_sq(T.gelu(x)), [x])


def _check_mse(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    return compare_grads(lambda: T.mse(a, b), [a, b])


def _check_sum_all(rng):
    a = _leaf(rng, (3, 4))
    return compare_grads(lambda: T.sum_all(T.mul(a, a)), [a])


def _check_embedding_lookup(rng):
    table = _leaf(rng, (7, 4))
    ids = np.array([1, 3, 3, 0, 6])
    w = _leaf(rng, (5, 4))
    return compare_grads(
        lambda: _mean_sq(T.mul(T.embedding_lookup(table, ids), w)), [table])


def _check_slice_rows(rng):
    x = _leaf(rng, (6, 4))
    w = _leaf(rng, (3, 4))
    return compare_grads(lambda: _mean_sq(T.mul(T.slice_rows(x, 1, 4), w)), [x])


def _check_slice_cols(rng):
    x = _leaf(rng, (4, 8))
    w = _leaf(rng, (4, 3))
    return compare_grads(lambda: _mean_sq(T.mul(T.slice_cols(x, 2, 5), w)), [x])


def _check_concat_cols(rng):
    a, b, c = _leaf(rng, (3, 2)), _leaf(rng, (3, 4)), _leaf(rng, (3, 1))
    w = _leaf(rng, (3, 7))
    return compare_grads(
        lambda: _mean_sq(T.mul(T.concat_cols([a, b, c]), w)), [a, b, c])


def _check_select_rows(rng):
    x = _leaf(rng, (6, 4))
    idx = np.array([0, 2, 2, 5])
    w = _leaf(rng, (4, 4))
    return compare_grads(lambda: _mean_sq(T.mul(T.select_rows(x, idx), w)), [x])


def _check_gather_elements(rng):
    x = _leaf(rng, (5, 6))
    rows = np.array([0, 2, 2, 4])
    cols = np.array([1, 1, 5, 0])

    def build():
        g = T.gather_elements(x, rows, cols)
        return T.sum_all(T.mul(g, g))

    return compare_grads(build, [x])


def _check_dropout(rng):
    x = _leaf(rng, (4, 5))

    def build():
        # fresh generator per call keeps the mask identical across FD probes
        return _mean_sq(T.dropout(x, 0.4, np.random.default_rng(99)))

    return compare_grads(build, [x])


OP_CHECKS: dict[str, Callable] = {
    "matmul": _check_matmul,
    "add": _check_add,
    "mul": _check_mul,
    "scale": _check_scale,
    "transpose": _check_transpose,
    "softmax_rows": _check_softmax_rows,
    "log_softmax_rows": _check_log_softmax_rows,
    "kl_div_rows": _check_kl_div_rows,
    "layernorm": _check_layernorm,
    "gelu": _check_gelu,
    "mse": _check_mse,
    "sum_all": _check_sum_all,
    "embedding_lookup": _check_embedding_lookup,
    "slice_rows": _check_slice_rows,
    "slice_cols": _check_slice_cols,
    "concat_cols": _check_concat_cols,
    "select_rows": _check_select_rows,
    "gather_elements": _check_gather_elements,
    "dropout": _check_dropout,
}


def _loss_checks(rng) -> list[tuple[str, float]]:
    from . import losses as L
    from . import tensor as tt
    from .model import CaptureRequest, ModelConfig, TransformerModel

    teacher = TransformerModel(
        ModelConfig(vocab_size=13, layers=2, hidden=8, heads=2, ff=16,
                    max_len=8), seed=5, dtype=np.float64)
    student = TransformerModel(
        ModelConfig(vocab_size=13, layers=1, hidden=4, heads=2, ff=8,
                    max_len=8), seed=6, dtype=np.float64)
    ids = np.array([2, 7, 9, 5, 3])
    n = len(ids)
    with tt.no_grad():
        th, tcap = teacher.encode(
            ids, capture=CaptureRequest(attention_layers=(2,)))
        tlogits = teacher.mlm_logits(th)
    params = list(student.parameters.values())

    def scap():
        return student.encode(
            ids, capture=CaptureRequest(attention_layers=(1,)))[1]

    results = [
        ("attention_transfer_loss", compare_grads(
            lambda: L.attention_transfer_loss(tcap, scap(), n), params)),
        ("value_relation_loss", compare_grads(
            lambda: L.value_relation_loss(tcap.values[2], scap().values[1], n),
            params)),
        ("soft_label_loss", compare_grads(
            lambda: L.soft_label_loss(
                tlogits, student.mlm_logits(student.encode(ids)[0]),
                masked_positions=[1, 3], temperature=2.0), params)),
        ("hidden_relation_loss", compare_grads(
            lambda: L.hidden_relation_loss(th, student.encode(ids)[0], n,
                                           heads=2), params)),
    ]
    return results


def _model_checks(rng) -> list[tuple[str, float]]:
    from . import tensor as tt
    from .model import ModelConfig, TransformerModel

    model = TransformerModel(
        ModelConfig(vocab_size=11, layers=2, hidden=6, heads=2, ff=12,
                    max_len=8), seed=3, dtype=np.float64)
    ids = np.array([1, 5, 8, 2])
    params = list(model.parameters.values())

    def encode_loss():
        h, _ = model.encode(ids)
        return tt.mean_all(tt.mul(h, h))

    def mlm_loss():
        logits = model.mlm_logits(model.encode(ids)[0])
        logp = tt.log_softmax_rows(logits)
        picked = tt.gather_elements(logp, [0, 2], [3, 7])
        return tt.scale(tt.sum_all(picked), -0.5)

    return [
        ("encoder_forward", compare_grads(encode_loss, params, h=1e-5)),
        ("mlm_head", compare_grads(mlm_loss, params, h=1e-5)),
    ]


def run_gradcheck(module: str = "all",
                  op_table: Optional[dict[str, Callable]] = None,
                  seed: int = 17) -> list[tuple[str, float, bool]]:
    """Check gradients for the chosen module group.

    Returns (name, worst_rel_err, ok) rows; each differentiable op
    appears exactly once when module covers the op table.
    """
    if module not in ("all", "ops", "losses", "model"):
        raise ValueError(f"unknown gradcheck module {module!r}")
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, float, bool]] = []

    def collect(name: str, worst: float) -> None:
        rows.append((name, worst, bool(worst < FD_TOL)))

    if module in ("all", "ops"):
        table = OP_CHECKS if op_table is None else op_table
        for name, check in table.items():
            collect(name, check(rng))
    if module in ("all", "losses"):
        for name, worst in _loss_checks(rng):
            collect(name, worst)
    if module in ("all", "model"):
        for name, worst in _model_checks(rng):
            collect(name, worst)
    return rows


def format_report(rows: list[tuple[str, float, bool]]) -> str:
    lines = []
    width = max(len(name) for name, _, _ in rows)
    for name, worst, ok in rows:
        status = "ok" if ok else "FAIL"
        lines.append(f"{name:<{width}}  rel_err={worst:.3e}  {status}")
    bad = sum(1 for _, _, ok in rows if not ok)
    lines.append(f"{len(rows)} checks, {bad} failures, tolerance {FD_TOL:g}")
    return "\n".join(lines)
