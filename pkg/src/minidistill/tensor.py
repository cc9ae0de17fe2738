"""Dense 2-D tensor core with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for gradient
checks and oracles). Every differentiable operation appends an OpRecord
to the graph hanging off its output tensor; ``backward`` replays those
records in exact reverse execution order and accumulates gradients into
every ``requires_grad`` ancestor.

Scope is deliberately narrow: 2-D matrices, 1-D vectors and 0-D scalars,
plus the single broadcast the encoder needs (matrix + bias row). No
higher-order derivatives, no GPU, no sparse storage.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MaskError(ValueError):
    """An attention mask is degenerate (a row with no valid position)."""


class DistributionError(ValueError):
    """A tensor fails a probability-distribution precondition."""


class AutodiffError(RuntimeError):
    """Backward-pass misuse: non-scalar root, repeated backward, NaN."""


# Additive pre-softmax penalty for masked positions. Large enough that
# exp(x - rowmax) underflows to exactly 0.0 at both precisions.
MASK_FILL = -1e30

_seq_counter = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (teacher forwards)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class flop_counter:
    """Context manager that accumulates multiply-add FLOPs of matmuls.

    Counts 2*m*k*n per (m x k) @ (k x n) product, the same convention the
    analytic per-token estimate uses.
    """

    def __enter__(self):
        self._prev = getattr(_state, "flops", None)
        _state.flops = 0
        return self

    def __exit__(self, *exc):
        self.flops = _state.flops
        _state.flops = self._prev
        return False


def _count_flops(n: int) -> None:
    if getattr(_state, "flops", None) is not None:
        _state.flops += n


class OpRecord:
    """One executed differentiable operation on the tape.

    Holds the op name, references to input/output tensors and a backward
    closure (whose captured arrays are the saved intermediates). ``seq``
    is the global execution index used to replay in exact reverse order.
    """

    __slots__ = ("name", "inputs", "out", "backward", "seq")

    def __init__(self, name: str, inputs: Sequence["Tensor"],
                 out: "Tensor", backward: Callable[[np.ndarray], None]):
        self.name = name
        self.inputs = tuple(inputs)
        self.out = out
        self.backward = backward
        self.seq = next(_seq_counter)


class Tape:
    """Ordered record of the operations reachable from a root tensor."""

    def __init__(self, records: list[OpRecord]):
        self.records = records

    @classmethod
    def trace(cls, root: "Tensor") -> "Tape":
        records: list[OpRecord] = []
        seen: set[int] = set()
        stack = [root]
        while stack:
            t = stack.pop()
            rec = t._op
            if rec is None or id(rec) in seen:
                continue
            seen.add(id(rec))
            records.append(rec)
            stack.extend(rec.inputs)
        records.sort(key=lambda r: r.seq)
        return cls(records)

    def replay_backward(self) -> None:
        for rec in reversed(self.records):
            if rec.out.grad is None:
                continue
            rec.backward(rec.out.grad)


class Tensor:
    """Dense numeric array with shape, values and an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False,
                 name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError(
                f"non-finite values in tensor {name or '<anon>'}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._op: Optional[OpRecord] = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._op is not None):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(name: str, data: np.ndarray, inputs: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = None
    out._backward_done = False
    # under no_grad outputs become plain constants, so later graphs
    # built on top of them stay severed from this op's inputs
    out.requires_grad = _grad_enabled() and any(
        t.requires_grad for t in inputs)
    if out.requires_grad:
        out._op = OpRecord(name, inputs, out, backward)
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Populates ``grad`` on every requires_grad ancestor exactly once per
    call. A second call on the same root is rejected; rebuild the graph
    (and zero parameter grads) instead.
    """
    if loss.data.shape != ():
        raise AutodiffError(
            f"backward requires a scalar root, got shape {loss.data.shape}")
    if loss._backward_done:
        raise AutodiffError(
            "backward already ran for this graph; rebuild it before "
            "calling backward again")
    if loss._op is None and not loss.requires_grad:
        raise AutodiffError("loss is not connected to any traced operation")
    loss._backward_done = True
    loss.grad = np.ones((), dtype=loss.data.dtype)
    Tape.trace(loss).replay_backward()


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an (m x k) by a (k x n) tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data
    _count_flops(2 * a.shape[0] * a.shape[1] * b.shape[1])

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make("matmul", out_data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports (m x n) + (n,) bias broadcast."""
    if a.shape == b.shape:
        def bwd(g: np.ndarray) -> None:
            _accumulate(a, g)
            _accumulate(b, g)
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def bwd(g: np.ndarray) -> None:
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=0))
    else:
        raise ShapeError(f"add shapes incompatible: {a.shape} vs {b.shape}")
    return _make("add", a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make("mul", a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    return _make("scale", a.data * np.asarray(c, dtype=a.dtype), (a,), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g.T)

    return _make("transpose", a.data.T.copy(), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-D scalar tensor."""

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, np.full_like(a.data, g))

    return _make("sum_all", a.data.sum(), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form:

        gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
    """
    x = a.data
    # python-float constants keep float32 inputs in float32
    k = math.sqrt(2.0 / math.pi)
    inner = k * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def bwd(g: np.ndarray) -> None:
        sech2 = 1.0 - th * th
        d_inner = k * (1.0 + 3 * 0.044715 * x ** 2)
        _accumulate(a, g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner))

    return _make("gelu", out_data.astype(x.dtype, copy=False), (a,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all entries (scalar)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.data.size

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * 2.0 * diff / n)
        _accumulate(b, g * -2.0 * diff / n)

    return _make("mse", np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), bwd)


def _check_mask(x: np.ndarray, mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} differs from {x.shape}")
    if np.any(mask.sum(axis=1) == 0):
        raise MaskError("softmax row with every position masked")
    return mask


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row-wise softmax over an (m x n) tensor.

    ``mask`` is a {0,1} array; masked positions receive an additive
    MASK_FILL before normalization and come out exactly 0. Stabilized by
    row-max subtraction.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    mask = _check_mask(x.data, mask)
    scores = x.data
    if mask is not None:
        scores = scores + (1.0 - mask) * MASK_FILL
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        s = (g * y).sum(axis=1, keepdims=True)
        _accumulate(x, y * (g - s))

    return _make("softmax_rows", y.astype(x.dtype, copy=False), (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log-softmax (numerically stable)."""
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g - np.exp(y) * g.sum(axis=1, keepdims=True))

    return _make("log_softmax_rows", y.astype(x.dtype, copy=False), (x,), bwd)


# Row-sum slack accepted before a distribution input is rejected.
NORMALIZATION_TOL = 1e-6


def kl_div_rows(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of KL(p_row || q_row), natural log.

    ``p`` is treated as a constant reference distribution: gradient flows
    into ``q`` only. Uses the convention 0 * ln 0 = 0. Rows of both
    operands must sum to 1 within NORMALIZATION_TOL, and q must be
    positive wherever p is.
    """
    if p.shape != q.shape or p.data.ndim != 2:
        raise ShapeError(
            f"kl_div_rows needs equal 2-D shapes, got {p.shape} and {q.shape}")
    for label, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > NORMALIZATION_TOL):
            worst = float(np.abs(sums - 1.0).max())
            raise DistributionError(
                f"{label} rows deviate from unit sum by {worst:.3g}")
    support = p.data > 0.0
    if np.any(support & (q.data <= 0.0)):
        raise DistributionError("q is zero on the support of p")
    m = p.shape[0]
    pd = p.data
    qd = q.data
    terms = np.zeros_like(pd)
    np.divide(pd, qd, out=terms, where=support)
    logratio = np.zeros_like(pd)
    np.log(terms, out=logratio, where=support)
    value = float((pd * logratio).sum() / m)

    def bwd(g: np.ndarray) -> None:
        gq = np.zeros_like(qd)
        np.divide(pd, qd, out=gq, where=support)
        _accumulate(q, g * (-gq / m))

    return _make("kl_div_rows", np.asarray(value, dtype=p.dtype), (p, q), bwd)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row normalization to zero mean, unit variance, then affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm needs a 2-D tensor, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not "
            f"match feature dim {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def bwd(g: np.ndarray) -> None:
        _accumulate(beta, g.sum(axis=0))
        _accumulate(gamma, (g * xhat).sum(axis=0))
        gx = g * gamma.data
        _accumulate(
            x,
            inv * (gx
                   - gx.mean(axis=1, keepdims=True)
                   - xhat * (gx * xhat).mean(axis=1, keepdims=True)),
        )

    return _make("layernorm", out_data.astype(x.dtype, copy=False),
                 (x, gamma, beta), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table by integer id."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}")

    def bwd(g: np.ndarray) -> None:
        if not (table.requires_grad or table._op is not None):
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make("embedding_lookup", table.data[ids].copy(), (table,), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice x[start:stop, :]."""
    if not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(
            f"row slice [{start}:{stop}] out of bounds for {x.shape}")

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[start:stop] = g
        _accumulate(x, full)

    return _make("slice_rows", x.data[start:stop].copy(), (x,), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice x[:, start:stop]."""
    if not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(
            f"column slice [{start}:{stop}] out of bounds for {x.shape}")

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _make("slice_cols", x.data[:, start:stop].copy(), (x,), bwd)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors with equal row counts along columns."""
    tensors = list(tensors)
    rows = tensors[0].shape[0]
    if any(t.shape[0] != rows for t in tensors):
        raise ShapeError("concat_cols row counts differ: "
                         + str([t.shape for t in tensors]))
    widths = [t.shape[1] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[:, lo:hi])

    return _make("concat_cols", np.concatenate([t.data for t in tensors], axis=1),
                 tensors, bwd)


def select_rows(x: Tensor, indices) -> Tensor:
    """Gather rows by (possibly repeated) integer index."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"select_rows indices must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(
            f"row index out of range [0, {x.shape[0]}) in select_rows")

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _make("select_rows", x.data[idx].copy(), (x,), bwd)


def gather_elements(x: Tensor, rows, cols) -> Tensor:
    """Pick x[rows[i], cols[i]] into a 1-D vector."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if r.shape != c.shape or r.ndim != 1:
        raise ShapeError("gather_elements needs matching 1-D row/col indices")
    if r.size and (r.min() < 0 or r.max() >= x.shape[0]
                   or c.min() < 0 or c.max() >= x.shape[1]):
        raise ShapeError(f"gather_elements index out of range for {x.shape}")

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, (r, c), g)
        _accumulate(x, full)

    return _make("gather_elements", x.data[r, c].copy(), (x,), bwd)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate == 0 or rng is None."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * keep)

    return _make("dropout", x.data * keep, (x,), bwd)
