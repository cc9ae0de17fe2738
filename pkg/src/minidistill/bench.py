"""Single-threaded forward-pass timing across model architectures.

Timings run the encoder only, pinned to one BLAS thread so that the
ratios between architectures stay stable. Absolute wall-clock numbers
are machine-specific; only the ratios against the first (reference)
architecture are meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .model import ModelConfig, TransformerModel, count_params


@dataclass(frozen=True)
class BenchEntry:
    """Timing row for one architecture."""

    layers: int
    hidden: int
    emd_params: int
    trm_params: int
    mean_batch_seconds: float
    speedup: float          # reference_time / this_time; reference is 1.0


def time_forward(model: TransformerModel, token_ids: np.ndarray,
                 batches: int, warmup: int = 1) -> float:
    """Mean seconds per forward pass over `batches` timed passes."""
    if batches < 1:
        raise ValueError("batches must be at least 1")
    with T.no_grad():
        for _ in range(warmup):
            model.encode(token_ids)
        start = time.perf_counter()
        for _ in range(batches):
            model.encode(token_ids)
        elapsed = time.perf_counter() - start
    return elapsed / batches


def run_bench(configs: Sequence[ModelConfig], seq_len: int = 128,
              batches: int = 100, seed: int = 0,
              dtype=np.float32) -> list[BenchEntry]:
    """Time every architecture and report speedups against the first one."""
    if not configs:
        raise ValueError("bench needs at least one architecture")
    for cfg in configs:
        if seq_len > cfg.max_len:
            raise ValueError(
                f"seq_len {seq_len} exceeds max_len {cfg.max_len} of "
                f"architecture {cfg.layers}x{cfg.hidden}")
    timed = []
    with threadpool_limits(limits=1):
        for cfg in configs:
            rng = np.random.default_rng(seed)
            ids = rng.integers(0, cfg.vocab_size, size=seq_len)
            model = TransformerModel(cfg, seed=seed, dtype=dtype)
            mean = time_forward(model, ids, batches)
            emd, trm = count_params(cfg)
            timed.append((cfg, emd, trm, mean))
    reference = timed[0][3]
    return [
        BenchEntry(cfg.layers, cfg.hidden, emd, trm, mean, reference / mean)
        for cfg, emd, trm, mean in timed
    ]


def format_bench(entries: Sequence[BenchEntry]) -> str:
    lines = [f"{'arch':>9}  {'emd':>13}  {'trm':>13}  "
             f"{'s/batch':>10}  {'ratio':>7}"]
    for e in entries:
        arch = f"{e.layers}x{e.hidden}"
        lines.append(
            f"{arch:>9}  {e.emd_params:>13,}  {e.trm_params:>13,}  "
            f"{e.mean_batch_seconds:>10.4f}  {e.speedup:>6.1f}x")
    return "\n".join(lines)
