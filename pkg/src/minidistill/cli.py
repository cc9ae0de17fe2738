"""Command-line surface: pretrain, distill, params, bench, gradcheck.

Exit codes: 0 success, 1 failed check or invalid configuration,
2 I/O or argument error. Setting MINIDISTILL_DETERMINISTIC=1 forces
single-threaded 64-bit mode so reruns with one seed are bit-identical.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import re
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as B
from . import checkpoint as C
from . import data as D
from . import gradcheck as G
from . import losses as L
from . import trainer as R
from .model import ModelConfig, count_params
from .tensor import AutodiffError

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_IO = 2

# CLI spellings of the distillation objectives.
LOSS_NAMES = {
    "minilm": "minilm",
    "att-only": "att_only",
    "soft-label": "soft_label",
    "layer2layer": "layer_to_layer",
    "value-mse": "value_mse",
    "hidden-relation": "hidden_relation",
}

# Default token inventory for the params/bench reports.
DEFAULT_VOCAB = 30522

# Training knobs that may ride along in a pretrain config file.
TRAIN_KEYS = ("peak_lr", "warmup_steps", "batch_size", "mask_rate",
              "clip_norm")


def _deterministic() -> bool:
    return os.environ.get("MINIDISTILL_DETERMINISTIC") == "1"


def _dtype():
    return np.float64 if _deterministic() else np.float32


def _sidecar(path: str, kind: str) -> str:
    """Companion file written next to a checkpoint (metrics, vocab)."""
    p = Path(path)
    return str(p.with_name(p.stem + "." + kind))


def _read_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _parse_ta(text: str):
    if text in ("auto", "off"):
        return text
    m = re.fullmatch(r"(\d+)[x×](\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(
            f"expected 'auto', 'off', or LxD like 6x384, got {text!r}")
    return (int(m.group(1)), int(m.group(2)))


def _default_heads(hidden: int) -> int:
    return 12 if hidden % 12 == 0 else 1


def _schedule(steps: int, peak_lr: float,
              warmup_steps: int | None = None) -> R.Schedule:
    if warmup_steps is None:
        warmup_steps = max(1, steps // 10)
    return R.Schedule(peak_lr=peak_lr, warmup_steps=warmup_steps,
                      total_steps=steps)


def _cmd_pretrain(args) -> int:
    raw = _read_json(args.config)
    if not isinstance(raw, dict):
        raise ValueError(f"config file {args.config} must hold a JSON object")
    train = {k: raw.pop(k) for k in list(raw) if k in TRAIN_KEYS}
    try:
        config = ModelConfig(**raw)
    except TypeError as exc:
        raise ValueError(f"bad config file {args.config}: {exc}") from exc
    corpus = D.load_corpus(args.corpus)
    schedule = _schedule(args.steps, train.get("peak_lr", 5e-4),
                         train.get("warmup_steps"))
    model, vocab, metrics = R.pretrain_teacher(
        config, corpus, schedule, args.seed,
        batch_size=train.get("batch_size", 8),
        mask_rate=train.get("mask_rate", 0.15),
        clip_norm=train.get("clip_norm", 1.0),
        dtype=_dtype())
    C.save_checkpoint(model, args.out)
    R.write_metrics(_sidecar(args.out, "metrics.jsonl"), metrics)
    vocab.save(_sidecar(args.out, "vocab.txt"))
    last = metrics[-1]
    cfg = model.config
    print(f"pretrained {cfg.layers}x{cfg.hidden} teacher "
          f"(vocab {cfg.vocab_size}): {len(metrics)} steps, "
          f"final loss {last['loss']:.6g}, mlm_acc {last['mlm_acc']:.3f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def _format_stage_table(reports) -> str:
    lines = [f"{'stage':>5}  {'role':>9}  {'teacher':>9}  {'student':>9}  "
             f"{'steps':>7}  {'initial':>12}  {'final':>12}"]
    for r in reports:
        lines.append(
            f"{r['stage']:>5}  {r['role']:>9}  {r['teacher']:>9}  "
            f"{r['student']:>9}  {r['steps']:>7}  "
            f"{r['initial_loss']:>12.6g}  {r['final_loss']:>12.6g}")
    return "\n".join(lines)


def _cmd_distill(args) -> int:
    teacher = C.load_checkpoint(args.teacher, dtype=_dtype())
    vocab = D.Vocab.load(_sidecar(args.teacher, "vocab.txt"))
    if args.corpus:
        corpus = D.load_corpus(args.corpus)
    else:
        corpus = D.synth_corpus(grammar_seed=args.seed, size=512)
    spec = L.DistillSpec(mode=LOSS_NAMES[args.loss])
    schedule = _schedule(args.steps, args.peak_lr)
    plan = R.build_plan(teacher.config, args.student_layers,
                        args.student_hidden, spec, schedule, args.steps,
                        ta=args.ta)
    student, reports, metrics = R.run_plan(teacher, plan, corpus, vocab,
                                           args.seed, dtype=_dtype())
    C.save_checkpoint(student, args.out)
    R.write_metrics(_sidecar(args.out, "metrics.jsonl"), metrics)
    vocab.save(_sidecar(args.out, "vocab.txt"))
    print(_format_stage_table(reports))
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def _cmd_params(args) -> int:
    config = ModelConfig(vocab_size=args.vocab, layers=args.layers,
                         hidden=args.hidden,
                         heads=_default_heads(args.hidden))
    emd, trm = count_params(config)
    print(f"layers {config.layers}  hidden {config.hidden}  "
          f"ff {config.ff}  vocab {config.vocab_size}")
    print(f"Emd params: {emd:,}  ({emd / 1e6:.1f}M)")
    print(f"Trm params: {trm:,}  ({trm / 1e6:.1f}M)")
    return EXIT_OK


def _bench_config(entry: dict, seq_len: int) -> ModelConfig:
    if not isinstance(entry, dict):
        raise ValueError("each bench config must be a JSON object")
    d = dict(entry)
    d.setdefault("vocab_size", DEFAULT_VOCAB)
    d.setdefault("heads", _default_heads(d.get("hidden", 0)))
    d.setdefault("max_len", max(seq_len, 1))
    try:
        return ModelConfig(**d)
    except TypeError as exc:
        raise ValueError(f"bad bench config {entry!r}: {exc}") from exc


def _cmd_bench(args) -> int:
    raw = _read_json(args.configs)
    if not isinstance(raw, list) or not raw:
        raise ValueError(
            f"configs file {args.configs} must hold a non-empty JSON list")
    configs = [_bench_config(entry, args.seqlen) for entry in raw]
    entries = B.run_bench(configs, seq_len=args.seqlen,
                          batches=args.batches, dtype=_dtype())
    print(B.format_bench(entries))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    rows = G.run_gradcheck(args.module)
    print(G.format_report(rows))
    failed = [name for name, _, ok in rows if not ok]
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minidistill",
        description="Train a small Transformer teacher and compress it "
                    "into students via attention distillation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a masked-LM teacher")
    p.add_argument("--config", required=True,
                   help="JSON file with model fields and optional "
                        "training knobs (peak_lr, warmup_steps, batch_size, "
                        "mask_rate, clip_norm)")
    p.add_argument("--corpus", required=True,
                   help="text file, one sequence per line")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("distill", help="compress a teacher into a student")
    p.add_argument("--teacher", required=True,
                   help="teacher checkpoint; its .vocab.txt sidecar "
                        "must sit next to it")
    p.add_argument("--student-layers", type=int, required=True)
    p.add_argument("--student-hidden", type=int, required=True)
    p.add_argument("--loss", choices=sorted(LOSS_NAMES), default="minilm")
    p.add_argument("--ta", type=_parse_ta, default="auto",
                   help="teacher assistant: auto, off, or LxD")
    p.add_argument("--steps", type=int, required=True,
                   help="optimizer steps per stage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="student checkpoint path")
    p.add_argument("--corpus", default=None,
                   help="transfer corpus; defaults to the built-in "
                        "synthetic grammar")
    p.add_argument("--peak-lr", type=float, default=5e-4)
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("params", help="embedding/transformer param counts")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--hidden", type=int, required=True)
    p.add_argument("--vocab", type=int, default=DEFAULT_VOCAB)
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("bench", help="single-thread forward timing")
    p.add_argument("--configs", required=True,
                   help="JSON list of architectures "
                        '[{"layers": 12, "hidden": 768}, ...]')
    p.add_argument("--seqlen", type=int, default=128)
    p.add_argument("--batches", type=int, default=100)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", choices=("all", "ops", "losses", "model"),
                   default="all")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    guard = (threadpool_limits(limits=1) if _deterministic()
             else contextlib.nullcontext())
    try:
        with guard:
            return args.func(args)
    except (OSError, json.JSONDecodeError, C.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, AutodiffError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
