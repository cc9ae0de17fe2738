"""BERT-style Transformer encoder with MLM head and activation capture.

The encoder follows the post-layernorm residual order
LayerNorm(x + Sublayer(x)). Input states sum token, learned absolute
position, and segment embeddings, then pass through an embedding
layernorm. Attention uses per-head scaled dot products (1/sqrt(d_k));
the feed-forward block is dense -> gelu -> dense. The MLM head is a
dense + gelu + layernorm transform whose decoder is tied to the token
embedding table plus a per-vocabulary bias.

``encode`` can capture per-head queries/keys/values/attention and
per-layer hidden states for the distillation losses; captured student
tensors stay connected to the autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import MaskError, ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int
    hidden: int
    heads: int
    ff: int = 0            # 0 means the 4*hidden default
    max_len: int = 128
    num_segments: int = 2
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.ff == 0:
            object.__setattr__(self, "ff", 4 * self.hidden)
        for name in ("vocab_size", "layers", "hidden", "heads", "ff",
                     "max_len", "num_segments"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"config field {name} must be a positive "
                                 f"integer, got {v!r}")
        if self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden ({self.hidden}) must be divisible by heads "
                f"({self.heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(
                f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "layers": self.layers,
            "hidden": self.hidden, "heads": self.heads, "ff": self.ff,
            "max_len": self.max_len, "num_segments": self.num_segments,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class CaptureRequest:
    """What encode should record: 1-based layer indices.

    ``attention_layers`` gathers per-head Q, K, V and the attention
    distribution; ``hidden_layers`` gathers H^l (0 = embedding output).
    """
    attention_layers: tuple = ()
    hidden_layers: tuple = ()


@dataclass
class AttentionCapture:
    """Recorded activations, keyed by 1-based layer index.

    queries/keys/values[l][a] are |x| x d_k tensors for head a;
    attentions[l][a] is the |x| x |x| pre-dropout distribution;
    hidden[l] is the |x| x d_h state after layer l.
    """
    queries: dict = field(default_factory=dict)
    keys: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    attentions: dict = field(default_factory=dict)
    hidden: dict = field(default_factory=dict)
    seq_len: int = 0

    def last_attention_layer(self) -> int:
        if not self.attentions:
            raise ValueError("capture holds no attention layers")
        return max(self.attentions)


def _truncated_normal(rng: np.random.Generator, shape, std: float,
                      dtype) -> np.ndarray:
    # resample anything beyond 2 sigma, the usual BERT-style truncation
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class TransformerModel:
    """Encoder stack plus MLM head; parameters live in a flat named dict."""

    INIT_STD = 0.02

    def __init__(self, config: ModelConfig, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported dtype {dtype}")
        self.parameters: dict[str, Tensor] = {}
        self._init_params(seed)

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.parameters[name] = t
        return t

    def _init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        c = self.config
        dt = self.dtype

        def w(name, shape):
            self._param(name, _truncated_normal(rng, shape, self.INIT_STD, dt))

        def zeros(name, shape):
            self._param(name, np.zeros(shape, dtype=dt))

        def ones(name, shape):
            self._param(name, np.ones(shape, dtype=dt))

        w("embeddings.token", (c.vocab_size, c.hidden))
        w("embeddings.position", (c.max_len, c.hidden))
        w("embeddings.segment", (c.num_segments, c.hidden))
        ones("embeddings.ln.gamma", (c.hidden,))
        zeros("embeddings.ln.beta", (c.hidden,))
        for i in range(1, c.layers + 1):
            p = f"layers.{i}"
            w(f"{p}.attention.wq", (c.hidden, c.hidden))
            zeros(f"{p}.attention.bq", (c.hidden,))
            w(f"{p}.attention.wk", (c.hidden, c.hidden))
            zeros(f"{p}.attention.bk", (c.hidden,))
            w(f"{p}.attention.wv", (c.hidden, c.hidden))
            zeros(f"{p}.attention.bv", (c.hidden,))
            w(f"{p}.attention.wo", (c.hidden, c.hidden))
            zeros(f"{p}.attention.bo", (c.hidden,))
            ones(f"{p}.attention.ln.gamma", (c.hidden,))
            zeros(f"{p}.attention.ln.beta", (c.hidden,))
            w(f"{p}.ffn.w1", (c.hidden, c.ff))
            zeros(f"{p}.ffn.b1", (c.ff,))
            w(f"{p}.ffn.w2", (c.ff, c.hidden))
            zeros(f"{p}.ffn.b2", (c.hidden,))
            ones(f"{p}.ffn.ln.gamma", (c.hidden,))
            zeros(f"{p}.ffn.ln.beta", (c.hidden,))
        w("mlm.dense.w", (c.hidden, c.hidden))
        zeros("mlm.dense.b", (c.hidden,))
        ones("mlm.ln.gamma", (c.hidden,))
        zeros("mlm.ln.beta", (c.hidden,))
        zeros("mlm.bias", (c.vocab_size,))

    # -- forward ------------------------------------------------------

    def _validate_inputs(self, token_ids, segment_ids, attn_mask):
        c = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeError(f"token_ids must be a non-empty 1-D sequence, "
                             f"got shape {ids.shape}")
        n = ids.size
        if n > c.max_len:
            raise ShapeError(f"sequence length {n} exceeds max_len {c.max_len}")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise ShapeError(
                f"token id out of range [0, {c.vocab_size}): "
                f"min {ids.min()}, max {ids.max()}")
        if segment_ids is None:
            seg = np.zeros(n, dtype=np.int64)
        else:
            seg = np.asarray(segment_ids, dtype=np.int64)
            if seg.shape != (n,):
                raise ShapeError(f"segment_ids shape {seg.shape} does not "
                                 f"match sequence length {n}")
            if seg.min() < 0 or seg.max() >= c.num_segments:
                raise ShapeError(
                    f"segment id out of range [0, {c.num_segments})")
        if attn_mask is None:
            mask = np.ones(n, dtype=np.int64)
        else:
            mask = np.asarray(attn_mask, dtype=np.int64)
            if mask.shape != (n,):
                raise ShapeError(f"attn_mask shape {mask.shape} does not "
                                 f"match sequence length {n}")
            if not np.all((mask == 0) | (mask == 1)):
                raise MaskError("attn_mask entries must be 0 or 1")
            if mask.sum() == 0:
                raise MaskError("attn_mask has no valid position")
        return ids, seg, mask

    def encode(self, token_ids, segment_ids=None, attn_mask=None,
               capture: Optional[CaptureRequest] = None,
               dropout_rng: Optional[np.random.Generator] = None):
        """Run the encoder; returns (H_final, AttentionCapture)."""
        c = self.config
        ids, seg, mask = self._validate_inputs(token_ids, segment_ids,
                                               attn_mask)
        n = ids.size
        req = capture or CaptureRequest()
        for l in req.attention_layers:
            if not 1 <= l <= c.layers:
                raise ValueError(f"attention capture layer {l} outside "
                                 f"1..{c.layers}")
        for l in req.hidden_layers:
            if not 0 <= l <= c.layers:
                raise ValueError(f"hidden capture layer {l} outside "
                                 f"0..{c.layers}")
        cap = AttentionCapture(seq_len=n)
        p = self.parameters
        rate = c.dropout_rate
        rng = dropout_rng

        h = T.add(T.add(T.embedding_lookup(p["embeddings.token"], ids),
                        T.embedding_lookup(p["embeddings.position"],
                                           np.arange(n))),
                  T.embedding_lookup(p["embeddings.segment"], seg))
        h = T.layernorm(h, p["embeddings.ln.gamma"], p["embeddings.ln.beta"])
        h = T.dropout(h, rate, rng)
        if 0 in req.hidden_layers:
            cap.hidden[0] = h

        key_mask = np.broadcast_to(mask, (n, n))
        scale = 1.0 / math.sqrt(c.head_dim)
        for i in range(1, c.layers + 1):
            pre = f"layers.{i}"
            q_all = T.add(T.matmul(h, p[f"{pre}.attention.wq"]),
                          p[f"{pre}.attention.bq"])
            k_all = T.add(T.matmul(h, p[f"{pre}.attention.wk"]),
                          p[f"{pre}.attention.bk"])
            v_all = T.add(T.matmul(h, p[f"{pre}.attention.wv"]),
                          p[f"{pre}.attention.bv"])
            want_cap = i in req.attention_layers
            if want_cap:
                cap.queries[i] = []
                cap.keys[i] = []
                cap.values[i] = []
                cap.attentions[i] = []
            contexts = []
            for a in range(c.heads):
                lo, hi = a * c.head_dim, (a + 1) * c.head_dim
                q = T.slice_cols(q_all, lo, hi)
                k = T.slice_cols(k_all, lo, hi)
                v = T.slice_cols(v_all, lo, hi)
                scores = T.scale(T.matmul(q, T.transpose(k)), scale)
                attn = T.softmax_rows(scores, mask=key_mask)
                if want_cap:
                    cap.queries[i].append(q)
                    cap.keys[i].append(k)
                    cap.values[i].append(v)
                    cap.attentions[i].append(attn)
                attn = T.dropout(attn, rate, rng)
                contexts.append(T.matmul(attn, v))
            ao = T.add(T.matmul(T.concat_cols(contexts),
                                p[f"{pre}.attention.wo"]),
                       p[f"{pre}.attention.bo"])
            ao = T.dropout(ao, rate, rng)
            h = T.layernorm(T.add(h, ao),
                            p[f"{pre}.attention.ln.gamma"],
                            p[f"{pre}.attention.ln.beta"])
            ff = T.add(T.matmul(T.gelu(T.add(T.matmul(h, p[f"{pre}.ffn.w1"]),
                                             p[f"{pre}.ffn.b1"])),
                                p[f"{pre}.ffn.w2"]),
                       p[f"{pre}.ffn.b2"])
            ff = T.dropout(ff, rate, rng)
            h = T.layernorm(T.add(h, ff),
                            p[f"{pre}.ffn.ln.gamma"],
                            p[f"{pre}.ffn.ln.beta"])
            if i in req.hidden_layers:
                cap.hidden[i] = h
        return h, cap

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        """Vocabulary logits for every position of an encoded sequence."""
        p = self.parameters
        if hidden.data.ndim != 2 or hidden.shape[1] != self.config.hidden:
            raise ShapeError(f"hidden states must be |x| x {self.config.hidden},"
                             f" got {hidden.shape}")
        x = T.layernorm(T.gelu(T.add(T.matmul(hidden, p["mlm.dense.w"]),
                                     p["mlm.dense.b"])),
                        p["mlm.ln.gamma"], p["mlm.ln.beta"])
        return T.add(T.matmul(x, T.transpose(p["embeddings.token"])),
                     p["mlm.bias"])

    # -- bookkeeping ----------------------------------------------------

    def zero_grads(self) -> None:
        for t in self.parameters.values():
            t.grad = None


def count_params(config: ModelConfig) -> tuple[int, int]:
    """(embedding, transformer-stack) trainable value counts.

    The embedding figure is vocab_size * hidden; the stack figure is the
    closed form per layer: QKV/output projections with biases, the FFN
    pair with biases, and two layernorm affines.
    """
    d, f = config.hidden, config.ff
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    return config.vocab_size * d, config.layers * per_layer


def count_other_params(config: ModelConfig) -> int:
    """Everything the two headline counts exclude: position and segment
    embeddings, the embedding layernorm, and the MLM head (decoder is
    tied to the token table, so only its transform and bias count)."""
    d = config.hidden
    emb_extra = config.max_len * d + config.num_segments * d + 2 * d
    mlm_head = d * d + d + 2 * d + config.vocab_size
    return emb_extra + mlm_head


def flops_per_token(config: ModelConfig, seq_len: int) -> int:
    """Multiply-add FLOPs (2 per MAC) spent per token in one forward.

    Per layer: 8 d_h^2 for the QKV and output projections,
    4 seq_len d_h for attention scores and mixing, 4 d_h d_ff for the FFN.
    """
    if seq_len <= 0:
        raise ValueError(f"seq_len must be positive, got {seq_len}")
    d, f = config.hidden, config.ff
    per_layer = 8 * d * d + 4 * seq_len * d + 4 * d * f
    return config.layers * per_layer
