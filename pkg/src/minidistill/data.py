"""Corpus ingestion, vocabulary, MLM masking, toy corpus generation.

Word-level tokenizer (lowercased, punctuation split off as separate
tokens) instead of a learned subword vocabulary: desk-scale corpora make
subword merges pointless. Reserved ids 0..4 are [PAD], [UNK], [CLS],
[SEP], [MASK] in that order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation marks become their own tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Bijective token<->id map with the five reserved tokens at 0..4."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:5]) != RESERVED:
            raise ValueError(
                f"first five tokens must be {RESERVED}, got {tokens[:5]}")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.encode_token(w) for w in words]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise ValueError(f"id {i} outside vocabulary of size "
                                 f"{len(self.id_to_token)}")
            if skip_special and i < 5:
                continue
            out.append(self.id_to_token[i])
        return out

    def save(self, path: str) -> None:
        # one token per line; the id is the zero-based line index
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.id_to_token:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Frequency-ranked vocabulary, ties broken lexicographically.

    ``max_size`` bounds the total size including the reserved block.
    """
    if max_size < len(RESERVED) + 1:
        raise ValueError(f"max_size must exceed the {len(RESERVED)} "
                         f"reserved tokens, got {max_size}")
    counts: dict[str, int] = {}
    empty = True
    for line in corpus:
        for tok in tokenize(line):
            empty = False
            counts[tok] = counts.get(tok, 0) + 1
    if empty:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    keep = ranked[:max_size - len(RESERVED)]
    return Vocab(list(RESERVED) + keep)


@dataclass
class MaskedBatch:
    """Rectangular MLM batch; labels exist exactly at masked positions."""
    token_ids: np.ndarray       # B x n, int64
    segment_ids: np.ndarray     # B x n, int64
    attn_mask: np.ndarray       # B x n, {0,1}
    valid_lens: np.ndarray      # B, ints
    masked_positions: list      # per sequence, positions into row
    labels: list                # per sequence, original ids at those positions

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def make_mlm_batch(vocab: Vocab, sequences: Sequence[Sequence[int]],
                   mask_rate: float = 0.15, seed: int = 0,
                   max_len: int | None = None) -> MaskedBatch:
    """Assemble [CLS] seq [SEP] rows, pad, and apply BERT-style masking.

    Every real-word position is selected independently with probability
    ``mask_rate`` (resampled until at least one is selected); a selected
    position becomes [MASK] with p=0.8, a random non-reserved token with
    p=0.1, and stays unchanged with p=0.1. Deterministic per seed.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must be in (0, 1), got {mask_rate}")
    if not sequences:
        raise ValueError("make_mlm_batch needs at least one sequence")
    rows = []
    for i, seq in enumerate(sequences):
        ids = list(seq)
        if not ids:
            raise ValueError(f"sequence {i} is empty")
        if any(not 0 <= t < len(vocab) for t in ids):
            raise ValueError(f"sequence {i} has ids outside the vocabulary")
        if max_len is not None and len(ids) + 2 > max_len:
            raise ValueError(
                f"sequence {i} needs {len(ids) + 2} positions with "
                f"[CLS]/[SEP], exceeding max_len {max_len}")
        rows.append([CLS_ID] + ids + [SEP_ID])
    rng = np.random.default_rng(seed)
    width = max(len(r) for r in rows)
    b = len(rows)
    token_ids = np.full((b, width), PAD_ID, dtype=np.int64)
    attn_mask = np.zeros((b, width), dtype=np.int64)
    valid_lens = np.zeros(b, dtype=np.int64)
    masked_positions: list[list[int]] = []
    labels: list[list[int]] = []
    for i, row in enumerate(rows):
        n = len(row)
        token_ids[i, :n] = row
        attn_mask[i, :n] = 1
        valid_lens[i] = n
        maskable = np.arange(1, n - 1)   # skip [CLS] and [SEP]
        selected = rng.random(maskable.size) < mask_rate
        while not selected.any():
            selected = rng.random(maskable.size) < mask_rate
        pos = maskable[selected]
        labels.append(token_ids[i, pos].tolist())
        masked_positions.append(pos.tolist())
        for p in pos:
            u = rng.random()
            if u < 0.8:
                token_ids[i, p] = MASK_ID
            elif u < 0.9:
                # random replacement never picks a reserved id
                token_ids[i, p] = rng.integers(len(RESERVED), len(vocab))
            # else: keep the original token
    return MaskedBatch(token_ids=token_ids,
                       segment_ids=np.zeros((b, width), dtype=np.int64),
                       attn_mask=attn_mask, valid_lens=valid_lens,
                       masked_positions=masked_positions, labels=labels)


# ---------------------------------------------------------------------------
# synthetic corpus: a small probabilistic grammar with number agreement
# ---------------------------------------------------------------------------

_NOUN_STEMS = [
    "cat", "dog", "bird", "fish", "horse", "fox", "bear", "wolf", "rabbit",
    "mouse_", "farmer", "teacher", "student", "doctor", "painter", "sailor",
    "child_", "robot", "dragon", "wizard", "king", "queen", "knight",
    "baker", "miner", "singer", "dancer", "hunter", "pilot", "captain",
]
# irregular display forms keyed by stem
_NOUN_FORMS = {
    "mouse_": ("mouse", "mice"),
    "child_": ("child", "children"),
}
_VERB_PAIRS = [
    ("sleeps", "sleep"), ("runs", "run"), ("jumps", "jump"),
    ("sings", "sing"), ("waits", "wait"), ("smiles", "smile"),
    ("falls", "fall"), ("dreams", "dream"), ("laughs", "laugh"),
    ("dances", "dance"),
]
_TRANS_VERB_PAIRS = [
    ("sees", "see"), ("chases", "chase"), ("finds", "find"),
    ("helps", "help"), ("follows", "follow"), ("watches", "watch"),
    ("carries", "carry"), ("teaches", "teach"), ("paints", "paint"),
    ("guards", "guard"),
]
_ADJECTIVES = [
    "old", "young", "small", "big", "quiet", "loud", "happy", "sad",
    "brave", "clever", "tired", "hungry", "gentle", "wild", "bright",
    "dark", "swift", "slow", "kind", "proud",
]
_ADVERBS = ["quickly", "slowly", "quietly", "loudly", "gladly",
            "carefully", "bravely", "often"]
_DET_SG = ["the", "a", "this", "every", "one"]
_DET_PL = ["the", "some", "many", "these", "those", "two", "three"]
_PREPOSITIONS = ["near", "under", "behind", "beside", "above", "inside"]


def _noun(rng: np.random.Generator, plural: bool) -> str:
    stem = _NOUN_STEMS[rng.integers(len(_NOUN_STEMS))]
    if stem in _NOUN_FORMS:
        return _NOUN_FORMS[stem][1 if plural else 0]
    return stem + "s" if plural else stem


def _noun_phrase(rng: np.random.Generator, plural: bool) -> list[str]:
    dets = _DET_PL if plural else _DET_SG
    words = [dets[rng.integers(len(dets))]]
    if rng.random() < 0.35:
        words.append(_ADJECTIVES[rng.integers(len(_ADJECTIVES))])
    words.append(_noun(rng, plural))
    return words


def _sentence(rng: np.random.Generator) -> str:
    plural = bool(rng.random() < 0.5)
    words = _noun_phrase(rng, plural)
    if rng.random() < 0.5:
        pair = _VERB_PAIRS[rng.integers(len(_VERB_PAIRS))]
        words.append(pair[1] if plural else pair[0])
    else:
        pair = _TRANS_VERB_PAIRS[rng.integers(len(_TRANS_VERB_PAIRS))]
        words.append(pair[1] if plural else pair[0])
        words.extend(_noun_phrase(rng, bool(rng.random() < 0.5)))
    if rng.random() < 0.3:
        words.append(_ADVERBS[rng.integers(len(_ADVERBS))])
    if rng.random() < 0.25:
        words.append(_PREPOSITIONS[rng.integers(len(_PREPOSITIONS))])
        words.extend(_noun_phrase(rng, bool(rng.random() < 0.5)))
    return " ".join(words)


def grammar_vocabulary() -> set[str]:
    """Every surface form the generator can emit."""
    words: set[str] = set()
    for stem in _NOUN_STEMS:
        if stem in _NOUN_FORMS:
            words.update(_NOUN_FORMS[stem])
        else:
            words.update((stem, stem + "s"))
    for sg, pl in _VERB_PAIRS + _TRANS_VERB_PAIRS:
        words.update((sg, pl))
    words.update(_ADJECTIVES)
    words.update(_ADVERBS)
    words.update(_DET_SG)
    words.update(_DET_PL)
    words.update(_PREPOSITIONS)
    return words


def synth_corpus(grammar_seed: int, size: int) -> list[str]:
    """``size`` one-sentence documents with determiner-noun and
    subject-verb number agreement; deterministic per seed."""
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    rng = np.random.default_rng(grammar_seed)
    return [_sentence(rng) for _ in range(size)]


def load_corpus(path: str) -> list[str]:
    """UTF-8 text, one document per line; blank lines are dropped."""
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def save_corpus(path: str, docs: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(doc + "\n")
