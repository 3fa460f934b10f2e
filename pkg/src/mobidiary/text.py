"""Vocabulary, tokenization and the causally masked Transformer text encoder."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import layers
from .numerics import ops
from .numerics.tensor import ShapeError
from .positional import TEXT_PE_BASE, pe_table

PAD, SOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<PAD>", "<SOS>", "<EOS>", "<UNK>")
DEFAULT_VOCAB_SIZE = 1000

_PUNCT = re.compile(r"[^\w\s]")


def normalize(text: str) -> list:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


class Vocabulary:
    """Specials at ids 0..3, content words from id 4 on in rank order."""

    def __init__(self, content_words: Sequence[str]):
        words = list(content_words)
        if len(set(words)) != len(words):
            raise ValueError("duplicate word in vocabulary")
        for w in words:
            if not w or w != w.lower() or normalize(w) != [w]:
                raise ValueError(f"vocabulary words must be lowercase and punctuation-free, got {w!r}")
        self.content_words = words
        self.word_to_id = {w: i + len(SPECIALS) for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.content_words)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.content_words == self.content_words

    def __repr__(self) -> str:
        return f"Vocabulary({len(self.content_words)} words + {len(SPECIALS)} specials)"

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self):
            raise IndexError(f"token id {idx} outside vocabulary of size {len(self)}")
        return SPECIALS[idx] if idx < len(SPECIALS) else self.content_words[idx - len(SPECIALS)]

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.content_words), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(corpus: Iterable[str], K: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Top-K words by frequency; ties broken alphabetically."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    counts = Counter(w for text in corpus for w in normalize(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([w for w, _ in ranked[:K]])


def tokenize(text: str, vocab: Vocabulary) -> list:
    return [vocab.word_to_id.get(w, UNK) for w in normalize(text)]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        vocab.token(i)  # range check
        if i >= len(SPECIALS):
            words.append(vocab.content_words[i - len(SPECIALS)])
    return " ".join(words)


def encode_caption(text: str, vocab: Vocabulary) -> list:
    """Training form of a caption: [<SOS>, w_1 .. w_T, <EOS>]."""
    return [SOS] + tokenize(text, vocab) + [EOS]


def check_token_sequence(ids: Sequence[int], vocab_size: int) -> None:
    if any(not 0 <= i < vocab_size for i in ids):
        raise ValueError(f"token id outside [0, {vocab_size})")
    if list(ids).count(EOS) > 1:
        raise ValueError("more than one <EOS> in token sequence")
    if SOS in list(ids)[1:]:
        raise ValueError("<SOS> allowed only at position 0")


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    ffn_width: int = 256
    max_text_len: int = 52
    pe_base: float = TEXT_PE_BASE

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size <= len(SPECIALS) - 1:
            raise ValueError("vocabulary must contain the special tokens")


def init_text_encoder(params: dict, cfg: TextEncoderConfig, rng, dtype=np.float32, prefix="text"):
    layers.init_embedding(params, f"{prefix}.embed", cfg.vocab_size, cfg.d_model, rng, dtype)
    for i in range(cfg.n_layers):
        layers.init_encoder_layer(params, f"{prefix}.layer{i}", cfg.d_model, cfg.ffn_width, rng, dtype)


def encode_text_batch(ids, params: dict, cfg: TextEncoderConfig, prefix="text"):
    """ids [B, T] -> contextual features [B, T, d_model]; row j sees ids[:, :j+1] only."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"text ids must be [B, T], got {ids.shape}")
    length = ids.shape[1]
    if length < 1:
        raise ShapeError("text input must hold at least one token")
    if length > cfg.max_text_len:
        raise ValueError(f"text length {length} exceeds max_text_len {cfg.max_text_len}")
    emb = params[f"{prefix}.embed"]
    h = ops.mul(ops.embedding(emb, ids), math.sqrt(cfg.d_model))
    pe = pe_table(cfg.d_model, cfg.pe_base, max(cfg.max_text_len, 64)).table[:length]
    h = ops.add(h, pe.astype(emb.dtype))
    bias = layers.causal_bias(length)
    for i in range(cfg.n_layers):
        h = layers.encoder_layer(h, params, f"{prefix}.layer{i}", cfg.n_heads, bias)
    return h


def text_encode(tokens: Sequence[int], params: dict, cfg: TextEncoderConfig, prefix="text"):
    """Single-sequence form: [L2] ids -> [L2, d_model] Tensor."""
    return encode_text_batch(np.asarray(tokens, dtype=np.int64)[None, :], params, cfg, prefix)[0]
