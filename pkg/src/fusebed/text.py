"""Text side: normalisation, word-level vocabulary and the CLS-pooled encoder."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import VocabularyError
from .numeric import Linear, Parameter, TransformerEncoder, positional_encoding

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[CLS]")
MAX_CONTENT_TOKENS = 32


def preprocess_text(raw: str) -> str:
    """Lowercase, drop everything but letters/digits/whitespace, squeeze spaces."""
    kept = "".join(ch for ch in raw.lower() if ch.isalnum() or ch.isspace())
    return " ".join(kept.split())


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()) -> None:
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1) -> "Vocabulary":
        """Collect preprocessed words in first-seen order."""
        counts: Counter[str] = Counter()
        order: list[str] = []
        for text in texts:
            for word in preprocess_text(text).split():
                if word not in counts:
                    order.append(word)
                counts[word] += 1
        return cls(w for w in order if counts[w] >= min_freq and w not in RESERVED)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:3]) != RESERVED:
            raise VocabularyError(f"{path}: first three lines must be {RESERVED}")
        return cls(lines[3:])


def tokenize(clean: str, vocab: Vocabulary, max_tokens: int = MAX_CONTENT_TOKENS) -> list[int]:
    """Map whitespace words to ids, prepend CLS, keep the first ``max_tokens`` words."""
    return [CLS] + [vocab.lookup(w) for w in clean.split()[:max_tokens]]


def pad_sequences(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence in the batch; returns ids and validity mask."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


class TextEncoder:
    """Token embedding + sinusoidal positions + transformer; output is the projected CLS row."""

    def __init__(self, vocab_size: int, d: int, n_layers: int, n_heads: int, ff_width: int,
                 rng: np.random.Generator, name: str = "text",
                 max_len: int = MAX_CONTENT_TOKENS + 1) -> None:
        self.vocab_size = vocab_size
        self.d = d
        self.embedding = Parameter(rng.normal(0.0, 1.0, size=(vocab_size, d)), f"{name}.embedding")
        self.pe = positional_encoding(max_len, d)
        self.encoder = TransformerEncoder(d, n_layers, n_heads, ff_width, rng, f"{name}.encoder")
        self.proj = Linear(d, d, rng, f"{name}.proj")

    def parameters(self) -> list[Parameter]:
        return [self.embedding, *self.encoder.parameters(), *self.proj.parameters()]

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, tuple]:
        if ids.size and (ids.max() >= self.vocab_size or ids.min() < 0):
            raise VocabularyError(f"token id outside vocabulary of size {self.vocab_size}")
        if ids.shape[1] > self.pe.shape[0]:
            raise VocabularyError(f"sequence length {ids.shape[1]} exceeds {self.pe.shape[0]}")
        x = self.embedding.value[ids] + self.pe[: ids.shape[1]]
        h, ch = self.encoder.forward(x, mask)
        out, cp = self.proj.forward(h[:, 0])
        return out, (ids, h.shape, ch, cp)

    def backward(self, dout: np.ndarray, cache: tuple) -> None:
        ids, hshape, ch, cp = cache
        dh = np.zeros(hshape)
        dh[:, 0] = self.proj.backward(dout, cp)
        dx = self.encoder.backward(dh, ch)
        np.add.at(self.embedding.grad, ids.reshape(-1), dx.reshape(-1, self.d))

    def encode_batch(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        ids, mask = pad_sequences(seqs)
        return self.forward(ids, mask)[0]


def encode_text(seq: Sequence[int], params: TextEncoder) -> np.ndarray:
    """Retrieval-space vector for a single token sequence."""
    ids = np.asarray([seq], dtype=np.int64)
    return params.forward(ids, np.ones(ids.shape, dtype=bool))[0][0]
