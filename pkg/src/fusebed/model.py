"""Dual-encoder retrieval model: query text encoder on one side, fused item encoder on the other."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .audio import AudioEncoder, pad_frames
from .errors import ConfigurationError
from .fusion import MidFusionHead
from .numeric import (
    Parameter,
    cosine_sim_backward,
    cosine_sim_forward,
    l2_normalize_backward,
    l2_normalize_forward,
)
from .text import TextEncoder, Vocabulary, pad_sequences, preprocess_text, tokenize

MODES = ("content", "metadata", "late", "mid")


@dataclass
class ModelConfig:
    mode: str = "late"
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    frame_width: int = 32
    fusion_layers: int = 2
    shared_text_encoder: bool = True
    late_normalize: bool = False
    # inference only: items whose metadata text is empty are scored on audio alone
    mask_missing_metadata: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d < 2 or self.d % 2:
            raise ConfigurationError(f"d must be a positive even width, got {self.d}")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 0 or self.fusion_layers < 0 or self.ff_mult < 1 or self.frame_width < 1:
            raise ConfigurationError("layer counts must be >= 0 and widths >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class HybridRetriever:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> None:
        config.validate()
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng([seed, 0])
        c = config
        ff = c.ff_mult * c.d
        self.query_encoder = TextEncoder(len(vocab), c.d, c.n_layers, c.n_heads, ff, rng,
                                         "text" if c.shared_text_encoder else "query_text")
        if c.shared_text_encoder:
            self.meta_encoder = self.query_encoder
        else:
            self.meta_encoder = TextEncoder(len(vocab), c.d, c.n_layers, c.n_heads, ff, rng, "meta_text")
        self.audio_encoder = AudioEncoder(c.frame_width, c.d, c.n_layers, c.n_heads, ff, rng, "audio")
        self.mid_head = (
            MidFusionHead(c.d, c.fusion_layers, c.n_heads, ff, rng, "mid") if c.mode == "mid" else None
        )

    @property
    def mode(self) -> str:
        return self.config.mode

    def parameters(self) -> list[Parameter]:
        seen: set[int] = set()
        out = []
        parts = [self.query_encoder, self.meta_encoder, self.audio_encoder]
        if self.mid_head is not None:
            parts.append(self.mid_head)
        for part in parts:
            for p in part.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def text_encoders(self) -> list[TextEncoder]:
        if self.meta_encoder is self.query_encoder:
            return [self.query_encoder]
        return [self.query_encoder, self.meta_encoder]

    def tokenize(self, texts: Sequence[str]) -> list[list[int]]:
        return [tokenize(preprocess_text(t), self.vocab) for t in texts]

    # -- batched training path -------------------------------------------------

    def _encode_items(self, meta_texts: Sequence[str] | None,
                      frames: Sequence[np.ndarray]) -> tuple[object, tuple]:
        mode = self.mode
        meta = audio = None
        if mode != "content":
            ids, mask = pad_sequences(self.tokenize(meta_texts))
            emb, cache = self.meta_encoder.forward(ids, mask)
            meta = (emb, cache)
        if mode != "metadata":
            x, fmask = pad_frames(frames)
            pooled, h, cache = self.audio_encoder.forward(x, fmask)
            audio = (pooled, h, fmask, cache)
        if mode == "content":
            return audio[0], (meta, audio, None)
        if mode == "metadata":
            return meta[0], (meta, audio, None)
        if mode == "late":
            if self.config.late_normalize:
                an, ca = l2_normalize_forward(audio[0])
                mn, cm = l2_normalize_forward(meta[0])
                return an + mn, (meta, audio, (ca, cm))
            return audio[0] + meta[0], (meta, audio, None)
        full_mask = np.concatenate([audio[2], np.ones((len(audio[2]), 1), dtype=bool)], axis=1)
        a_tok, m_tok, cache = self.mid_head.fuse_items(audio[1], full_mask, meta[0])
        return (a_tok, m_tok), (meta, audio, cache)

    def _encode_items_backward(self, drep: object, cache: tuple) -> None:
        meta, audio, extra = cache
        mode = self.mode
        if mode == "content":
            self.audio_encoder.backward(drep, audio[3])
        elif mode == "metadata":
            self.meta_encoder.backward(drep, meta[1])
        elif mode == "late":
            da = dm = drep
            if extra is not None:
                da = l2_normalize_backward(drep, extra[0])
                dm = l2_normalize_backward(drep, extra[1])
            self.audio_encoder.backward(da, audio[3])
            self.meta_encoder.backward(dm, meta[1])
        else:
            d_audio_seq, d_meta = self.mid_head.fuse_items_backward(drep[0], drep[1], extra)
            self.audio_encoder.backward(None, audio[3], dseq=d_audio_seq)
            self.meta_encoder.backward(d_meta, meta[1])

    def score_batch(self, query_texts: Sequence[str], meta_texts: Sequence[str] | None,
                    frames: Sequence[np.ndarray]) -> tuple[np.ndarray, tuple]:
        """Score matrix with queries on rows and items on columns (matching pairs on the diagonal)."""
        ids, mask = pad_sequences(self.tokenize(query_texts))
        q, cq = self.query_encoder.forward(ids, mask)
        rep, ci = self._encode_items(meta_texts, frames)
        if self.mode == "mid":
            s, cs = self.mid_head.score(q, *rep)
        else:
            s, cs = cosine_sim_forward(q, rep)
        return s, (cq, ci, cs)

    def backward(self, ds: np.ndarray, cache: tuple) -> None:
        cq, ci, cs = cache
        if self.mode == "mid":
            dq, da, dm = self.mid_head.score_backward(ds, cs)
            drep: object = (da, dm)
        else:
            dq, drep = cosine_sim_backward(ds, cs)
        self.query_encoder.backward(dq, cq)
        self._encode_items_backward(drep, ci)

    # -- inference path (one sequence at a time, independent of batch composition) --

    def embed_queries(self, texts: Sequence[str]) -> np.ndarray:
        seqs = self.tokenize(texts)
        out = np.empty((len(seqs), self.config.d))
        for i, s in enumerate(seqs):
            ids = np.asarray([s], dtype=np.int64)
            out[i] = self.query_encoder.forward(ids, np.ones(ids.shape, dtype=bool))[0][0]
        return out

    def embed_items(self, meta_texts: Sequence[str] | None,
                    frames: Sequence[np.ndarray]) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
        """Item representations: an ``N x d`` matrix, or (audio tokens, metadata tokens) in mid mode."""
        n = len(frames) if frames is not None else len(meta_texts)
        reps = []
        for i in range(n):
            m = None if meta_texts is None else [meta_texts[i]]
            f = None if frames is None else [frames[i]]
            if self._metadata_masked(m):
                reps.append(self._encode_audio_only(f))
                continue
            rep, _ = self._encode_items(m, f)
            reps.append(rep)
        if self.mode == "mid":
            return np.concatenate([r[0] for r in reps]), np.concatenate([r[1] for r in reps])
        return np.concatenate(reps)

    def _metadata_masked(self, meta_texts: Sequence[str] | None) -> bool:
        return (self.config.mask_missing_metadata and self.mode in ("late", "mid")
                and meta_texts is not None and not preprocess_text(meta_texts[0]))

    def _encode_audio_only(self, frames: Sequence[np.ndarray]) -> object:
        """Item representation with the metadata branch removed; mid mode marks it with a zero token."""
        x, fmask = pad_frames(frames)
        pooled, h, _ = self.audio_encoder.forward(x, fmask)
        if self.mode == "late":
            return pooled
        full_mask = np.concatenate([fmask, np.ones((1, 1), dtype=bool)], axis=1)
        fused, _ = self.mid_head.encoder.forward(h, full_mask)
        return fused[:, -1], np.zeros((1, self.config.d))

    def score(self, q: np.ndarray, rep: np.ndarray | tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        if self.mode != "mid":
            return cosine_sim_forward(q, rep)[0]
        audio_tok, meta_tok = rep
        absent = ~np.any(meta_tok, axis=1)
        if not (self.config.mask_missing_metadata and absent.any()):
            return self.mid_head.score(q, audio_tok, meta_tok)[0]
        s = np.empty((len(q), len(audio_tok)))
        if (~absent).any():
            s[:, ~absent] = self.mid_head.score(q, audio_tok[~absent], meta_tok[~absent])[0]
        qa, _ = self.mid_head.gem_audio.forward(q)
        s[:, absent] = cosine_sim_forward(qa, audio_tok[absent])[0]
        return s
