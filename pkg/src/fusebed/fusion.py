"""Late fusion (vector sum) and mid-level fusion (joint transformer + gated query heads)."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError, DimensionError
from .numeric import (
    Linear,
    Parameter,
    TransformerEncoder,
    cosine_sim_backward,
    cosine_sim_forward,
    l2_normalize_backward,
    l2_normalize_forward,
    sigmoid,
    softmax_backward,
    softmax_rows,
)


def late_fuse(audio_emb: np.ndarray, meta_emb: np.ndarray) -> np.ndarray:
    if audio_emb.shape != meta_emb.shape:
        raise DimensionError(f"late fusion: widths differ, {audio_emb.shape} vs {meta_emb.shape}")
    return audio_emb + meta_emb


class GatedEmbedding:
    """``z1 = W1 q + b1``; ``z = z1 * sigmoid(W2 z1 + b2)``; output ``z / |z|``."""

    def __init__(self, d: int, rng: np.random.Generator, name: str) -> None:
        self.fc = Linear(d, d, rng, f"{name}.fc")
        self.gate = Linear(d, d, rng, f"{name}.gate")

    def parameters(self) -> list[Parameter]:
        return [*self.fc.parameters(), *self.gate.parameters()]

    def forward(self, q: np.ndarray) -> tuple[np.ndarray, tuple]:
        z1, c1 = self.fc.forward(q)
        g_in, c2 = self.gate.forward(z1)
        g = sigmoid(g_in)
        z = z1 * g
        try:
            out, cn = l2_normalize_forward(z)
        except DegenerateVectorError as exc:
            raise DegenerateVectorError(f"gated embedding collapsed to zero: {exc}") from exc
        return out, (c1, c2, z1, g, cn)

    def backward(self, dout: np.ndarray, cache: tuple) -> np.ndarray:
        c1, c2, z1, g, cn = cache
        dz = l2_normalize_backward(dout, cn)
        dz1 = dz * g + self.gate.backward(dz * z1 * g * (1.0 - g), c2)
        return self.fc.backward(dz1, c1)


def gated_embedding(q: np.ndarray, params: GatedEmbedding) -> np.ndarray:
    return params.forward(np.asarray(q, dtype=float))[0]


class MidFusionHead:
    """Joint transformer over ``[audio sequence | metadata token]`` scored against gated query vectors.

    Item-side work (the fusion transformer) does not depend on the query, so
    ``fuse_items`` and ``score`` are separate steps; a score matrix for
    ``Q`` queries and ``N`` items needs only ``N`` transformer passes.
    """

    def __init__(self, d: int, n_layers: int, n_heads: int, ff_width: int,
                 rng: np.random.Generator, name: str = "mid") -> None:
        self.d = d
        self.encoder = TransformerEncoder(d, n_layers, n_heads, ff_width, rng, f"{name}.encoder")
        self.gem_audio = GatedEmbedding(d, rng, f"{name}.gem_audio")
        self.gem_meta = GatedEmbedding(d, rng, f"{name}.gem_meta")
        self.weights = Linear(d, 2, rng, f"{name}.weights")

    def parameters(self) -> list[Parameter]:
        return [*self.encoder.parameters(), *self.gem_audio.parameters(),
                *self.gem_meta.parameters(), *self.weights.parameters()]

    def fuse_items(self, audio_seq: np.ndarray, audio_mask: np.ndarray,
                   meta_emb: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple]:
        """``audio_seq`` is ``B x (T+1) x d`` with the global token last.

        Returns the transformed global audio token and metadata token (each ``B x d``).
        """
        if audio_seq.shape[-1] != self.d or meta_emb.shape[-1] != self.d:
            raise DimensionError(
                f"mid fusion: audio {audio_seq.shape} / metadata {meta_emb.shape} vs width {self.d}"
            )
        joint = np.concatenate([audio_seq, meta_emb[:, None]], axis=1)
        mask = np.concatenate([audio_mask, np.ones((len(meta_emb), 1), dtype=bool)], axis=1)
        h, ch = self.encoder.forward(joint, mask)
        return h[:, -2], h[:, -1], (h.shape, ch)

    def fuse_items_backward(self, d_audio_tok: np.ndarray, d_meta_tok: np.ndarray,
                            cache: tuple) -> tuple[np.ndarray, np.ndarray]:
        hshape, ch = cache
        dh = np.zeros(hshape)
        dh[:, -2] = d_audio_tok
        dh[:, -1] = d_meta_tok
        dj = self.encoder.backward(dh, ch)
        return dj[:, :-1], dj[:, -1]

    def modality_weights(self, q: np.ndarray) -> tuple[np.ndarray, tuple]:
        logits, cw = self.weights.forward(q)
        w = softmax_rows(logits)
        return w, (cw, w)

    def score(self, q: np.ndarray, audio_tok: np.ndarray,
              meta_tok: np.ndarray) -> tuple[np.ndarray, tuple]:
        """``Q x N`` matrix ``w_a * cos(gem_a(q), A) + w_m * cos(gem_m(q), M)``."""
        qa, cqa = self.gem_audio.forward(q)
        qm, cqm = self.gem_meta.forward(q)
        w, cw = self.modality_weights(q)
        ca, cca = cosine_sim_forward(qa, audio_tok)
        cm, ccm = cosine_sim_forward(qm, meta_tok)
        s = w[:, :1] * ca + w[:, 1:] * cm
        return s, (cqa, cqm, cw, w, ca, cca, cm, ccm)

    def score_backward(self, ds: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns gradients for (query, audio token, metadata token)."""
        cqa, cqm, cw, w, ca, cca, cm, ccm = cache
        dw = np.stack([(ds * ca).sum(axis=1), (ds * cm).sum(axis=1)], axis=1)
        dqa, d_audio_tok = cosine_sim_backward(ds * w[:, :1], cca)
        dqm, d_meta_tok = cosine_sim_backward(ds * w[:, 1:], ccm)
        lw, _ = cw
        dq = (
            self.gem_audio.backward(dqa, cqa)
            + self.gem_meta.backward(dqm, cqm)
            + self.weights.backward(softmax_backward(dw, w), lw)
        )
        return dq, d_audio_tok, d_meta_tok


def query_modality_weights(q: np.ndarray, params: MidFusionHead) -> tuple[float, float]:
    w, _ = params.modality_weights(np.asarray(q, dtype=float)[None])
    return float(w[0, 0]), float(w[0, 1])


def mid_fuse_score(audio_seq: np.ndarray, meta_emb: np.ndarray, q: np.ndarray,
                   params: MidFusionHead) -> float:
    """Score one item (transformed ``(T+1) x d`` audio sequence + metadata vector) for one query."""
    a_tok, m_tok, _ = params.fuse_items(
        np.asarray(audio_seq, dtype=float)[None],
        np.ones((1, len(audio_seq)), dtype=bool),
        np.asarray(meta_emb, dtype=float)[None],
    )
    s, _ = params.score(np.asarray(q, dtype=float)[None], a_tok, m_tok)
    return float(s[0, 0])
