"""Audio side: frame projection, positional encoding and global-token pooling."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError
from .numeric import Linear, Parameter, TransformerEncoder, positional_encoding


def pad_frames(frames: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length ``T_i x f`` sequences into ``B x T_max x f`` plus a mask."""
    width = frames[0].shape[1]
    t_max = max(f.shape[0] for f in frames)
    out = np.zeros((len(frames), t_max, width))
    mask = np.zeros((len(frames), t_max), dtype=bool)
    for i, f in enumerate(frames):
        if f.ndim != 2 or f.shape[1] != width:
            raise DimensionError(f"frame sequence {i} has shape {f.shape}, expected (T, {width})")
        out[i, : f.shape[0]] = f
        mask[i, : f.shape[0]] = True
    return out, mask


class AudioEncoder:
    """Projects frames to width ``d`` and pools them through an appended global token.

    The global token starts as the mean of the (valid) frame embeddings plus a
    learnable bias and sits after the last padded position. It carries no
    positional encoding, so its array position does not affect the result.
    """

    def __init__(self, frame_width: int, d: int, n_layers: int, n_heads: int, ff_width: int,
                 rng: np.random.Generator, name: str = "audio", max_frames: int = 512) -> None:
        self.frame_width = frame_width
        self.d = d
        self.frame_proj = Linear(frame_width, d, rng, f"{name}.frame_proj")
        self.pe = positional_encoding(max_frames, d)
        self.token_bias = Parameter(np.zeros((1, d)), f"{name}.token_bias")
        self.encoder = TransformerEncoder(d, n_layers, n_heads, ff_width, rng, f"{name}.encoder")
        self.proj = Linear(d, d, rng, f"{name}.proj")

    def parameters(self) -> list[Parameter]:
        return [*self.frame_proj.parameters(), self.token_bias,
                *self.encoder.parameters(), *self.proj.parameters()]

    def embed(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if frames.shape[-1] != self.frame_width:
            raise DimensionError(
                f"frames have width {frames.shape[-1]}, encoder expects {self.frame_width}"
            )
        emb, cache = self.frame_proj.forward(frames)
        return emb + self.pe[: frames.shape[-2]], cache

    def forward(self, frames: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple]:
        """Batched pass. Returns (pooled ``B x d``, transformed ``B x (T_max+1) x d``, cache)."""
        emb, cf = self.embed(frames)
        counts = mask.sum(axis=1, keepdims=True).astype(float)
        token = (emb * mask[..., None]).sum(axis=1) / counts + self.token_bias.value[0]
        seq = np.concatenate([emb, token[:, None]], axis=1)
        full_mask = np.concatenate([mask, np.ones((mask.shape[0], 1), dtype=bool)], axis=1)
        h, ch = self.encoder.forward(seq, full_mask)
        pooled, cp = self.proj.forward(h[:, -1])
        return pooled, h, (cf, mask, counts, h.shape, ch, cp)

    def backward(self, dpooled: np.ndarray | None, cache: tuple,
                 dseq: np.ndarray | None = None) -> None:
        cf, mask, counts, hshape, ch, cp = cache
        dh = np.zeros(hshape) if dseq is None else dseq.copy()
        if dpooled is not None:
            dh[:, -1] += self.proj.backward(dpooled, cp)
        dx = self.encoder.backward(dh, ch)
        dtoken = dx[:, -1]
        self.token_bias.grad += dtoken.sum(axis=0, keepdims=True)
        demb = dx[:, :-1] + (dtoken / counts)[:, None, :] * mask[..., None]
        self.frame_proj.backward(demb, cf)

    def encode_batch(self, frames: Sequence[np.ndarray]) -> np.ndarray:
        x, mask = pad_frames(frames)
        return self.forward(x, mask)[0]


def embed_frames(frames: np.ndarray, params: AudioEncoder) -> np.ndarray:
    """Per-frame projection to width ``d`` plus sinusoidal positions."""
    return params.embed(np.asarray(frames, dtype=float))[0]


def pool_with_global_token(seq: np.ndarray, params: AudioEncoder) -> tuple[np.ndarray, np.ndarray]:
    """Pool an already-embedded ``T x d`` sequence.

    Returns the projected global token and the transformed ``(T+1) x d``
    sequence whose last row is the global token before projection.
    """
    token = seq.mean(axis=0) + params.token_bias.value[0]
    joint = np.concatenate([seq, token[None]], axis=0)[None]
    h, _ = params.encoder.forward(joint, np.ones(joint.shape[:2], dtype=bool))
    pooled = params.proj.forward(h[:, -1])[0]
    return pooled[0], h[0]
