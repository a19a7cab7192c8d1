"""Dense float64 layers with hand-derived backward passes.

Every layer follows the same protocol: ``forward`` returns ``(output, cache)``
and ``backward(dout, cache)`` adds parameter gradients into ``Parameter.grad``
and returns the gradient with respect to the layer input. Caches are plain
tuples so one layer object can be applied several times within a step (the
shared text encoder does this for queries and metadata).

Inputs may carry any number of leading batch axes; the feature axis is last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigurationError, DegenerateVectorError, DimensionError, EvaluationError

MASK_LOGIT = -1e30
DTYPE = np.float64


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=DTYPE)
        if self.value.ndim == 1:
            self.value = self.value[None, :]
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


# ---------------------------------------------------------------------------
# linear


def linear_forward(x: np.ndarray, w: Parameter, b: Parameter) -> np.ndarray:
    if x.shape[-1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}"
        )
    return x @ w.value + b.value[0]


def linear_backward(dout: np.ndarray, x: np.ndarray, w: Parameter, b: Parameter) -> np.ndarray:
    p, q = w.shape
    w.grad += x.reshape(-1, p).T @ dout.reshape(-1, q)
    b.grad += dout.reshape(-1, q).sum(axis=0, keepdims=True)
    return dout @ w.value.T


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str,
                 std: float | None = None, bias: bool = True) -> None:
        std = 1.0 / math.sqrt(n_in) if std is None else std
        self.w = Parameter(_normal(rng, (n_in, n_out), std), f"{name}.w")
        self.b = Parameter(np.zeros((1, n_out)), f"{name}.b") if bias else None

    def parameters(self) -> list[Parameter]:
        return [self.w] if self.b is None else [self.w, self.b]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.b is None:
            if x.shape[-1] != self.w.shape[0]:
                raise DimensionError(f"linear: input {x.shape} incompatible with weight {self.w.shape}")
            return x @ self.w.value, x
        return linear_forward(x, self.w, self.b), x

    def backward(self, dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
        if self.b is None:
            p, q = self.w.shape
            self.w.grad += cache.reshape(-1, p).T @ dout.reshape(-1, q)
            return dout @ self.w.value.T
        return linear_backward(dout, cache, self.w, self.b)


# ---------------------------------------------------------------------------
# elementwise / normalisation


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dout: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (dout - (dout * probs).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def layer_norm_forward(x: np.ndarray, gamma: Parameter, beta: Parameter,
                       eps: float = 1e-5) -> tuple[np.ndarray, tuple]:
    if gamma.shape != (1, x.shape[-1]) or beta.shape != gamma.shape:
        raise DimensionError(
            f"layer_norm: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma.value[0] + beta.value[0], (xhat, inv, gamma, beta)


def layer_norm(x: np.ndarray, gamma: Parameter, beta: Parameter, eps: float = 1e-5) -> np.ndarray:
    return layer_norm_forward(x, gamma, beta, eps)[0]


def layer_norm_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    xhat, inv, gamma, beta = cache
    d = xhat.shape[-1]
    gamma.grad += (dout * xhat).reshape(-1, d).sum(axis=0, keepdims=True)
    beta.grad += dout.reshape(-1, d).sum(axis=0, keepdims=True)
    dxhat = dout * gamma.value[0]
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


class LayerNorm:
    def __init__(self, d: int, name: str, eps: float = 1e-5) -> None:
        self.gamma = Parameter(np.ones((1, d)), f"{name}.gamma")
        self.beta = Parameter(np.zeros((1, d)), f"{name}.beta")
        self.eps = eps

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        return layer_norm_forward(x, self.gamma, self.beta, self.eps)

    def backward(self, dout: np.ndarray, cache: tuple) -> np.ndarray:
        return layer_norm_backward(dout, cache)


def l2_normalize_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        row = int(np.flatnonzero(norm.reshape(-1) == 0.0)[0])
        raise DegenerateVectorError(f"zero-norm vector at row {row}")
    out = x / norm
    return out, (out, norm)


def l2_normalize_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    out, norm = cache
    return (dout - out * (dout * out).sum(axis=-1, keepdims=True)) / norm


def cosine_sim_forward(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, tuple]:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_sim: shapes {a.shape} and {b.shape} do not share a width")
    an, ca = l2_normalize_forward(a)
    bn, cb = l2_normalize_forward(b)
    return an @ bn.T, (an, bn, ca, cb)


def cosine_sim_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between the rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return cosine_sim_forward(a, b)[0]


def cosine_sim_backward(dout: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray]:
    an, bn, ca, cb = cache
    return l2_normalize_backward(dout @ bn, ca), l2_normalize_backward(dout.T @ an, cb)


# ---------------------------------------------------------------------------
# transformer blocks


def positional_encoding(n_positions: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even columns, cos on odd columns."""
    if d % 2:
        raise ConfigurationError(f"positional encoding width must be even, got {d}")
    pos = np.arange(n_positions, dtype=DTYPE)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=DTYPE) / d)
    pe = np.empty((n_positions, d), dtype=DTYPE)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


class MultiHeadAttention:
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, name: str) -> None:
        if n_heads < 1 or d % n_heads:
            raise ConfigurationError(f"width {d} is not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.q = Linear(d, d, rng, f"{name}.q")
        # a key bias shifts every logit of a row equally, so it is omitted
        self.k = Linear(d, d, rng, f"{name}.k", bias=False)
        self.v = Linear(d, d, rng, f"{name}.v")
        self.o = Linear(d, d, rng, f"{name}.o")

    def parameters(self) -> list[Parameter]:
        return [*self.q.parameters(), *self.k.parameters(), *self.v.parameters(), *self.o.parameters()]

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.d // self.n_heads).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, _, t, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, self.d)

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, tuple]:
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
            mask = None if mask is None else np.asarray(mask)[None]
        if x.shape[-1] != self.d:
            raise DimensionError(f"attention: input {x.shape} does not match width {self.d}")
        q, cq = self.q.forward(x)
        k, ck = self.k.forward(x)
        v, cv = self.v.forward(x)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / math.sqrt(self.d // self.n_heads)
        logits = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        if mask is not None:
            if mask.shape != x.shape[:2]:
                raise DimensionError(f"attention: mask {mask.shape} does not match input {x.shape}")
            logits = np.where(mask[:, None, None, :], logits, MASK_LOGIT)
        probs = softmax_rows(logits)
        ctx = self._merge(probs @ vh)
        out, co = self.o.forward(ctx)
        if squeeze:
            out = out[0]
        return out, (squeeze, cq, ck, cv, co, qh, kh, vh, probs, scale)

    def backward(self, dout: np.ndarray, cache: tuple) -> np.ndarray:
        squeeze, cq, ck, cv, co, qh, kh, vh, probs, scale = cache
        if squeeze:
            dout = dout[None]
        dctx = self._split(self.o.backward(dout, co))
        dprobs = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx
        dlogits = softmax_backward(dprobs, probs) * scale
        dqh = dlogits @ kh
        dkh = dlogits.transpose(0, 1, 3, 2) @ qh
        dx = (
            self.q.backward(self._merge(dqh), cq)
            + self.k.backward(self._merge(dkh), ck)
            + self.v.backward(self._merge(dvh), cv)
        )
        return dx[0] if squeeze else dx


def multi_head_attention(x: np.ndarray, attn: MultiHeadAttention,
                         mask: np.ndarray | None = None) -> np.ndarray:
    return attn.forward(x, mask)[0]


class FeedForward:
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, name: str) -> None:
        self.fc1 = Linear(d, hidden, rng, f"{name}.fc1")
        self.fc2 = Linear(hidden, d, rng, f"{name}.fc2")

    def parameters(self) -> list[Parameter]:
        return [*self.fc1.parameters(), *self.fc2.parameters()]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        h, c1 = self.fc1.forward(x)
        a = np.maximum(h, 0.0)
        out, c2 = self.fc2.forward(a)
        return out, (c1, c2, h > 0)

    def backward(self, dout: np.ndarray, cache: tuple) -> np.ndarray:
        c1, c2, active = cache
        return self.fc1.backward(self.fc2.backward(dout, c2) * active, c1)


class EncoderLayer:
    """Pre-norm encoder layer: ``x + attn(ln(x))`` then ``h + ffn(ln(h))``.

    Zeroing the attention output projection and the second feed-forward
    projection turns the layer into an exact identity.
    """

    def __init__(self, d: int, n_heads: int, ff_width: int, rng: np.random.Generator,
                 name: str) -> None:
        self.ln1 = LayerNorm(d, f"{name}.ln1")
        self.attn = MultiHeadAttention(d, n_heads, rng, f"{name}.attn")
        self.ln2 = LayerNorm(d, f"{name}.ln2")
        self.ffn = FeedForward(d, ff_width, rng, f"{name}.ffn")

    def parameters(self) -> list[Parameter]:
        return [*self.ln1.parameters(), *self.attn.parameters(),
                *self.ln2.parameters(), *self.ffn.parameters()]

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, tuple]:
        n1, c1 = self.ln1.forward(x)
        a, ca = self.attn.forward(n1, mask)
        h = x + a
        n2, c2 = self.ln2.forward(h)
        f, cf = self.ffn.forward(n2)
        return h + f, (c1, ca, c2, cf)

    def backward(self, dout: np.ndarray, cache: tuple) -> np.ndarray:
        c1, ca, c2, cf = cache
        dh = dout + self.ln2.backward(self.ffn.backward(dout, cf), c2)
        return dh + self.ln1.backward(self.attn.backward(dh, ca), c1)

    def make_identity(self) -> None:
        for p in (self.attn.o.w, self.attn.o.b, self.ffn.fc2.w, self.ffn.fc2.b):
            p.value[...] = 0.0


class TransformerEncoder:
    def __init__(self, d: int, n_layers: int, n_heads: int, ff_width: int,
                 rng: np.random.Generator, name: str) -> None:
        self.layers = [EncoderLayer(d, n_heads, ff_width, rng, f"{name}.{i}") for i in range(n_layers)]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, list]:
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, mask)
            caches.append(c)
        return x, caches

    def backward(self, dout: np.ndarray, caches: list) -> np.ndarray:
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dout = layer.backward(dout, c)
        return dout

    def make_identity(self) -> None:
        for layer in self.layers:
            layer.make_identity()


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[], float], p: Parameter, h: float = 1e-5) -> float:
    """Largest relative error between ``p.grad`` and central differences.

    ``f`` runs forward and backward and returns the scalar objective. It is
    evaluated once with zeroed gradients to collect the analytic gradient,
    then twice per coordinate of ``p``. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. Gradients of ``p`` are left zeroed.
    """
    if h <= 0:
        raise ConfigurationError(f"step size must be positive, got {h}")
    p.zero_grad()
    base = f()
    if not np.isfinite(base):
        raise EvaluationError(f"objective is not finite: {base}")
    analytic = p.grad.copy()
    worst = 0.0
    flat = p.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise EvaluationError(f"objective is not finite near coordinate {i} of {p.name}")
        numeric = (up - down) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    p.zero_grad()
    return worst
