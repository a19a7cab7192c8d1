import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusebed.errors import DegenerateVectorError, DimensionError
from fusebed.fusion import (
    GatedEmbedding,
    MidFusionHead,
    gated_embedding,
    late_fuse,
    mid_fuse_score,
    query_modality_weights,
)
from fusebed.numeric import Parameter, finite_diff_check
from fusebed.retrieval import stable_order
from fusebed.numeric import cosine_sim_matrix


def test_late_fuse():
    assert late_fuse(np.array([1.0, 2.0]), np.array([3.0, 4.0])).tolist() == [4.0, 6.0]
    a = np.array([0.3, -2.0])
    assert np.array_equal(late_fuse(a, np.zeros(2)), a)
    m = np.array([5.0, 1.0])
    assert np.array_equal(late_fuse(a, m), late_fuse(m, a))
    with pytest.raises(DimensionError):
        late_fuse(np.zeros(2), np.zeros(3))


def test_neutral_gate_normalises_query():
    gem = GatedEmbedding(3, np.random.default_rng(0), "g")
    gem.fc.w.value[...] = np.eye(3)
    gem.gate.w.value[...] = 0.0
    q = np.array([3.0, 0.0, 4.0])
    np.testing.assert_allclose(gated_embedding(q, gem), q / 5.0, atol=1e-15)


def test_gate_output_unit_norm(rng):
    gem = GatedEmbedding(6, rng, "g")
    out = gated_embedding(rng.normal(size=(10, 6)), gem)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_gate_zero_output_raises():
    gem = GatedEmbedding(2, np.random.default_rng(0), "g")
    gem.fc.w.value[...] = 0.0
    with pytest.raises(DegenerateVectorError):
        gated_embedding(np.array([1.0, 1.0]), gem)


def test_gate_gradients(rng):
    gem = GatedEmbedding(4, rng, "g")
    q = Parameter(rng.normal(size=(3, 4)))
    g = rng.normal(size=(3, 4))

    def f():
        out, cache = gem.forward(q.value)
        q.grad += gem.backward(g, cache)
        return float((out * g).sum())

    for p in [q, *gem.parameters()]:
        assert finite_diff_check(f, p) < 1e-3


def test_modality_weights():
    head = MidFusionHead(4, 1, 2, 8, np.random.default_rng(0))
    head.weights.w.value[...] = 0
    q = np.array([1.0, -1.0, 2.0, 0.5])
    assert query_modality_weights(q, head) == (0.5, 0.5)
    head.weights.b.value[...] = [[10.0, 0.0]]
    wa, wm = query_modality_weights(q, head)
    assert wa == pytest.approx(0.9999546, abs=1e-5)  # 1 / (1 + e^-10)
    assert wm == pytest.approx(4.54e-5, abs=1e-5)
    assert abs(wa + wm - 1) < 1e-12


def _head(rng, d=4, layers=1):
    return MidFusionHead(d, layers, 2, 8, rng)


def test_mid_score_orthogonal_is_zero():
    head = _head(np.random.default_rng(0))
    head.encoder.make_identity()
    head.weights.w.value[...] = 0
    for gem in (head.gem_audio, head.gem_meta):
        gem.fc.w.value[...] = np.eye(4)
        gem.gate.w.value[...] = 0
    audio_seq = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    meta = np.array([0.0, 0.0, 0.0, 1.0])
    q = np.array([1.0, 1.0, 0.0, 0.0])
    assert mid_fuse_score(audio_seq, meta, q, head) == pytest.approx(0.0, abs=1e-15)


def _replay(audio_seq, meta, q, head):
    """Step-by-step replay of the documented scoring formula."""
    joint = np.vstack([audio_seq, meta[None]])
    h, _ = head.encoder.forward(joint[None], np.ones((1, len(joint)), bool))
    a_tok, m_tok = h[0, -2], h[0, -1]

    def gem(mod, x):
        z1 = x @ mod.fc.w.value + mod.fc.b.value[0]
        gate = 1 / (1 + np.exp(-(z1 @ mod.gate.w.value + mod.gate.b.value[0])))
        z = z1 * gate
        return z / math.sqrt(z @ z)

    logits = q @ head.weights.w.value + head.weights.b.value[0]
    w = np.exp(logits - logits.max())
    w /= w.sum()
    cos = lambda u, v: (u @ v) / math.sqrt((u @ u) * (v @ v))
    return w[0] * cos(gem(head.gem_audio, q), a_tok) + w[1] * cos(gem(head.gem_meta, q), m_tok)


@pytest.mark.parametrize("seed", range(5))
def test_mid_score_matches_formula_replay(seed):
    rng = np.random.default_rng(seed)
    head = _head(rng, layers=2)
    for p in head.parameters():
        p.value[...] += rng.normal(scale=0.2, size=p.shape)
    audio_seq, meta, q = rng.normal(size=(5, 4)), rng.normal(size=4), rng.normal(size=4)
    assert mid_fuse_score(audio_seq, meta, q, head) == pytest.approx(_replay(audio_seq, meta, q, head), abs=1e-10)


def test_mid_score_single_modality_reduction(rng):
    head = _head(rng)
    head.weights.w.value[...] = 0
    head.weights.b.value[...] = [[800.0, 0.0]]  # softmax saturates to exactly (1, 0)
    audio_seq, meta, q = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4)
    a_tok, _, _ = head.fuse_items(audio_seq[None], np.ones((1, 3), bool), meta[None])
    qa = gated_embedding(q, head.gem_audio)
    assert mid_fuse_score(audio_seq, meta, q, head) == cosine_sim_matrix(qa[None], a_tok)[0, 0]


def test_mid_score_constant_when_metadata_only_and_identical(rng):
    head = _head(rng)
    head.encoder.make_identity()  # fused metadata token then equals the input metadata vector
    head.weights.w.value[...] = 0
    head.weights.b.value[...] = [[0.0, 800.0]]
    meta, q = rng.normal(size=4), rng.normal(size=4)
    scores = {mid_fuse_score(rng.normal(size=(t, 4)), meta, q, head) for t in (2, 3, 5, 7)}
    assert len(scores) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_mid_score_bounded(seed):
    rng = np.random.default_rng(seed)
    head = _head(rng)
    s = mid_fuse_score(rng.normal(size=(3, 4)) * 10, rng.normal(size=4), rng.normal(size=4), head)
    assert -1 - 1e-12 <= s <= 1 + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_late_ranking_invariant_to_query_scale(seed, c):
    rng = np.random.default_rng(seed)
    items = rng.normal(size=(20, 6))
    q = rng.normal(size=(1, 6))
    a = stable_order(cosine_sim_matrix(q, items)[0])
    b = stable_order(cosine_sim_matrix(c * q, items)[0])
    assert np.array_equal(a, b)


def test_mid_fusion_end_to_end_gradients(rng):
    head = _head(rng, layers=2)
    for p in head.parameters():
        p.value[...] += rng.normal(scale=0.1, size=p.shape)
    audio = Parameter(rng.normal(size=(3, 4, 4)).reshape(3, 16))
    meta = Parameter(rng.normal(size=(3, 4)))
    q = Parameter(rng.normal(size=(3, 4)))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 1], [1, 0, 0, 1]], bool)
    g = rng.normal(size=(3, 3))

    def f():
        a_tok, m_tok, cf = head.fuse_items(audio.value.reshape(3, 4, 4), mask, meta.value)
        s, cs = head.score(q.value, a_tok, m_tok)
        dq, da, dm = head.score_backward(g, cs)
        dseq, dmeta = head.fuse_items_backward(da, dm, cf)
        q.grad += dq
        meta.grad += dmeta
        audio.grad += (dseq * mask[..., None]).reshape(3, 16)
        return float((s * g).sum())

    for p in [q, meta, *head.parameters()]:
        assert finite_diff_check(f, p) < 1e-3, p.name
