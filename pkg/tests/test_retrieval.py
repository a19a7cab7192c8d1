import json

import numpy as np
import pytest

from fusebed.audio import pad_frames
from fusebed.data import Item, metadata_to_text
from fusebed.errors import DatasetError, EvaluationError
from fusebed.fusion import late_fuse
from fusebed.retrieval import (
    EvalReport,
    average_precision_at_k,
    build_index,
    evaluate_model,
    evaluation_queries,
    map_at_k,
    rank_items,
    ranks_of_correct,
    recall_at_k,
)

from .conftest import tiny_model


def brute_rank(scores, correct):
    """Position of ``correct`` after sorting by (-score, index)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order.index(correct) + 1


def test_metric_examples():
    assert average_precision_at_k(1, 10) == 1.0
    assert average_precision_at_k(4, 10) == 0.25
    assert average_precision_at_k(11, 10) == 0.0
    assert map_at_k([1, 2, 5], 10) == pytest.approx((1 + 0.5 + 0.2) / 3, abs=1e-15)
    assert map_at_k([1, 2, 5], 10) == pytest.approx(0.5667, abs=1e-4)
    assert recall_at_k([1, 2, 5], 1) == pytest.approx(1 / 3)
    assert recall_at_k([1, 2, 5], 5) == 1.0


def test_metric_errors():
    with pytest.raises(EvaluationError):
        map_at_k([], 10)
    with pytest.raises(EvaluationError):
        recall_at_k([0, 1], 5)
    with pytest.raises(EvaluationError):
        average_precision_at_k(0, 10)


@pytest.mark.parametrize("seed", range(20))
def test_ranks_match_brute_force_with_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 51))
    scores = rng.integers(-3, 4, size=(7, n)).astype(float) / 4  # plenty of ties
    correct = rng.integers(n, size=7)
    expected = [brute_rank(list(scores[i]), int(correct[i])) for i in range(7)]
    assert ranks_of_correct(scores, correct).tolist() == expected


def test_singleton_and_constant_scores():
    assert ranks_of_correct(np.array([[0.4]]), np.array([0])).tolist() == [1]
    assert ranks_of_correct(np.zeros((3, 3)), np.array([0, 1, 2])).tolist() == [1, 2, 3]


def test_recall_monotone_and_map_bounded(rng):
    ranks = rng.integers(1, 40, size=100)
    recalls = [recall_at_k(ranks, k) for k in (1, 5, 10)]
    assert recalls == sorted(recalls)
    assert map_at_k(ranks, 10) <= recalls[-1]
    assert map_at_k(ranks, 10) >= recalls[0]


def test_evaluation_queries_protocol():
    items = [Item("a", np.zeros((1, 2)), [], ["x", "y", "z"]), Item("b", np.zeros((1, 2)), [], ["u", "v"])]
    q, t = evaluation_queries(items, "OS")
    assert q == ["x", "y", "z", "u", "v"] and t.tolist() == [0, 0, 0, 1, 1]
    q, t = evaluation_queries(items, "FS")
    assert q == ["y", "z", "v"] and t.tolist() == [0, 0, 1]


@pytest.fixture(scope="module")
def late_setup(small_dataset, small_vocab):
    model = tiny_model("late", small_vocab, seed=2)
    items = small_dataset.split("test")
    return model, items, build_index(items, model)


def test_rank_items_matches_brute_force(late_setup):
    model, items, index = late_setup
    for query in ["t0w1 n3 t0w2", "", "unknownword", items[3].captions[0]]:
        q = model.embed_queries([query])[0]
        reps = index.reps
        scores = [float(q @ r / np.linalg.norm(q) / np.linalg.norm(r)) for r in reps]
        order = sorted(range(len(items)), key=lambda i: (-scores[i], i))[:5]
        got = rank_items(index, query, model, 5)
        assert [g[0] for g in got] == [items[i].id for i in order]
        np.testing.assert_allclose([g[1] for g in got], [scores[i] for i in order], atol=1e-12)


def test_rank_items_k_bounds(late_setup):
    model, items, index = late_setup
    assert len(rank_items(index, "t1w0", model, 1)) == 1
    assert len(rank_items(index, "t1w0", model, 10_000)) == len(items)
    with pytest.raises(EvaluationError):
        rank_items(index, "t1w0", model, 0)


def test_late_index_row_is_fused_sum(late_setup):
    model, items, index = late_setup
    audio = model.audio_encoder.encode_batch([items[0].frames])[0]
    meta = model.meta_encoder.encode_batch(model.tokenize([metadata_to_text(items[0], "OS")]))[0]
    np.testing.assert_allclose(index.reps[0], late_fuse(audio, meta), atol=1e-10)


def test_index_is_frozen_and_deterministic(late_setup, small_vocab):
    model, items, index = late_setup
    with pytest.raises(ValueError):
        index.reps[0, 0] = 1.0
    again = build_index(items, tiny_model("late", small_vocab, seed=2))
    assert np.array_equal(again.reps, index.reps)


def test_build_index_errors(small_vocab):
    model = tiny_model("content", small_vocab)
    with pytest.raises(DatasetError):
        build_index([], model)
    dup = [Item("a", np.zeros((2, 6)), [], ["x"])] * 2
    with pytest.raises(DatasetError):
        build_index(dup, model)


def test_self_match_with_identity_reps(small_vocab):
    # metadata mode with tags equal to the query: every query finds its item first
    items = [Item(f"i{k}", np.zeros((1, 6)), [f"t{k}w0", f"t{k}w1"], [f"t{k}w0 t{k}w1"]) for k in range(4)]
    model = tiny_model("metadata", small_vocab)
    index = build_index(items, model)
    for k, item in enumerate(items):
        assert rank_items(index, item.captions[0], model, 1)[0] == (item.id, pytest.approx(1.0, abs=1e-12))


@pytest.mark.parametrize("mode", ["content", "metadata", "late", "mid"])
def test_evaluate_model_all_modes(small_dataset, small_vocab, mode):
    items = small_dataset.split("test")
    metrics = evaluate_model(tiny_model(mode, small_vocab), items)
    assert metrics["n_items"] == len(items)
    assert metrics["n_queries"] == 5 * len(items)
    assert 0.0 <= metrics["R@1"] <= metrics["R@5"] <= metrics["R@10"] <= 1.0
    assert metrics["map@10"] <= metrics["R@10"]


def test_mid_index_matches_direct_score(small_dataset, small_vocab):
    items = small_dataset.split("test")[:5]
    model = tiny_model("mid", small_vocab)
    index = build_index(items, model)
    s, _ = model.score_batch([items[2].captions[0]], [" ".join(i.tags) for i in items], [i.frames for i in items])
    got = dict(rank_items(index, items[2].captions[0], model, 5))
    np.testing.assert_allclose([got[i.id] for i in items], s[0], atol=1e-10)


def test_report_table_and_records(tmp_path):
    report = EvalReport()
    report.add("content", 0, {"map@10": 0.2, "R@1": 0.1, "R@5": 0.3, "R@10": 0.4, "n_queries": 10, "n_items": 2})
    report.add("late", 0, {"map@10": 0.25, "R@1": 0.15, "R@5": 0.3, "R@10": 0.5})
    table = report.table({"content": "none", "late": "tags"})
    lines = table.splitlines()
    assert lines[2].split()[:3] == ["none", "20.00", "±0"]
    assert lines[3].split()[:3] == ["tags", "25.00", "+5.00"]
    report.write_records(tmp_path / "r.jsonl")
    recs = [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert recs[-1]["delta_map@10"] == pytest.approx(0.05)


def _with_empty_tags(items):
    return [Item(i.id, i.frames, [] if k % 2 else i.tags, i.captions) for k, i in enumerate(items)]


def test_empty_metadata_is_encoded_unless_masked(small_dataset, small_vocab):
    items = _with_empty_tags(small_dataset.split("test")[:4])
    plain = tiny_model("late", small_vocab)
    masked = tiny_model("late", small_vocab, mask_missing_metadata=True)
    p, m = build_index(items, plain).reps, build_index(items, masked).reps
    audio = plain.audio_encoder.encode_batch([items[1].frames])[0]
    cls_only = plain.meta_encoder.encode_batch([[2]])[0]
    np.testing.assert_allclose(p[1], audio + cls_only, atol=1e-10)
    np.testing.assert_allclose(m[1], audio, atol=1e-10)
    assert np.array_equal(p[0], m[0])


def test_mid_masking_scores_audio_term_only(small_dataset, small_vocab):
    items = _with_empty_tags(small_dataset.split("test")[:4])
    model = tiny_model("mid", small_vocab, mask_missing_metadata=True)
    index = build_index(items, model)
    a_tok, m_tok = index.reps
    assert not m_tok[1].any() and m_tok[0].any()
    query = items[1].captions[0]
    got = dict(rank_items(index, query, model, 4))

    h = model.audio_encoder.forward(*pad_frames([items[1].frames]))[1]
    fused = model.mid_head.encoder.forward(h, np.ones((1, h.shape[1]), bool))[0]
    qa = model.mid_head.gem_audio.forward(model.embed_queries([query]))[0]
    expected = float(qa[0] @ fused[0, -1] / np.linalg.norm(qa[0]) / np.linalg.norm(fused[0, -1]))
    assert got[items[1].id] == pytest.approx(expected, abs=1e-12)

    unmasked = tiny_model("mid", small_vocab)
    s, _ = unmasked.score_batch([query], [" ".join(items[0].tags)], [items[0].frames])
    assert got[items[0].id] == pytest.approx(s[0, 0], abs=1e-10)
