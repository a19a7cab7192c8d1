import json
from collections import Counter
from itertools import permutations

import numpy as np
import pytest

from fusebed.data import (
    Item,
    SynthConfig,
    draw_fs_indices,
    generate_synthetic,
    load_dataset,
    metadata_to_text,
    save_dataset,
    simulate_fs_split,
    tag_caption_overlap,
)
from fusebed.errors import DatasetError, MetadataError


def _record(i="a", frames=None, tags=None, captions=None):
    return {"id": i, "frames": frames or [[0.0, 1.0]], "tags": tags or ["x"],
            "captions": captions or ["one", "two"]}


def _write(tmp_path, *lines):
    path = tmp_path / "items.jsonl"
    path.write_text("\n".join(l if isinstance(l, str) else json.dumps(l) for l in lines) + "\n")
    return path


def test_load_minimal(tmp_path):
    ds = load_dataset(_write(tmp_path, _record("a"), _record("b")))
    assert [i.id for i in ds.items] == ["a", "b"]
    assert ds.items[0].frames.shape == (1, 2)
    assert [i.id for i in ds.split("train")] == ["a", "b"] and ds.split("test") == []


@pytest.mark.parametrize(
    "line, match",
    [
        ("{not json", "malformed"),
        (json.dumps({"id": "a", "frames": [[1.0]]}), "missing fields"),
        (json.dumps(_record(captions=[])) .replace('["one", "two"]', "[]"), "no captions"),
        (json.dumps({**_record(), "frames": [[1.0, 2.0], [3.0]]}), "rectangular"),
        (json.dumps({**_record(), "frames": []}), "nonempty"),
    ],
)
def test_load_errors_name_line(tmp_path, line, match):
    path = _write(tmp_path, _record("ok"), line)
    with pytest.raises(DatasetError, match=match) as err:
        load_dataset(path)
    assert ":2:" in str(err.value)


def test_load_rejects_duplicates_and_width_mismatch(tmp_path):
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(_write(tmp_path, _record("a"), _record("a")))
    with pytest.raises(DatasetError, match="frame width"):
        load_dataset(_write(tmp_path, _record("a"), _record("b", frames=[[1.0, 2.0, 3.0]])))


def test_load_rejects_bad_split_reference(tmp_path):
    _write(tmp_path, _record("a"))
    (tmp_path / "test.ids").write_text("a\nzzz\n")
    with pytest.raises(DatasetError, match="zzz"):
        load_dataset(tmp_path)


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.jsonl")


def test_round_trip_is_idempotent(tmp_path):
    ds = generate_synthetic(SynthConfig(n_items=12, n_topics=2, frame_width=4, vocab_size=40, seed=1))
    save_dataset(ds, tmp_path / "a")
    loaded = load_dataset(tmp_path / "a")
    save_dataset(loaded, tmp_path / "b")
    assert (tmp_path / "a" / "items.jsonl").read_bytes() == (tmp_path / "b" / "items.jsonl").read_bytes()
    assert loaded.splits == ds.splits
    for x, y in zip(ds.items, loaded.items):
        assert np.array_equal(x.frames, y.frames) and x.tags == y.tags and x.captions == y.captions


def _item(tags=("Dog", "Bark"), captions=("a dog barks", "the hound woofs", "noise")):
    return Item("x", np.zeros((1, 2)), list(tags), list(captions))


def test_metadata_text_forms():
    item = _item()
    assert metadata_to_text(item, "OS") == "dog bark"
    assert metadata_to_text(item, "CS") == "dog bark"
    assert metadata_to_text(_item(tags=("Dog-Bark!",)), "OS") == "dogbark"
    assert metadata_to_text(item, "FS", fs_index=1) == "the hound woofs"
    assert metadata_to_text(item, "none") == ""
    assert metadata_to_text(_item(tags=()), "OS") == ""
    with pytest.raises(MetadataError):
        metadata_to_text(_item(captions=("only one",)), "FS")
    with pytest.raises(MetadataError):
        metadata_to_text(item, "XS")


def test_fs_split_is_uniform_over_ordered_pairs():
    rng = np.random.default_rng(0)
    counts = Counter(draw_fs_indices(5, rng) for _ in range(10_000))
    assert set(counts) == set(permutations(range(5), 2))
    assert all(abs(c - 500) < 100 for c in counts.values())


def test_fs_split_never_equal():
    rng = np.random.default_rng(1)
    for n in (2, 3, 5, 7):
        assert all(q != m for q, m in (draw_fs_indices(n, rng) for _ in range(500)))
    query, meta = simulate_fs_split(_item(), rng)
    assert query != meta


@pytest.mark.parametrize("rho", [0.0, 0.5, 0.8, 1.0])
def test_synthetic_overlap_tracks_rho(rho):
    ds = generate_synthetic(SynthConfig(n_items=1000, rho=rho, frames_min=1, frames_max=2, frame_width=4))
    overlap = tag_caption_overlap(ds.items)
    if rho == 0.0:
        assert overlap < 0.05
    elif rho == 1.0:
        assert overlap == 1.0
    else:
        assert abs(overlap - rho) <= 0.05


def test_synthetic_shapes_and_splits():
    cfg = SynthConfig()
    ds = generate_synthetic(cfg)
    assert len(ds.split("train")) == 512 and len(ds.split("test")) == 128
    for item in ds.items:
        assert cfg.frames_min <= item.frames.shape[0] <= cfg.frames_max
        assert item.frames.shape[1] == cfg.frame_width
        assert len(item.captions) == cfg.n_captions
        assert cfg.tags_min <= len(item.tags) <= cfg.tags_max
        assert len(set(item.tags)) == len(item.tags)


def test_synthetic_is_deterministic():
    a = generate_synthetic(SynthConfig(n_items=30, seed=4))
    b = generate_synthetic(SynthConfig(n_items=30, seed=4))
    c = generate_synthetic(SynthConfig(n_items=30, seed=5))
    assert all(x.to_record() == y.to_record() for x, y in zip(a.items, b.items))
    assert any(x.to_record() != y.to_record() for x, y in zip(a.items, c.items))


def test_caption_from_tags_only_touches_train():
    ds = generate_synthetic(SynthConfig(n_items=50, caption_from_tags=True))
    for item in ds.split("train"):
        assert sorted(item.captions[0].split()) == sorted(item.tags)
    natural = generate_synthetic(SynthConfig(n_items=50))
    for a, b in zip(ds.split("test"), natural.split("test")):
        assert a.captions == b.captions


def test_synth_config_validation():
    with pytest.raises(MetadataError):
        generate_synthetic(SynthConfig(rho=1.5))
