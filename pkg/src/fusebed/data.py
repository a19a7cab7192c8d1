"""Datasets: line-delimited item records, metadata handling and a synthetic topic corpus."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DatasetError, MetadataError
from .text import preprocess_text

METADATA_KINDS = ("CS", "OS", "FS", "none")
SPLITS = ("train", "val", "test")
ITEMS_FILE = "items.jsonl"


@dataclass(eq=False)
class Item:
    id: str
    frames: np.ndarray
    tags: list[str]
    captions: list[str]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "frames": self.frames.tolist(),
            "tags": list(self.tags),
            "captions": list(self.captions),
        }


@dataclass
class Dataset:
    items: list[Item]
    metadata_kind: str = "OS"
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.metadata_kind = normalize_kind(self.metadata_kind)
        self._by_id = {item.id: item for item in self.items}

    def __len__(self) -> int:
        return len(self.items)

    def get(self, item_id: str) -> Item:
        return self._by_id[item_id]

    def split(self, name: str) -> list[Item]:
        """Items of a split; a dataset without split files is all ``train``."""
        if not self.splits:
            return list(self.items) if name == "train" else []
        return [self._by_id[i] for i in self.splits.get(name, [])]


def normalize_kind(kind: str) -> str:
    k = kind.upper() if kind.lower() != "none" else "none"
    if k not in METADATA_KINDS:
        raise MetadataError(f"unknown metadata kind {kind!r}; expected one of {METADATA_KINDS}")
    return k


# ---------------------------------------------------------------------------
# file format


def _parse_item(line: str, lineno: int, source: str) -> Item:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{source}:{lineno}: malformed record ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise DatasetError(f"{source}:{lineno}: record must be an object")
    missing = {"id", "frames", "tags", "captions"} - rec.keys()
    if missing:
        raise DatasetError(f"{source}:{lineno}: missing fields {sorted(missing)}")
    if not isinstance(rec["id"], str) or not rec["id"]:
        raise DatasetError(f"{source}:{lineno}: id must be a nonempty string")
    for key in ("tags", "captions"):
        if not isinstance(rec[key], list) or not all(isinstance(s, str) for s in rec[key]):
            raise DatasetError(f"{source}:{lineno}: {key} must be a list of strings")
    if not rec["captions"]:
        raise DatasetError(f"{source}:{lineno}: item {rec['id']!r} has no captions")
    try:
        frames = np.asarray(rec["frames"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{source}:{lineno}: frames must be a rectangular array of numbers") from exc
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise DatasetError(f"{source}:{lineno}: frames must be a nonempty T x f array, got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise DatasetError(f"{source}:{lineno}: frames contain non-finite values")
    return Item(rec["id"], frames, rec["tags"], rec["captions"])


def validate(ds: Dataset) -> None:
    if not ds.items:
        raise DatasetError("dataset is empty")
    width = ds.items[0].frames.shape[1]
    for item in ds.items:
        if item.frames.shape[1] != width:
            raise DatasetError(f"item {item.id!r}: frame width {item.frames.shape[1]} != {width}")
        if ds.metadata_kind == "FS" and len(item.captions) < 2:
            raise DatasetError(f"item {item.id!r}: full-sentence metadata needs at least 2 captions")
    seen: set[str] = set()
    for name, ids in ds.splits.items():
        for i in ids:
            if i not in ds._by_id:
                raise DatasetError(f"split {name!r} references unknown id {i!r}")
            if i in seen:
                raise DatasetError(f"id {i!r} appears in more than one split")
            seen.add(i)


def load_dataset(path: str | Path, metadata_kind: str = "OS") -> Dataset:
    """Load ``items.jsonl`` (or a directory holding it) plus any ``*.ids`` split files beside it."""
    path = Path(path)
    items_path = path / ITEMS_FILE if path.is_dir() else path
    if not items_path.exists():
        raise DatasetError(f"{items_path}: no such dataset file")
    items: list[Item] = []
    ids: set[str] = set()
    with items_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            item = _parse_item(line, lineno, str(items_path))
            if item.id in ids:
                raise DatasetError(f"{items_path}:{lineno}: duplicate id {item.id!r}")
            ids.add(item.id)
            items.append(item)
    splits = {}
    for name in SPLITS:
        sidecar = items_path.parent / f"{name}.ids"
        if sidecar.exists():
            splits[name] = [ln.strip() for ln in sidecar.read_text(encoding="utf-8").splitlines() if ln.strip()]
    ds = Dataset(items, metadata_kind, splits)
    validate(ds)
    return ds


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / ITEMS_FILE).open("w", encoding="utf-8") as fh:
        for item in ds.items:
            fh.write(json.dumps(item.to_record(), separators=(",", ":")) + "\n")
    for name, ids in ds.splits.items():
        (directory / f"{name}.ids").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
    return directory / ITEMS_FILE


# ---------------------------------------------------------------------------
# metadata


def draw_fs_indices(n_captions: int, rng: np.random.Generator) -> tuple[int, int]:
    """Two distinct caption indices: (query, metadata)."""
    if n_captions < 2:
        raise MetadataError(f"full-sentence split needs at least 2 captions, got {n_captions}")
    q = int(rng.integers(n_captions))
    m = int(rng.integers(n_captions - 1))
    return q, m + (m >= q)


def simulate_fs_split(item: Item, rng: np.random.Generator) -> tuple[str, str]:
    q, m = draw_fs_indices(len(item.captions), rng)
    return item.captions[q], item.captions[m]


def metadata_to_text(item: Item, kind: str, fs_index: int = 0) -> str:
    """Text form of an item's metadata.

    Tags become a space-separated keyword list; full-sentence metadata is the
    caption at ``fs_index``.
    """
    kind = normalize_kind(kind)
    if kind in ("CS", "OS"):
        return preprocess_text(" ".join(item.tags))
    if kind == "FS":
        if len(item.captions) < 2:
            raise MetadataError(f"item {item.id!r}: full-sentence metadata needs at least 2 captions")
        return preprocess_text(item.captions[fs_index])
    return ""


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    n_items: int = 640
    n_topics: int = 8
    frames_min: int = 8
    frames_max: int = 16
    frame_width: int = 32
    vocab_size: int = 400
    caption_len_min: int = 6
    caption_len_max: int = 12
    rho: float = 0.8
    caption_from_tags: bool = False
    seed: int = 0
    n_captions: int = 5
    tags_min: int = 3
    tags_max: int = 5
    words_per_topic: int = 8
    salient_per_item: int = 3
    topic_fraction: float = 0.7
    topic_scale: float = 1.0
    word_scale: float = 0.25
    noise_scale: float = 1.0
    test_fraction: float = 0.2
    val_fraction: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise MetadataError(f"rho must lie in [0, 1], got {self.rho}")
        if self.n_topics < 2:
            raise MetadataError(f"n_topics must be at least 2, got {self.n_topics}")
        if self.vocab_size <= self.n_topics * self.words_per_topic:
            raise MetadataError("vocab_size must exceed n_topics * words_per_topic")
        if not 1 <= self.salient_per_item <= self.words_per_topic:
            raise MetadataError("salient_per_item must lie in [1, words_per_topic]")
        if self.n_items < 1 or self.frames_min < 1 or self.frames_max < self.frames_min:
            raise MetadataError("n_items and frame counts must be positive and ordered")
        if self.caption_len_min < 1 or self.caption_len_max < self.caption_len_min:
            raise MetadataError("caption lengths must be positive and ordered")
        if self.tags_min < 0 or self.tags_max < self.tags_min:
            raise MetadataError("tag counts must be nonnegative and ordered")
        if self.test_fraction + self.val_fraction > 1.0:
            raise MetadataError("test_fraction + val_fraction must not exceed 1")


def _pick_distinct(rng: np.random.Generator, pool: list[str], k: int, exclude: set[str]) -> list[str]:
    """Draw up to ``k`` distinct words; repeated pool entries raise a word's chance."""
    picked: list[str] = []
    candidates = [w for w in pool if w not in exclude]
    while candidates and len(picked) < k:
        w = candidates[int(rng.integers(len(candidates)))]
        picked.append(w)
        candidates = [c for c in candidates if c != w]
    return picked


def captions_from_tags(tags: list[str], n_captions: int) -> list[str]:
    """Deterministic captions built by rotating the tag list."""
    if not tags:
        return ["" for _ in range(n_captions)]
    return [" ".join(tags[k % len(tags):] + tags[: k % len(tags)]) for k in range(n_captions)]


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Latent-topic corpus.

    Every item has a topic and a small salient subset of that topic's keyword
    pool. Frames mix the topic centroid, the signature of one salient word per
    frame and Gaussian noise. Caption tokens come from the salient subset with
    probability ``topic_fraction`` and from the noise pool otherwise. Each tag
    is drawn from the item's caption tokens (so frequent words are likely)
    with probability ``rho`` and from words absent from its captions otherwise.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    topic_words = [[f"t{t}w{k}" for k in range(cfg.words_per_topic)] for t in range(cfg.n_topics)]
    n_noise = cfg.vocab_size - cfg.n_topics * cfg.words_per_topic
    noise_words = [f"n{k}" for k in range(n_noise)]
    all_words = [w for pool in topic_words for w in pool] + noise_words

    centroids = rng.normal(size=(cfg.n_topics, cfg.frame_width))
    signatures = {w: rng.normal(size=cfg.frame_width) for pool in topic_words for w in pool}

    n_test = int(round(cfg.n_items * cfg.test_fraction))
    n_val = int(round(cfg.n_items * cfg.val_fraction))
    n_train = cfg.n_items - n_test - n_val
    width = len(str(max(cfg.n_items - 1, 0)))

    items: list[Item] = []
    for idx in range(cfg.n_items):
        topic = int(rng.integers(cfg.n_topics))
        salient = _pick_distinct(rng, topic_words[topic], cfg.salient_per_item, set())
        n_frames = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
        events = rng.integers(len(salient), size=n_frames)
        frames = (
            cfg.topic_scale * centroids[topic]
            + cfg.word_scale * np.stack([signatures[salient[e]] for e in events])
            + cfg.noise_scale * rng.normal(size=(n_frames, cfg.frame_width))
        )
        captions = []
        for _ in range(cfg.n_captions):
            length = int(rng.integers(cfg.caption_len_min, cfg.caption_len_max + 1))
            from_topic = rng.random(length) < cfg.topic_fraction
            salient_ix = rng.integers(len(salient), size=length)
            noise_ix = rng.integers(len(noise_words), size=length)
            captions.append(" ".join(
                salient[s] if t else noise_words[n] for t, s, n in zip(from_topic, salient_ix, noise_ix)
            ))
        tokens = [w for c in captions for w in c.split()]
        vocab_set = set(tokens)
        outside = [w for w in all_words if w not in vocab_set]
        n_tags = int(rng.integers(cfg.tags_min, cfg.tags_max + 1))
        tags: list[str] = []
        for _ in range(n_tags):
            inside = rng.random() < cfg.rho
            pool = tokens if inside else outside
            picked = _pick_distinct(rng, pool, 1, set(tags))
            tags.extend(picked)
        if cfg.caption_from_tags and idx < n_train:
            captions = captions_from_tags(tags, cfg.n_captions)
        items.append(Item(f"item{idx:0{width}d}", frames, tags, captions))

    ids = [item.id for item in items]
    splits = {"train": ids[:n_train], "val": ids[n_train:n_train + n_val], "test": ids[n_train + n_val:]}
    return Dataset(items, "OS", splits)


def tag_caption_overlap(items: Iterable[Item]) -> float:
    """Fraction of tags that occur in their item's caption vocabulary."""
    hits = total = 0
    for item in items:
        vocab = {w for c in item.captions for w in preprocess_text(c).split()}
        hits += sum(preprocess_text(t) in vocab for t in item.tags)
        total += len(item.tags)
    return hits / total if total else math.nan
