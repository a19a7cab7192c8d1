"""Frozen retrieval index, top-K ranking and the mAP@K / R@K evaluation protocol."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Item, metadata_to_text, normalize_kind
from .errors import DatasetError, EvaluationError
from .model import HybridRetriever

RECALL_KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple[str, ...]
    mode: str
    reps: np.ndarray | tuple[np.ndarray, np.ndarray]

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, item_id: str) -> int:
        return self.ids.index(item_id)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def item_metadata_texts(items: Sequence[Item], kind: str) -> list[str]:
    """Metadata used at index time; full-sentence items use their first caption."""
    return [metadata_to_text(item, kind, fs_index=0) for item in items]


def build_index(items: Sequence[Item], model: HybridRetriever, kind: str = "OS") -> RetrievalIndex:
    if not items:
        raise DatasetError("cannot index an empty item list")
    ids = tuple(item.id for item in items)
    if len(set(ids)) != len(ids):
        raise DatasetError("item ids must be unique")
    mode = model.mode
    if mode != "metadata":
        for item in items:
            if item.frames.ndim != 2 or item.frames.shape[0] < 1:
                raise DatasetError(f"item {item.id!r} has no audio frames")
    metas = None if mode == "content" else item_metadata_texts(items, kind)
    frames = None if mode == "metadata" else [item.frames for item in items]
    reps = model.embed_items(metas, frames)
    reps = tuple(_freeze(r) for r in reps) if isinstance(reps, tuple) else _freeze(reps)
    return RetrievalIndex(ids, mode, reps)


def stable_order(scores: np.ndarray) -> np.ndarray:
    """Descending by score; ties keep insertion order."""
    return np.argsort(-scores, kind="stable")


def rank_items(index: RetrievalIndex, query: str, model: HybridRetriever,
               k: int = 10) -> list[tuple[str, float]]:
    if k < 1:
        raise EvaluationError(f"k must be at least 1, got {k}")
    scores = model.score(model.embed_queries([query]), index.reps)[0]
    order = stable_order(scores)[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def ranks_of_correct(scores: np.ndarray, correct: np.ndarray) -> np.ndarray:
    """1-based rank of the correct column in each row under the stable tie rule."""
    rows = np.arange(len(correct))
    target = scores[rows, correct][:, None]
    above = (scores > target).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == target) & (cols < correct[:, None])).sum(axis=1)
    return 1 + above + tied_before


def average_precision_at_k(rank: int, k: int) -> float:
    """Single-relevant-item AP@K: ``1/rank`` inside the top K, else 0."""
    if rank < 1:
        raise EvaluationError(f"ranks are 1-based, got {rank}")
    return 1.0 / rank if rank <= k else 0.0


def map_at_k(ranks: Sequence[int], k: int = 10) -> float:
    if len(ranks) == 0:
        raise EvaluationError("no ranks to evaluate")
    return float(np.mean([average_precision_at_k(int(r), k) for r in ranks]))


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if len(ranks) == 0:
        raise EvaluationError("no ranks to evaluate")
    if min(ranks) < 1:
        raise EvaluationError("ranks are 1-based")
    return float(np.mean([r <= k for r in ranks]))


def metrics_from_ranks(ranks: Sequence[int], k: int = 10) -> dict[str, float]:
    out = {f"map@{k}": map_at_k(ranks, k)}
    for r in RECALL_KS:
        out[f"R@{r}"] = recall_at_k(ranks, r)
    return out


def evaluation_queries(items: Sequence[Item], kind: str) -> tuple[list[str], np.ndarray]:
    """Every caption is a query for its own item, except a full-sentence item's metadata caption."""
    kind = normalize_kind(kind)
    queries, targets = [], []
    for pos, item in enumerate(items):
        caps = item.captions[1:] if kind == "FS" else item.captions
        queries.extend(caps)
        targets.extend([pos] * len(caps))
    return queries, np.asarray(targets, dtype=np.int64)


def evaluate_model(model: HybridRetriever, items: Sequence[Item], kind: str = "OS",
                   k: int = 10) -> dict[str, float]:
    index = build_index(items, model, kind)
    queries, targets = evaluation_queries(items, kind)
    scores = model.score(model.embed_queries(queries), index.reps)
    metrics = metrics_from_ranks(ranks_of_correct(scores, targets), k)
    metrics["n_queries"] = len(queries)
    metrics["n_items"] = len(items)
    return metrics


@dataclass
class EvalReport:
    k: int = 10
    baseline: str = "content"
    per_seed: dict[str, dict[int, dict[str, float]]] = field(default_factory=dict)
    n_queries: int = 0
    n_items: int = 0

    @property
    def metric_names(self) -> list[str]:
        return [f"map@{self.k}"] + [f"R@{r}" for r in RECALL_KS]

    def add(self, mode: str, seed: int, metrics: dict[str, float]) -> None:
        self.per_seed.setdefault(mode, {})[seed] = {m: metrics[m] for m in self.metric_names}
        self.n_queries = int(metrics.get("n_queries", self.n_queries))
        self.n_items = int(metrics.get("n_items", self.n_items))

    def mean(self, mode: str) -> dict[str, float]:
        runs = list(self.per_seed[mode].values())
        return {m: float(np.mean([r[m] for r in runs])) for m in self.metric_names}

    def delta(self, mode: str, baseline: str | None = None) -> float | None:
        baseline = baseline or self.baseline
        if baseline not in self.per_seed:
            return None
        key = f"map@{self.k}"
        return self.mean(mode)[key] - self.mean(baseline)[key]

    def records(self) -> list[dict]:
        out = []
        for mode, runs in self.per_seed.items():
            for seed, metrics in runs.items():
                out.append({"mode": mode, "seed": seed, "kind": "run", **metrics})
            out.append({"mode": mode, "seed": None, "kind": "mean", **self.mean(mode),
                        f"delta_map@{self.k}": self.delta(mode),
                        "n_queries": self.n_queries, "n_items": self.n_items})
        return out

    def write_records(self, path: str | Path) -> None:
        Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records()),
                              encoding="utf-8")

    def table(self, labels: dict[str, str] | None = None) -> str:
        """Percent-scaled table: mode, map@K, delta map@K, R@1, R@5, R@10."""
        labels = labels or {}
        k = self.k
        head = f"{'mode':<12} {'map@' + str(k):>8} {'Δmap@' + str(k):>9} {'R@1':>7} {'R@5':>7} {'R@10':>7}"
        lines = [head, "-" * len(head)]
        for mode in self.per_seed:
            m = self.mean(mode)
            d = self.delta(mode)
            dtxt = "" if d is None else ("±0" if mode == self.baseline else f"{100 * d:+.2f}")
            lines.append(
                f"{labels.get(mode, mode):<12} {100 * m[f'map@{k}']:>8.2f} {dtxt:>9} "
                f"{100 * m['R@1']:>7.2f} {100 * m['R@5']:>7.2f} {100 * m['R@10']:>7.2f}"
            )
        return "\n".join(lines) + "\n"


def evaluate_benchmark(model_for: Callable[[str, int], HybridRetriever], items: Sequence[Item],
                       modes: Iterable[str], seeds: Iterable[int], kind: str = "OS",
                       k: int = 10) -> EvalReport:
    """Evaluate ``model_for(mode, seed)`` on ``items`` for every mode and seed."""
    if not items:
        raise EvaluationError("test split is empty")
    report = EvalReport(k=k)
    for mode in modes:
        for seed in seeds:
            report.add(mode, seed, evaluate_model(model_for(mode, seed), items, kind, k))
    return report
