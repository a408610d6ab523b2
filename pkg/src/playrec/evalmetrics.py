"""Top-K ranking, accuracy and coverage metrics, and the modal-neighbor category analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataio import CategoryIndex, Dataset

DEFAULT_KS = (5, 10, 20)
METRICS = ("NDCG", "Recall", "HitRatio", "Precision", "Coverage")


def rank_items(scores: np.ndarray, k: int, exclude: Iterable[int] = (), item_ids: np.ndarray | None = None) -> list[int]:
    """Top-``k`` item indices by score, skipping ``exclude``; ties go to the smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores)) if item_ids is None else np.asarray(item_ids)
    keep = np.ones(len(scores), dtype=bool)
    excl = np.fromiter(exclude, dtype=np.int64)
    keep[excl] = False
    cand = np.flatnonzero(keep)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order[:k]].tolist()


def rank_all(user_emb: np.ndarray, item_emb: np.ndarray, train: Dataset, k: int,
             users: Sequence[int] | None = None, chunk: int = 1024) -> dict[int, list[int]]:
    """Full-catalogue ranking for each user, training items masked out."""
    users = list(range(train.num_users)) if users is None else list(users)
    out: dict[int, list[int]] = {}
    ids = np.arange(item_emb.shape[0])
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        scores = user_emb[block] @ item_emb.T
        for row, u in zip(scores, block):
            row = row.copy()
            row[train.items_of(u)] = -np.inf
            eligible = item_emb.shape[0] - len(train.item_sets[u])
            order = np.lexsort((ids, -row))
            out[u] = order[:min(k, eligible)].tolist()
    return out


def _dcg(hits: np.ndarray) -> float:
    return float(np.sum(hits / np.log2(np.arange(2, len(hits) + 2))))


def user_metrics(ranked: Sequence[int], test: set[int], k: int, categories: CategoryIndex) -> dict[str, float]:
    top = list(ranked[:k])
    hits = np.array([1.0 if i in test else 0.0 for i in top])
    n_hit = float(hits.sum())
    ideal = _dcg(np.ones(min(k, len(test))))
    cats: set[int] = set()
    for i in top:
        cats.update(categories.categories_of(i))
    return {
        "NDCG": _dcg(hits) / ideal if ideal > 0 else 0.0,
        "Recall": n_hit / len(test),
        "HitRatio": 1.0 if n_hit >= 1 else 0.0,
        "Precision": n_hit / k,
        "Coverage": float(len(cats)),
    }


@dataclass
class MetricsReport:
    values: dict[tuple[str, int], float]
    num_users: int
    ks: tuple[int, ...] = DEFAULT_KS
    per_user: dict[int, dict[tuple[str, int], float]] = field(default_factory=dict, repr=False)

    def __getitem__(self, key: tuple[str, int]) -> float:
        return self.values[key]

    def rows(self) -> list[tuple[str, int, float]]:
        return [(m, k, self.values[(m, k)]) for m in METRICS for k in self.ks]

    def to_dict(self) -> dict:
        return {f"{m}@{k}": v for m, k, v in self.rows()} | {"num_users": self.num_users}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "K", "value"])
            for m, k, v in self.rows():
                w.writerow([m, k, repr(float(v))])

    def to_table(self) -> str:
        header = f"{'metric':<10}" + "".join(f"{'@' + str(k):>10}" for k in self.ks)
        lines = [header]
        for m in METRICS:
            lines.append(f"{m:<10}" + "".join(f"{self.values[(m, k)]:>10.4f}" for k in self.ks))
        return "\n".join(lines) + "\n"


def compute_metrics(ranked: Mapping[int, Sequence[int]], test: Mapping[int, Iterable[int]],
                    categories: CategoryIndex, ks: Sequence[int] = DEFAULT_KS,
                    keep_per_user: bool = False) -> MetricsReport:
    """Per-user metrics averaged over users with a non-empty test set."""
    ks = tuple(ks)
    sums = {(m, k): 0.0 for m in METRICS for k in ks}
    per_user = {}
    n = 0
    for u in sorted(test):
        t = set(test[u])
        if not t:
            continue
        n += 1
        rec = ranked.get(u, [])
        row = {}
        for k in ks:
            for m, v in user_metrics(rec, t, k, categories).items():
                row[(m, k)] = v
                sums[(m, k)] += v
        if keep_per_user:
            per_user[u] = row
    values = {key: (s / n if n else 0.0) for key, s in sums.items()}
    return MetricsReport(values, n, ks, per_user)


def positives_by_user(test: Dataset) -> dict[int, set[int]]:
    return {u: set(s) for u, s in enumerate(test.item_sets) if s}


def evaluate(user_emb: np.ndarray, item_emb: np.ndarray, train: Dataset, test: Dataset,
             ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    positives = positives_by_user(test)
    ranked = rank_all(user_emb, item_emb, train, max(ks), users=sorted(positives))
    return compute_metrics(ranked, positives, train.categories, ks)


# ------------------------------------------------------------ modal analysis


@dataclass
class OverlapRow:
    category: int
    exact: float
    partial: float
    disjoint: float


def overlap_class(a: Sequence[int], b: Sequence[int]) -> str:
    sa, sb = set(a), set(b)
    if sa == sb:
        return "exact"
    if sa & sb:
        return "partial"
    return "disjoint"


def modal_category_analysis(embeddings: np.ndarray, categories: CategoryIndex, top_n: int = 10) -> list[OverlapRow]:
    """For each category, mean exact/partial/disjoint fractions over its items' top-N modal neighbors."""
    x = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / np.where(norms == 0, 1.0, norms)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    n = len(x)
    ids = np.arange(n)
    per_item = np.zeros((n, 3))
    for i in range(n):
        order = np.lexsort((ids, -sims[i]))[:min(top_n, n - 1)]
        if order.size == 0:
            continue
        for j in order:
            cls = overlap_class(categories.categories_of(i), categories.categories_of(int(j)))
            per_item[i, ("exact", "partial", "disjoint").index(cls)] += 1
        per_item[i] /= order.size
    rows = []
    for c, members in enumerate(categories.category_to_items):
        if members.size == 0:
            continue
        e, p, d = per_item[members].mean(axis=0)
        rows.append(OverlapRow(c, float(e), float(p), float(d)))
    return rows


def write_analysis_csv(path, rows: Sequence[OverlapRow], names: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "exact", "partial", "disjoint"])
        for r in rows:
            label = names[r.category] if names else r.category
            w.writerow([label, repr(r.exact), repr(r.partial), repr(r.disjoint)])


def geometric_mean(ndcg: float, coverage: float) -> float:
    return math.sqrt(max(ndcg, 0.0) * max(coverage, 0.0))
