"""Playtime-guided multimodal random walks.

Each user repeatedly starts a short walk from one of their strong-interest
items. At every step the candidate pool is the most modally similar item of
each category; candidates already owned, already added, or whose representing
category hit the per-user cap ``Q`` are dropped, and the survivors are scored
by modal similarity, interest similarity and a category balance coefficient.
Every newly reached item becomes a weighted user-item augmentation edge.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .betamix import InterestAssignment
from .dataio import CategoryIndex, Dataset
from .propagation import BipartiteGraph

_STREAM = zlib.crc32(b"mrw")


@dataclass(frozen=True)
class WalkConfig:
    Q: int = 1
    rounds_per_user: int | None = None
    max_rounds: int = 10
    max_walk_length: int = 3
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.Q < 0:
            raise ValueError("Q must be >= 0")
        if self.rounds_per_user is not None and self.rounds_per_user < 0:
            raise ValueError("rounds_per_user must be >= 0")
        if self.max_walk_length < 1:
            raise ValueError("max_walk_length must be >= 1")

    def rounds_for(self, n_strong: int) -> int:
        if self.rounds_per_user is not None:
            return self.rounds_per_user
        return min(n_strong, self.max_rounds)


@dataclass
class WalkState:
    added_all: set[int] = field(default_factory=set)
    added_by_init: dict[int, list[int]] = field(default_factory=dict)
    category_counts: dict[int, int] = field(default_factory=dict)
    initials_used: set[int] = field(default_factory=set)

    def count(self, category: int) -> int:
        return self.category_counts.get(category, 0)

    def add(self, initial: int, item: int, category: int) -> None:
        self.added_all.add(item)
        self.added_by_init.setdefault(initial, []).append(item)
        self.category_counts[category] = self.category_counts.get(category, 0) + 1


@dataclass(frozen=True)
class Candidate:
    item: int
    category: int
    sim_m: float
    sim_t: float = float("nan")
    balance: float = float("nan")


@dataclass(frozen=True)
class AugmentedEdge:
    user: int
    item: int
    weight: float
    initial: int = -1
    category: int = -1


@dataclass(frozen=True)
class WalkStep:
    """Snapshot handed to the instrumentation hook before each transition."""

    user: int
    round: int
    step: int
    path: tuple[int, ...]
    candidates: tuple[Candidate, ...]
    probabilities: np.ndarray
    chosen: int | None


# --------------------------------------------------------------- similarities


def unit_rows(modal: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(modal, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm modal embedding")
    return modal / norms


def modal_similarity(i: int, j: int, embeddings: np.ndarray) -> float:
    a, b = embeddings[i], embeddings[j]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm modal embedding")
    return float(np.dot(a, b) / (na * nb))


class InterestIndex:
    """Per-item (users, gamma) lists with a lazily filled pair cache."""

    def __init__(self, assignment: InterestAssignment, num_items: int):
        order = np.lexsort((assignment.users, assignment.items))
        items = assignment.items[order]
        bounds = np.searchsorted(items, np.arange(num_items + 1))
        self._users = [assignment.users[order[bounds[k]:bounds[k + 1]]] for k in range(num_items)]
        self._gamma = [assignment.gamma[order[bounds[k]:bounds[k + 1]]] for k in range(num_items)]
        self._cache: dict[tuple[int, int], float] = {}

    def similarity(self, i: int, j: int) -> float:
        key = (i, j) if i <= j else (j, i)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        _, ai, aj = np.intersect1d(self._users[i], self._users[j], assume_unique=True, return_indices=True)
        if ai.size == 0:
            value = 0.0
        else:
            value = 1.0 - float(np.mean(np.abs(self._gamma[i][ai] - self._gamma[j][aj])))
        self._cache[key] = value
        return value


def interest_similarity(i: int, j: int, index: InterestIndex) -> float:
    return index.similarity(i, j)


def balance_coefficient(count: int, Q: int) -> float:
    if Q <= 0:
        return 0.0
    return (Q - count) / Q


# ----------------------------------------------------------------- candidates


def candidate_set(current: int, categories: CategoryIndex, unit_modal: np.ndarray) -> list[Candidate]:
    """Most modally similar item of every category (excluding ``current``)."""
    sims = unit_modal @ unit_modal[current]
    out: list[Candidate] = []
    seen: set[int] = set()
    for c, members in enumerate(categories.category_to_items):
        members = members[members != current]
        if members.size == 0:
            continue
        j = int(members[np.argmax(sims[members])])
        if j in seen:
            continue
        seen.add(j)
        out.append(Candidate(j, c, float(sims[j])))
    return out


def filter_candidates(candidates: Sequence[Candidate], user_items, state: WalkState, Q: int) -> list[Candidate]:
    return [c for c in candidates
            if c.item not in user_items and c.item not in state.added_all and state.count(c.category) < Q]


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.ones_like(values)
    return (values - lo) / (hi - lo)


def score_candidates(sim_m, sim_t, balance) -> np.ndarray:
    """Equal-weight mean of the three min-max normalized metrics."""
    sim_m = np.clip(np.asarray(sim_m, dtype=np.float64), 0.0, 1.0)
    sim_t = np.asarray(sim_t, dtype=np.float64)
    balance = np.asarray(balance, dtype=np.float64)
    if sim_m.size == 0:
        return sim_m
    return (_minmax(sim_m) + _minmax(sim_t) + _minmax(balance)) / 3.0


def _draw(weights: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(weights)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(k, len(weights) - 1)


def sample_next(scores: np.ndarray, rng: np.random.Generator) -> int | None:
    """Index into ``scores`` drawn proportionally, or None to terminate."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0 or scores.sum() <= 0:
        return None
    return _draw(scores, rng)


def select_initial(strong_items: Sequence[int], playtime: Sequence[float], state: WalkState,
                   rng: np.random.Generator) -> tuple[int, int]:
    """(initial node, walk start). A re-selected initial node restarts from one of its additions."""
    if len(strong_items) == 0:
        raise ValueError("user has no strong-interest items")
    i = int(strong_items[_draw(np.asarray(playtime, dtype=np.float64), rng)])
    start = i
    expanded = state.added_by_init.get(i)
    if i in state.initials_used and expanded:
        start = int(expanded[rng.integers(len(expanded))])
    state.initials_used.add(i)
    return i, start


def path_weight(initial_playtime: float, sims: Sequence[float]) -> float:
    w = float(initial_playtime)
    for s in sims:
        w *= min(max(float(s), 0.0), 1.0)
    return w


# ---------------------------------------------------------------------- engine


class WalkEngine:
    """Shared read-only context for per-user walks over one training split."""

    def __init__(self, dataset: Dataset, assignment: InterestAssignment, config: WalkConfig | None = None):
        if dataset.playtime_norm is None:
            raise ValueError("dataset must be normalized")
        if len(assignment) != len(dataset):
            raise ValueError("assignment does not cover the dataset rows")
        self.dataset = dataset
        self.assignment = assignment
        self.config = config or WalkConfig()
        self.categories = dataset.categories
        self.unit_modal = unit_rows(dataset.modal)
        self.interest = InterestIndex(assignment, dataset.num_items)
        self._candidates: dict[int, list[Candidate]] = {}

    def candidates(self, item: int) -> list[Candidate]:
        hit = self._candidates.get(item)
        if hit is None:
            hit = candidate_set(item, self.categories, self.unit_modal)
            self._candidates[item] = hit
        return hit

    def rng_for(self, user: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.config.seed, _STREAM, user]))

    def strong_items(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        rows = self.dataset.rows_of(user)
        rows = rows[self.assignment.gamma[rows] > 0.5]
        rows = rows[np.argsort(self.dataset.items[rows], kind="stable")]
        return self.dataset.items[rows], self.dataset.playtime_norm[rows]

    def walk_user(self, user: int, hook: Callable[[WalkStep], None] | None = None,
                  state: WalkState | None = None, rng: np.random.Generator | None = None,
                  rounds: int | None = None) -> list[AugmentedEdge]:
        cfg = self.config
        items, playtime = self.strong_items(user)
        if items.size == 0:
            return []
        t_of = dict(zip(items.tolist(), playtime.tolist()))
        owned = self.dataset.item_sets[user]
        state = state or WalkState()
        rng = rng or self.rng_for(user)
        weight_of: dict[int, float] = {}
        edges: list[AugmentedEdge] = []
        n_rounds = cfg.rounds_for(items.size) if rounds is None else rounds
        for rnd in range(n_rounds):
            initial, current = select_initial(items, playtime, state, rng)
            w = t_of[initial] if current == initial else weight_of[current]
            path = [current]
            for step in range(cfg.max_walk_length):
                pool = filter_candidates(self.candidates(current), owned, state, cfg.Q)
                if not pool:
                    if hook:
                        hook(WalkStep(user, rnd, step, tuple(path), (), np.zeros(0), None))
                    break
                sim_t = [self.interest.similarity(current, c.item) for c in pool]
                omega = [balance_coefficient(state.count(c.category), cfg.Q) for c in pool]
                scores = score_candidates([c.sim_m for c in pool], sim_t, omega)
                k = sample_next(scores, rng)
                if hook:
                    probs = scores / scores.sum() if scores.sum() > 0 else np.zeros_like(scores)
                    scored = tuple(Candidate(c.item, c.category, c.sim_m, st, om)
                                   for c, st, om in zip(pool, sim_t, omega))
                    hook(WalkStep(user, rnd, step, tuple(path), scored, probs,
                                  None if k is None else pool[k].item))
                if k is None:
                    break
                nxt = pool[k]
                w = path_weight(w, [nxt.sim_m])
                state.add(initial, nxt.item, nxt.category)
                weight_of[nxt.item] = w
                # a non-positive modal similarity leaves the node visited but carries no edge weight
                if w > 0:
                    edges.append(AugmentedEdge(user, nxt.item, w, initial, nxt.category))
                path.append(nxt.item)
                current = nxt.item
        return edges

    def run(self, users: Sequence[int] | None = None, threads: int | None = None,
            hook: Callable[[WalkStep], None] | None = None) -> list[AugmentedEdge]:
        users = range(self.dataset.num_users) if users is None else users
        threads = threads or self.config.threads
        if threads > 1 and hook is None:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_user = list(pool.map(self.walk_user, users))
        else:
            per_user = [self.walk_user(u, hook) for u in users]
        return [e for edges in per_user for e in edges]


@dataclass
class WalkResult:
    edges: list[AugmentedEdge]
    graph: BipartiteGraph


def augmented_graph(dataset: Dataset, edges: Sequence[AugmentedEdge]) -> BipartiteGraph:
    """Interaction edges weighted by normalized playtime plus walk edges."""
    if dataset.playtime_norm is None:
        raise ValueError("dataset must be normalized")
    users = np.concatenate([dataset.users, np.asarray([e.user for e in edges], dtype=np.int64)])
    items = np.concatenate([dataset.items, np.asarray([e.item for e in edges], dtype=np.int64)])
    weights = np.concatenate([dataset.playtime_norm, np.asarray([e.weight for e in edges], dtype=np.float64)])
    return BipartiteGraph(dataset.num_users, dataset.num_items, users, items, weights)


def run_walks(dataset: Dataset, assignment: InterestAssignment, config: WalkConfig | None = None,
              threads: int | None = None) -> WalkResult:
    engine = WalkEngine(dataset, assignment, config)
    edges = engine.run(threads=threads)
    return WalkResult(edges, augmented_graph(dataset, edges))


def write_edges(path, dataset: Dataset, edges: Sequence[AugmentedEdge]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, t in zip(dataset.users, dataset.items, dataset.playtime_norm):
            fh.write(f"{dataset.user_ids[u]}\t{dataset.item_ids[i]}\t{float(t)!r}\tinteraction\n")
        for e in edges:
            fh.write(f"{dataset.user_ids[e.user]}\t{dataset.item_ids[e.item]}\t{e.weight!r}\twalk\n")


def read_walk_edges(path, dataset: Dataset) -> list[AugmentedEdge]:
    ulook, ilook = dataset.user_lookup(), dataset.item_lookup()
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            if parts[3] == "walk":
                out.append(AugmentedEdge(ulook[parts[0]], ilook[parts[1]], float(parts[2])))
    return out
