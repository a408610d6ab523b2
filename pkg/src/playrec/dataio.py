"""Interaction data: loading, percentile normalization, splitting, synthesis.

Interactions are held column-wise in numpy arrays; ``InteractionRecord`` is the
row view handed out by :attr:`Dataset.records`.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PREC_MAGIC = b"PREC"


class DataFormatError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    playtime_raw: float
    playtime_norm: float | None = None


@dataclass(frozen=True)
class NormalizationConfig:
    epsilon: float = 1e-6
    tie_rule: str = "average_rank"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        if self.tie_rule != "average_rank":
            raise ValueError(f"unsupported tie rule {self.tie_rule!r}")


class CategoryIndex:
    """Two-way item/category membership map over dense ids."""

    def __init__(self, item_to_categories: Sequence[Iterable[int]], num_categories: int,
                 names: Sequence[str] | None = None):
        self.num_categories = int(num_categories)
        self.item_to_categories: tuple[tuple[int, ...], ...] = tuple(
            tuple(sorted(set(int(c) for c in cats))) for cats in item_to_categories
        )
        members: list[list[int]] = [[] for _ in range(self.num_categories)]
        for item, cats in enumerate(self.item_to_categories):
            for c in cats:
                if not 0 <= c < self.num_categories:
                    raise ValueError(f"category id {c} out of range for item {item}")
                members[c].append(item)
        self.category_to_items: tuple[np.ndarray, ...] = tuple(
            np.asarray(m, dtype=np.int64) for m in members
        )
        self.names = tuple(names) if names is not None else tuple(str(c) for c in range(self.num_categories))

    @property
    def num_items(self) -> int:
        return len(self.item_to_categories)

    def categories_of(self, item: int) -> tuple[int, ...]:
        return self.item_to_categories[item]

    def __eq__(self, other):
        return (isinstance(other, CategoryIndex)
                and self.num_categories == other.num_categories
                and self.item_to_categories == other.item_to_categories)

    def __repr__(self):
        return f"CategoryIndex(num_items={self.num_items}, num_categories={self.num_categories})"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Interaction table plus item side information.

    ``playtime_norm`` is ``None`` until :func:`normalize_playtime` has run.
    ``truth_strong`` carries generator labels for synthetic data only.
    """

    users: np.ndarray
    items: np.ndarray
    playtime_raw: np.ndarray
    categories: CategoryIndex
    modal: np.ndarray
    num_users: int
    num_items: int
    playtime_norm: np.ndarray | None = None
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()
    truth_strong: np.ndarray | None = None

    def __post_init__(self):
        for name in ("users", "items", "playtime_raw", "playtime_norm", "truth_strong", "modal"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)
        if not self.user_ids:
            object.__setattr__(self, "user_ids", tuple(str(u) for u in range(self.num_users)))
        if not self.item_ids:
            object.__setattr__(self, "item_ids", tuple(str(i) for i in range(self.num_items)))

    def __len__(self) -> int:
        return len(self.users)

    @property
    def normalized(self) -> bool:
        return self.playtime_norm is not None

    @property
    def records(self) -> list[InteractionRecord]:
        norm = self.playtime_norm
        return [
            InteractionRecord(int(u), int(i), float(t), None if norm is None else float(norm[k]))
            for k, (u, i, t) in enumerate(zip(self.users, self.items, self.playtime_raw))
        ]

    @cached_property
    def user_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, order): rows of user u are ``order[indptr[u]:indptr[u+1]]``."""
        order = np.argsort(self.users, kind="stable")
        counts = np.bincount(self.users, minlength=self.num_users)
        indptr = np.zeros(self.num_users + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return indptr, order

    def rows_of(self, user: int) -> np.ndarray:
        indptr, order = self.user_index
        return order[indptr[user]:indptr[user + 1]]

    def items_of(self, user: int) -> np.ndarray:
        return self.items[self.rows_of(user)]

    @cached_property
    def item_sets(self) -> tuple[frozenset, ...]:
        return tuple(frozenset(self.items_of(u).tolist()) for u in range(self.num_users))

    def with_rows(self, rows: np.ndarray) -> Dataset:
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            users=self.users[rows].copy(),
            items=self.items[rows].copy(),
            playtime_raw=self.playtime_raw[rows].copy(),
            playtime_norm=None if self.playtime_norm is None else self.playtime_norm[rows].copy(),
            truth_strong=None if self.truth_strong is None else self.truth_strong[rows].copy(),
        )

    def user_lookup(self) -> dict[str, int]:
        return {ext: k for k, ext in enumerate(self.user_ids)}

    def item_lookup(self) -> dict[str, int]:
        return {ext: k for k, ext in enumerate(self.item_ids)}


def _sort_ids(ids: Iterable[str]) -> list[str]:
    ids = set(ids)
    try:
        return sorted(ids, key=int)
    except ValueError:
        return sorted(ids)


def _read_csv(path: Path, header: Sequence[str], min_cols: int | None = None):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        got = [h.strip() for h in first]
        if got[: len(header)] != list(header):
            raise DataFormatError(f"{path}:1: expected header {','.join(header)}, got {','.join(got)}")
        width = min_cols or len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            yield lineno, got, [cell.strip() for cell in row]


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a modal embedding file; returns (external item ids, matrix)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == PREC_MAGIC:
        # binary rows are addressed by position: row k is external item id "k"
        mat = _read_prec(path)
        return [str(k) for k in range(mat.shape[0])], mat
    ids: list[str] = []
    rows: list[list[float]] = []
    dim = None
    for lineno, hdr, row in _read_csv(path, ["item_id"], min_cols=2):
        try:
            vec = [float(v) for v in row[1:]]
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-numeric embedding value") from None
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise DataFormatError(f"{path}:{lineno}: dimension {len(vec)} != {dim}")
        ids.append(row[0])
        rows.append(vec)
    if len(set(ids)) != len(ids):
        raise DataFormatError(f"{path}: duplicate item ids in embeddings")
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(rows), dim or 0)


def _read_prec(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != PREC_MAGIC:
        raise DataFormatError(f"{path}: missing PREC header")
    count, dim = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * count * dim
    if len(data) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for {count}x{dim}, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(count, dim).astype(np.float64)


def read_prec(path: str | Path) -> np.ndarray:
    return _read_prec(Path(path))


def write_prec(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("PREC payload must be a 2-d matrix")
    with open(path, "wb") as fh:
        fh.write(PREC_MAGIC)
        fh.write(struct.pack("<II", *matrix.shape))
        fh.write(matrix.tobytes())


def load_dataset(interactions_path, categories_path, embeddings_path,
                 config: NormalizationConfig | None = None, normalize: bool = True) -> Dataset:
    """Parse the three input files into a densely indexed :class:`Dataset`."""
    triples = []
    seen = set()
    for lineno, _, row in _read_csv(Path(interactions_path), ["user_id", "item_id", "playtime_minutes"]):
        user, item, raw = row[0], row[1], row[2]
        try:
            minutes = float(raw)
        except ValueError:
            raise DataFormatError(f"{interactions_path}:{lineno}: bad playtime {raw!r}") from None
        if not np.isfinite(minutes) or minutes < 0:
            raise DataFormatError(f"{interactions_path}:{lineno}: playtime must be finite and >= 0")
        if (user, item) in seen:
            raise DataFormatError(f"{interactions_path}:{lineno}: duplicate interaction ({user}, {item})")
        seen.add((user, item))
        triples.append((user, item, minutes))

    memberships: dict[str, set[str]] = {}
    for _, _, row in _read_csv(Path(categories_path), ["item_id", "category"]):
        memberships.setdefault(row[0], set()).add(row[1])

    emb_ids, emb = read_embeddings(embeddings_path)
    emb_pos = {ext: k for k, ext in enumerate(emb_ids)}

    interacted = {t[1] for t in triples}
    missing_cat = sorted(interacted - memberships.keys())
    missing_emb = sorted(interacted - emb_pos.keys())
    if missing_cat or missing_emb:
        parts = []
        if missing_cat:
            parts.append(f"no category for items {missing_cat[:20]}")
        if missing_emb:
            parts.append(f"no embedding for items {missing_emb[:20]}")
        raise DataFormatError("; ".join(parts))

    item_ids = _sort_ids(emb_pos.keys())
    user_ids = _sort_ids(t[0] for t in triples)
    item_of = {ext: k for k, ext in enumerate(item_ids)}
    user_of = {ext: k for k, ext in enumerate(user_ids)}
    cat_names = _sort_ids(c for cats in memberships.values() for c in cats)
    cat_of = {name: k for k, name in enumerate(cat_names)}

    modal = emb[[emb_pos[ext] for ext in item_ids]] if item_ids else np.zeros((0, emb.shape[1]))
    check_modal(modal)
    cats = CategoryIndex(
        [[cat_of[c] for c in memberships.get(ext, ())] for ext in item_ids],
        len(cat_names), cat_names,
    )
    ds = Dataset(
        users=np.asarray([user_of[t[0]] for t in triples], dtype=np.int64),
        items=np.asarray([item_of[t[1]] for t in triples], dtype=np.int64),
        playtime_raw=np.asarray([t[2] for t in triples], dtype=np.float64),
        categories=cats,
        modal=np.asarray(modal, dtype=np.float64),
        num_users=len(user_ids),
        num_items=len(item_ids),
        user_ids=tuple(user_ids),
        item_ids=tuple(item_ids),
    )
    return normalize_playtime(ds, config or NormalizationConfig()) if normalize else ds


def check_modal(modal: np.ndarray) -> None:
    if not np.all(np.isfinite(modal)):
        raise DataFormatError("modal embeddings contain non-finite entries")
    norms = np.linalg.norm(modal, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DataFormatError(f"zero-norm modal embeddings for items {zero[:20].tolist()}")


def percentile_ranks(items: np.ndarray, playtime: np.ndarray, epsilon: float) -> np.ndarray:
    """rank/total_players per item with average ranks for ties, clamped to [eps, 1-eps]."""
    n = len(items)
    out = np.empty(n, dtype=np.float64)
    if n == 0:
        return out
    order = np.lexsort((playtime, items))
    s_items = items[order]
    s_time = playtime[order]
    pos = np.arange(n)
    new_group = np.r_[True, s_items[1:] != s_items[:-1]]
    group_start = np.maximum.accumulate(np.where(new_group, pos, 0))
    group_id = np.cumsum(new_group) - 1
    group_size = np.bincount(group_id)
    new_run = new_group | np.r_[True, s_time[1:] != s_time[:-1]]
    run_id = np.cumsum(new_run) - 1
    run_first = pos[new_run]
    run_last = np.r_[run_first[1:] - 1, n - 1]
    rank = (run_first[run_id] + run_last[run_id]) / 2.0 - group_start + 1.0
    out[order] = rank / group_size[group_id]
    return np.clip(out, epsilon, 1.0 - epsilon)


def normalize_playtime(dataset: Dataset, config: NormalizationConfig | None = None) -> Dataset:
    config = config or NormalizationConfig()
    norm = percentile_ranks(dataset.items, dataset.playtime_raw, config.epsilon)
    return replace(dataset, playtime_norm=norm)


def filter_users(dataset: Dataset, min_interactions: int) -> Dataset:
    """Drop interactions of users with fewer than ``min_interactions`` rows (ids unchanged)."""
    counts = np.bincount(dataset.users, minlength=dataset.num_users)
    keep = counts[dataset.users] >= min_interactions
    return dataset.with_rows(np.flatnonzero(keep))


def split_dataset(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Per-user random train/valid/test partition."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not 0.0 <= r <= 1.0 for r in ratios) or ratios[0] <= 0:
        raise ValueError(f"ratios must lie in [0, 1] with a positive train share, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for u in range(dataset.num_users):
        rows = dataset.rows_of(u)
        n = len(rows)
        if n == 0:
            continue
        rows = rows[rng.permutation(n)]
        if n < 3:
            parts[0].append(rows)
            continue
        n_valid = max(1, int(n * ratios[1] + 0.5)) if ratios[1] > 0 else 0
        n_test = max(1, int(n * ratios[2] + 0.5)) if ratios[2] > 0 else 0
        n_train = n - n_valid - n_test
        parts[0].append(rows[:n_train])
        parts[1].append(rows[n_train:n_train + n_valid])
        parts[2].append(rows[n_train + n_valid:])
    out = []
    for chunk in parts:
        rows = np.sort(np.concatenate(chunk)) if chunk else np.zeros(0, dtype=np.int64)
        out.append(dataset.with_rows(rows))
    return tuple(out)


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator knobs; mixture defaults are the population-average fitted shapes."""

    pi: float = 0.4
    strong: tuple[float, float] = (9.58, 2.26)
    weak: tuple[float, float] = (4.68, 8.37)
    min_interactions: int = 20
    max_interactions: int = 40
    max_categories_per_item: int = 3
    preferred_categories: int = 2
    strong_pref_prob: float = 0.9
    weak_pref_prob: float = 0.5
    modal_dim: int = 16
    modal_noise: float = 0.6
    minutes_scale: float = 600.0
    epsilon: float = 1e-6


def generate_synthetic(num_users: int, num_items: int, num_categories: int,
                       spec: SyntheticSpec | None = None, seed: int = 0) -> Dataset:
    """Draw a pre-normalized dataset from a dual-beta playtime mixture.

    Each user prefers a few categories; strong-component interactions land on
    preferred-category items more often than weak ones. ``playtime_norm`` is the
    mixture draw itself and ``truth_strong`` its component label.
    """
    spec = spec or SyntheticSpec()
    if min(num_users, num_items, num_categories) <= 0:
        raise ValueError("num_users, num_items and num_categories must be positive")
    if not 0.0 <= spec.pi <= 1.0:
        raise ValueError("pi must lie in [0, 1]")
    rng = np.random.default_rng(seed)

    primary = rng.permutation(np.arange(num_items) % num_categories)
    item_cats = []
    for i in range(num_items):
        extra = rng.integers(0, min(spec.max_categories_per_item, num_categories))
        others = rng.choice(num_categories, size=extra, replace=False) if extra else []
        item_cats.append({int(primary[i]), *map(int, others)})
    cats = CategoryIndex(item_cats, num_categories)

    centers = rng.normal(size=(num_categories, spec.modal_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    modal = np.stack([centers[sorted(c)].mean(axis=0) for c in item_cats])
    modal += spec.modal_noise * rng.normal(size=modal.shape) / np.sqrt(spec.modal_dim)
    modal /= np.linalg.norm(modal, axis=1, keepdims=True)

    users, items, values, truth = [], [], [], []
    n_pref = min(spec.preferred_categories, num_categories)
    for u in range(num_users):
        n_u = int(rng.integers(spec.min_interactions, spec.max_interactions + 1))
        n_u = min(n_u, num_items)
        prefs = set(rng.choice(num_categories, size=n_pref, replace=False).tolist())
        in_pref = np.fromiter((bool(prefs & c) for c in item_cats), dtype=bool, count=num_items)
        taken = np.zeros(num_items, dtype=bool)
        strong = rng.random(n_u) < spec.pi
        for s in strong:
            p = spec.strong_pref_prob if s else spec.weak_pref_prob
            pool = in_pref if rng.random() < p else np.ones(num_items, dtype=bool)
            avail = np.flatnonzero(pool & ~taken)
            if avail.size == 0:
                avail = np.flatnonzero(~taken)
            item = int(avail[rng.integers(avail.size)])
            taken[item] = True
            a, b = spec.strong if s else spec.weak
            users.append(u)
            items.append(item)
            values.append(rng.beta(a, b))
            truth.append(bool(s))
    norm = np.clip(np.asarray(values, dtype=np.float64), spec.epsilon, 1.0 - spec.epsilon)
    return Dataset(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        playtime_raw=norm * spec.minutes_scale,
        playtime_norm=norm,
        categories=cats,
        modal=modal,
        num_users=num_users,
        num_items=num_items,
        truth_strong=np.asarray(truth, dtype=bool),
    )


def write_dataset(dataset: Dataset, directory: str | Path, binary_embeddings: bool = False) -> dict[str, Path]:
    """Write the three input files for ``dataset`` using external ids."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "interactions": directory / "interactions.csv",
        "categories": directory / "categories.csv",
        "embeddings": directory / ("embeddings.bin" if binary_embeddings else "embeddings.csv"),
    }
    with open(paths["interactions"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "playtime_minutes"])
        for u, i, t in zip(dataset.users, dataset.items, dataset.playtime_raw):
            w.writerow([dataset.user_ids[u], dataset.item_ids[i], repr(float(t))])
    with open(paths["categories"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "category"])
        for i, cs in enumerate(dataset.categories.item_to_categories):
            for c in cs:
                w.writerow([dataset.item_ids[i], dataset.categories.names[c]])
    if binary_embeddings:
        write_prec(paths["embeddings"], dataset.modal)
    else:
        with open(paths["embeddings"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["item_id"] + [f"v{k}" for k in range(dataset.modal.shape[1])])
            for i, vec in enumerate(dataset.modal):
                w.writerow([dataset.item_ids[i]] + [repr(float(v)) for v in vec])
    return paths
