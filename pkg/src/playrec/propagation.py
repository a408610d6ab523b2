"""Weighted LightGCN-style propagation over a user-item bipartite graph.

The forward map is linear in the base embeddings, so the backward pass is the
same sparse products applied to the upstream gradients in reverse order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dataio import read_prec, write_prec


@dataclass(frozen=True)
class GcnConfig:
    num_layers: int = 2
    dim: int = 64
    final_embedding: str = "last_layer"

    def __post_init__(self):
        if self.num_layers < 1 or self.dim < 1:
            raise ValueError("num_layers and dim must be >= 1")
        if self.final_embedding not in ("last_layer", "layer_mean"):
            raise ValueError(f"unknown final_embedding {self.final_embedding!r}")


class BipartiteGraph:
    """Weighted user-item edges with CSR views from both sides."""

    def __init__(self, num_users: int, num_items: int, users, items, weights=None):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        weights = np.ones(len(users)) if weights is None else np.asarray(weights, dtype=np.float64)
        if not (len(users) == len(items) == len(weights)):
            raise ValueError("edge arrays must have equal length")
        if len(users) and (users.min() < 0 or users.max() >= num_users or items.min() < 0 or items.max() >= num_items):
            raise ValueError("edge endpoint out of range")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ValueError("edge weights must be finite and positive")
        order = np.lexsort((items, users))
        self.users, self.items, self.weights = users[order], items[order], weights[order]
        if len(users) > 1 and np.any((np.diff(self.users) == 0) & (np.diff(self.items) == 0)):
            raise ValueError("duplicate edge in bipartite graph")
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        for arr in (self.users, self.items, self.weights):
            arr.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return len(self.users)

    @cached_property
    def user_adjacency(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, (self.users, self.items)), shape=(self.num_users, self.num_items))

    @cached_property
    def item_adjacency(self) -> sp.csr_matrix:
        return self.user_adjacency.T.tocsr()

    @cached_property
    def user_degree(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)

    @cached_property
    def item_degree(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    @cached_property
    def coefficients(self) -> np.ndarray:
        """Per-edge w / sqrt(|N_u| |N_i|), aligned with the sorted edge arrays."""
        du = self.user_degree[self.users].astype(np.float64)
        di = self.item_degree[self.items].astype(np.float64)
        return self.weights / np.sqrt(du * di)

    @cached_property
    def normalized(self) -> sp.csr_matrix:
        return normalize_adjacency(self)

    @cached_property
    def normalized_t(self) -> sp.csr_matrix:
        return self.normalized.T.tocsr()

    def transpose(self) -> BipartiteGraph:
        return BipartiteGraph(self.num_items, self.num_users, self.items, self.users, self.weights)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def __repr__(self):
        return f"BipartiteGraph(users={self.num_users}, items={self.num_items}, edges={self.num_edges})"


def normalize_adjacency(graph: BipartiteGraph) -> sp.csr_matrix:
    """Users-by-items matrix of symmetric-normalized edge coefficients."""
    return sp.csr_matrix((graph.coefficients, (graph.users, graph.items)),
                         shape=(graph.num_users, graph.num_items))


@dataclass
class Propagated:
    user: np.ndarray
    item: np.ndarray
    user_layers: list[np.ndarray]
    item_layers: list[np.ndarray]


def _check(graph: BipartiteGraph, user_emb: np.ndarray, item_emb: np.ndarray):
    if user_emb.shape[0] != graph.num_users or item_emb.shape[0] != graph.num_items:
        raise ValueError(f"embedding rows ({user_emb.shape[0]}, {item_emb.shape[0]}) do not match "
                         f"graph ({graph.num_users}, {graph.num_items})")
    if user_emb.ndim != 2 or item_emb.ndim != 2 or user_emb.shape[1] != item_emb.shape[1]:
        raise ValueError("user and item tables must be 2-d with equal dimension")


def propagate(graph: BipartiteGraph, user_emb: np.ndarray, item_emb: np.ndarray,
              config: GcnConfig | None = None) -> Propagated:
    config = config or GcnConfig()
    _check(graph, user_emb, item_emb)
    a, at = graph.normalized, graph.normalized_t
    eu, ei = [user_emb], [item_emb]
    for _ in range(config.num_layers):
        eu.append(np.asarray(a @ ei[-1]))
        ei.append(np.asarray(at @ eu[-2]))
    if config.final_embedding == "last_layer":
        return Propagated(eu[-1], ei[-1], eu, ei)
    return Propagated(sum(eu) / len(eu), sum(ei) / len(ei), eu, ei)


def propagate_backward(graph: BipartiteGraph, grad_user: np.ndarray, grad_item: np.ndarray,
                       config: GcnConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. the base tables given gradients w.r.t. the final tables."""
    config = config or GcnConfig()
    _check(graph, grad_user, grad_item)
    a, at = graph.normalized, graph.normalized_t
    n_layers = config.num_layers
    if config.final_embedding == "last_layer":
        gu, gi = grad_user, grad_item
        for _ in range(n_layers):
            # adjoint of (eu' = A ei, ei' = A^T eu)
            gu, gi = np.asarray(a @ gi), np.asarray(at @ gu)
        return gu, gi
    scale = 1.0 / (n_layers + 1)
    gu, gi = grad_user * scale, grad_item * scale
    acc_u, acc_i = gu.copy(), gi.copy()
    for _ in range(n_layers):
        gu, gi = np.asarray(a @ gi), np.asarray(at @ gu)
        acc_u += gu
        acc_i += gi
    return acc_u, acc_i


def init_embeddings(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(scale=0.1 / np.sqrt(dim), size=(n, dim))


def write_embedding_table(path, user_emb: np.ndarray, item_emb: np.ndarray, view: str) -> Path:
    """PREC binary (user rows first, then item rows) plus a JSON sidecar."""
    path = Path(path)
    write_prec(path, np.vstack([user_emb, item_emb]))
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"dim": int(user_emb.shape[1]), "num_users": int(user_emb.shape[0]),
                                   "num_items": int(item_emb.shape[0]), "view": view}, sort_keys=True))
    return sidecar


def read_embedding_table(path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    mat = read_prec(path)
    n_u = meta["num_users"]
    return mat[:n_u], mat[n_u:], meta


def write_edges_tsv(path, graph: BipartiteGraph, view: str, user_ids=None, item_ids=None) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for u, i, w in zip(graph.users, graph.items, graph.weights):
            uid = user_ids[u] if user_ids is not None else u
            iid = item_ids[i] if item_ids is not None else i
            fh.write(f"{uid}\t{iid}\t{float(w)!r}\t{view}\n")
