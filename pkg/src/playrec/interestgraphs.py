"""Full/strong interest graph views and the cross-view contrastive objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .betamix import InterestAssignment
from .dataio import Dataset
from .propagation import BipartiteGraph

_GAMMA_WEIGHT_FLOOR = 1e-6


@dataclass(frozen=True)
class SslConfig:
    tau: float = 0.2
    lam: float = 1.0
    negatives: str = "in_batch_all"
    num_negatives: int = 64
    fusion: str = "sum"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.negatives not in ("in_batch_all", "sampled_k"):
            raise ValueError(f"unknown negatives mode {self.negatives!r}")
        if self.fusion not in ("sum", "mean"):
            raise ValueError(f"unknown fusion {self.fusion!r}")


@dataclass
class GraphViews:
    full: BipartiteGraph
    strong: BipartiteGraph


def build_graph_views(dataset: Dataset, assignment: InterestAssignment,
                      weighting: str = "unit") -> GraphViews:
    """Full view over every interaction; strong view over gamma > 0.5 edges only."""
    if len(assignment) != len(dataset):
        raise ValueError("assignment does not cover the dataset rows")
    strong = assignment.strong
    if weighting == "unit":
        w_full = np.ones(len(dataset))
    elif weighting == "gamma":
        w_full = np.maximum(assignment.gamma, _GAMMA_WEIGHT_FLOOR)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    full = BipartiteGraph(dataset.num_users, dataset.num_items, dataset.users, dataset.items, w_full)
    s_graph = BipartiteGraph(dataset.num_users, dataset.num_items,
                             dataset.users[strong], dataset.items[strong], w_full[strong])
    return GraphViews(full, s_graph)


def cosine(x: np.ndarray, y: np.ndarray) -> float:
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return 0.0
    return float(np.dot(x, y) / (nx * ny))


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    return x / safe[:, None], safe, zero


def _unit_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray, zero: np.ndarray) -> np.ndarray:
    g = (grad_unit - unit * np.sum(grad_unit * unit, axis=1, keepdims=True)) / norms[:, None]
    g[zero] = 0.0
    return g


def info_nce(anchor: np.ndarray, positive: np.ndarray, tau: float,
             negatives: np.ndarray | None = None) -> tuple[float, np.ndarray, np.ndarray, int]:
    """Sum over rows r of -log softmax_r(cos(anchor_r, positive_.) / tau)[r].

    With ``negatives`` (rows x k index array into ``positive``) only those
    columns plus the positive enter each denominator.
    Returns (loss, grad_anchor, grad_positive, number of zero-norm rows).
    """
    fa, na, za = _unit_rows(anchor)
    fp, np_, zp = _unit_rows(positive)
    n = len(anchor)
    if n == 0:
        return 0.0, np.zeros_like(anchor), np.zeros_like(positive), 0
    if negatives is None:
        logits = fa @ fp.T / tau
        loss = float(np.sum(logsumexp(logits, axis=1) - np.diag(logits)))
        d_logits = softmax(logits, axis=1)
        d_logits[np.arange(n), np.arange(n)] -= 1.0
        g_fa = d_logits @ fp / tau
        g_fp = d_logits.T @ fa / tau
    else:
        cols = np.concatenate([np.arange(n)[:, None], negatives], axis=1)
        cand = fp[cols]
        logits = np.einsum("nd,nkd->nk", fa, cand) / tau
        loss = float(np.sum(logsumexp(logits, axis=1) - logits[:, 0]))
        d_logits = softmax(logits, axis=1)
        d_logits[:, 0] -= 1.0
        g_fa = np.einsum("nk,nkd->nd", d_logits, cand) / tau
        g_fp = np.zeros_like(fp)
        np.add.at(g_fp, cols.ravel(), (d_logits[:, :, None] * fa[:, None, :]).reshape(-1, fa.shape[1]) / tau)
    g_anchor = _unit_backward(g_fa, fa, na, za)
    g_positive = _unit_backward(g_fp, fp, np_, zp)
    return loss, g_anchor, g_positive, int(za.sum() + zp.sum())


@dataclass
class SslResult:
    loss: float
    user_loss: float
    item_loss: float
    grad_full_user: np.ndarray
    grad_strong_user: np.ndarray
    grad_full_item: np.ndarray
    grad_strong_item: np.ndarray
    zero_norm_rows: int = 0


def _sample_negatives(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    k = min(k, n - 1)
    if k <= 0:
        return np.zeros((n, 0), dtype=np.int64)
    draw = rng.integers(0, n - 1, size=(n, k))
    # shift to skip the anchor's own index
    return draw + (draw >= np.arange(n)[:, None])


def ssl_loss(full_user: np.ndarray, strong_user: np.ndarray, full_item: np.ndarray, strong_item: np.ndarray,
             config: SslConfig | None = None, rng: np.random.Generator | None = None) -> SslResult:
    """User-side plus lam-weighted item-side InfoNCE between the two views."""
    config = config or SslConfig()
    neg_u = neg_i = None
    if config.negatives == "sampled_k":
        rng = rng or np.random.default_rng(0)
        neg_u = _sample_negatives(len(full_user), config.num_negatives, rng)
        neg_i = _sample_negatives(len(full_item), config.num_negatives, rng)
    lu, gfu, gsu, zu = info_nce(full_user, strong_user, config.tau, neg_u)
    li, gfi, gsi, zi = info_nce(full_item, strong_item, config.tau, neg_i)
    lam = config.lam
    return SslResult(lu + lam * li, lu, li, gfu, gsu, lam * gfi, lam * gsi, zu + zi)


def fuse_views(full: np.ndarray, strong: np.ndarray, mode: str = "sum") -> np.ndarray:
    if mode == "sum":
        return full + strong
    if mode == "mean":
        return 0.5 * (full + strong)
    raise ValueError(f"unknown fusion {mode!r}")


def fuse_views_scale(mode: str) -> float:
    """d(fused)/d(view) for the linear fusion modes."""
    return 1.0 if mode == "sum" else 0.5
