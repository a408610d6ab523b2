"""Joint training of the interest-graph and random-walk branches.

The two branches own separate base tables. Both are propagated, the strong and
full views are summed into the interest embedding, and the branches are fused
as ``alpha * interest + walk``. The objective is the reweighted pairwise
ranking loss plus a weighted contrastive term between the two interest views.
All gradients are computed by hand and stepped with Adam.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from .dataio import Dataset
from .interestgraphs import GraphViews, SslConfig, fuse_views, fuse_views_scale, ssl_loss
from .propagation import BipartiteGraph, GcnConfig, init_embeddings, propagate, propagate_backward, write_embedding_table

log = logging.getLogger(__name__)

_STREAM = zlib.crc32(b"training")

# (alpha, Q) operating points read off the sensitivity sweeps
PRESETS = {
    "accuracy": (1.6, 4),
    "diversity": (0.4, 1),
    "trade-off": (0.6, 1),
}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class BalanceConfig:
    alpha: float = 0.6
    zeta: float = 1.0
    k_scale: float = 1.0
    ssl_weight: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 20
    negatives_per_positive: int = 1
    batch_size: int = 2048
    seed: int = 0
    detach_reweight: bool = False
    share_base: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.negatives_per_positive < 1 or self.batch_size < 1:
            raise ValueError("negatives_per_positive and batch_size must be >= 1")


def fuse_embeddings(e_iie: np.ndarray, e_mrw: np.ndarray, alpha: float) -> np.ndarray:
    e_iie, e_mrw = np.asarray(e_iie, dtype=np.float64), np.asarray(e_mrw, dtype=np.float64)
    if e_iie.shape != e_mrw.shape:
        raise ValueError(f"cannot fuse shapes {e_iie.shape} and {e_mrw.shape}")
    return alpha * e_iie + e_mrw


def reweighted_score(s, zeta: float, k_scale: float):
    """s * sigmoid(zeta * s) * K and its derivative with respect to s."""
    s = np.asarray(s, dtype=np.float64)
    sig = expit(zeta * s)
    value = s * sig * k_scale
    deriv = k_scale * (sig + s * zeta * sig * (1.0 - sig))
    return value, deriv


def balance_loss(user_emb: np.ndarray, item_emb: np.ndarray, triplets, config: BalanceConfig):
    """-sum log sigmoid(s_ui - s~_uj) over (u, i, j) triplets, with gradients on both tables."""
    u, i, j = (np.asarray(t, dtype=np.int64) for t in triplets)
    eu, ei, ej = user_emb[u], item_emb[i], item_emb[j]
    s_pos = np.einsum("nd,nd->n", eu, ei)
    s_neg = np.einsum("nd,nd->n", eu, ej)
    s_tilde, ds = reweighted_score(s_neg, config.zeta, config.k_scale)
    if config.detach_reweight:
        ds = expit(config.zeta * s_neg) * config.k_scale
    x = s_pos - s_tilde
    loss = float(-np.sum(log_expit(x)))
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite ranking loss (max |s|={np.max(np.abs(s_pos)):.3g})")
    g = -expit(-x)  # d loss / d x
    g_user = np.zeros_like(user_emb)
    g_item = np.zeros_like(item_emb)
    np.add.at(g_user, u, g[:, None] * (ei - ds[:, None] * ej))
    np.add.at(g_item, i, g[:, None] * eu)
    np.add.at(g_item, j, -(g * ds)[:, None] * eu)
    return loss, g_user, g_item


@dataclass
class Graphs:
    full: BipartiteGraph
    strong: BipartiteGraph
    walk: BipartiteGraph

    @classmethod
    def from_views(cls, views: GraphViews, walk: BipartiteGraph) -> Graphs:
        return cls(views.full, views.strong, walk)


PARAM_NAMES = ("iie_user", "iie_item", "mrw_user", "mrw_item")


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    rng_state: dict | None = None

    @classmethod
    def initialize(cls, num_users: int, num_items: int, dim: int, seed: int) -> ModelState:
        rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM, 0]))
        params = {
            "iie_user": init_embeddings(num_users, dim, rng),
            "iie_item": init_embeddings(num_items, dim, rng),
            "mrw_user": init_embeddings(num_users, dim, rng),
            "mrw_item": init_embeddings(num_items, dim, rng),
        }
        zeros = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()})


@dataclass
class Forward:
    full: object
    strong: object
    walk: object
    user: np.ndarray
    item: np.ndarray
    iie_user: np.ndarray
    iie_item: np.ndarray


class DualPhaseModel:
    """Forward/backward over fixed graphs for a given set of configs."""

    def __init__(self, graphs: Graphs, gcn: GcnConfig | None = None, ssl: SslConfig | None = None,
                 balance: BalanceConfig | None = None):
        self.graphs = graphs
        self.gcn = gcn or GcnConfig()
        self.ssl = ssl or SslConfig()
        self.balance = balance or BalanceConfig()

    def _mrw_base(self, params):
        if self.balance.share_base:
            return params["iie_user"], params["iie_item"]
        return params["mrw_user"], params["mrw_item"]

    def forward(self, params: dict[str, np.ndarray]) -> Forward:
        g = self.graphs
        pf = propagate(g.full, params["iie_user"], params["iie_item"], self.gcn)
        ps = propagate(g.strong, params["iie_user"], params["iie_item"], self.gcn)
        pw = propagate(g.walk, *self._mrw_base(params), self.gcn)
        iie_u = fuse_views(pf.user, ps.user, self.ssl.fusion)
        iie_i = fuse_views(pf.item, ps.item, self.ssl.fusion)
        alpha = self.balance.alpha
        return Forward(pf, ps, pw, fuse_embeddings(iie_u, pw.user, alpha),
                       fuse_embeddings(iie_i, pw.item, alpha), iie_u, iie_i)

    def scores(self, params: dict[str, np.ndarray], users=None) -> np.ndarray:
        fw = self.forward(params)
        eu = fw.user if users is None else fw.user[np.asarray(users)]
        return eu @ fw.item.T

    def loss_and_grad(self, params: dict[str, np.ndarray], triplets, rng: np.random.Generator | None = None,
                      ssl_nodes: tuple[np.ndarray, np.ndarray] | None = None):
        """Joint objective and its gradient w.r.t. every base table.

        ``ssl_nodes`` restricts the contrastive term to (users, items); by
        default every node takes part.
        """
        cfg = self.balance
        g = self.graphs
        fw = self.forward(params)
        l_bal, g_user, g_item = balance_loss(fw.user, fw.item, triplets, cfg)

        if ssl_nodes is None:
            ssl_u, ssl_i = np.arange(g.full.num_users), np.arange(g.full.num_items)
        else:
            ssl_u, ssl_i = ssl_nodes
        res = ssl_loss(fw.full.user[ssl_u], fw.strong.user[ssl_u], fw.full.item[ssl_i], fw.strong.item[ssl_i],
                       self.ssl, rng)
        w = cfg.ssl_weight
        loss = l_bal + w * res.loss

        scale = cfg.alpha * fuse_views_scale(self.ssl.fusion)
        gf_u, gs_u = scale * g_user, scale * g_user.copy()
        gf_i, gs_i = scale * g_item, scale * g_item.copy()
        np.add.at(gf_u, ssl_u, w * res.grad_full_user)
        np.add.at(gs_u, ssl_u, w * res.grad_strong_user)
        np.add.at(gf_i, ssl_i, w * res.grad_full_item)
        np.add.at(gs_i, ssl_i, w * res.grad_strong_item)

        bf_u, bf_i = propagate_backward(g.full, gf_u, gf_i, self.gcn)
        bs_u, bs_i = propagate_backward(g.strong, gs_u, gs_i, self.gcn)
        bw_u, bw_i = propagate_backward(g.walk, g_user, g_item, self.gcn)
        grads = {"iie_user": bf_u + bs_u, "iie_item": bf_i + bs_i}
        if cfg.share_base:
            grads["iie_user"] = grads["iie_user"] + bw_u
            grads["iie_item"] = grads["iie_item"] + bw_i
            grads["mrw_user"] = np.zeros_like(params["mrw_user"])
            grads["mrw_item"] = np.zeros_like(params["mrw_item"])
        else:
            grads["mrw_user"], grads["mrw_item"] = bw_u, bw_i
        return loss, {"balance": l_bal, "ssl": res.loss}, grads


def adam_step(state: ModelState, grads: dict[str, np.ndarray], config: BalanceConfig) -> None:
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in PARAM_NAMES:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        state.params[name] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def sample_triplets(train: Dataset, negatives_per_positive: int, rng: np.random.Generator):
    """Each training interaction paired with uniformly drawn unobserved items."""
    n_items = train.num_items
    u = np.repeat(train.users, negatives_per_positive)
    i = np.repeat(train.items, negatives_per_positive)
    owned = np.unique(train.users * n_items + train.items)
    counts = np.bincount(train.users, minlength=train.num_users)
    if np.any(counts[np.unique(train.users)] >= n_items):
        raise ValueError("a user interacted with every item; no negatives available")
    j = rng.integers(0, n_items, size=len(u))
    while True:
        key = u * n_items + j
        pos = np.searchsorted(owned, key)
        bad = (pos < len(owned)) & (owned[np.minimum(pos, len(owned) - 1)] == key)
        if not bad.any():
            break
        j[bad] = rng.integers(0, n_items, size=int(bad.sum()))
    return u, i, j


def train(train_set: Dataset, graphs: Graphs, gcn: GcnConfig | None = None, ssl: SslConfig | None = None,
          balance: BalanceConfig | None = None, state: ModelState | None = None) -> tuple[ModelState, DualPhaseModel]:
    """Run ``balance.epochs`` epochs of mini-batch Adam; resumes from ``state`` if given."""
    gcn = gcn or GcnConfig()
    ssl = ssl or SslConfig()
    balance = balance or BalanceConfig()
    if len(train_set) == 0:
        raise ValueError("empty training split")
    model = DualPhaseModel(graphs, gcn, ssl, balance)
    if state is None:
        state = ModelState.initialize(train_set.num_users, train_set.num_items, gcn.dim, balance.seed)
    rng = np.random.default_rng(np.random.SeedSequence([balance.seed, _STREAM, 1]))
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    for _ in range(balance.epochs):
        u, i, j = sample_triplets(train_set, balance.negatives_per_positive, rng)
        order = rng.permutation(len(u))
        total = 0.0
        for start in range(0, len(order), balance.batch_size):
            b = order[start:start + balance.batch_size]
            nodes = (np.unique(u[b]), np.unique(np.concatenate([i[b], j[b]])))
            loss, _, grads = model.loss_and_grad(state.params, (u[b], i[b], j[b]), rng, nodes)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {state.epoch}")
            adam_step(state, grads, balance)
            total += loss
        state.epoch += 1
        state.loss_history.append(total)
        log.info("epoch %d loss %.6f", state.epoch, total)
    state.rng_state = rng.bit_generator.state
    return state, model


def save_checkpoint(directory, state: ModelState, model: DualPhaseModel) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in PARAM_NAMES:
        np.save(directory / f"{name}.npy", state.params[name])
        np.save(directory / f"adam_m_{name}.npy", state.m[name])
        np.save(directory / f"adam_v_{name}.npy", state.v[name])
    fw = model.forward(state.params)
    np.save(directory / "fused_user.npy", fw.user)
    np.save(directory / "fused_item.npy", fw.item)
    write_embedding_table(directory / "fused.prec", fw.user, fw.item, "fused")
    meta = {
        "config": {"gcn": asdict(model.gcn), "ssl": asdict(model.ssl), "balance": asdict(model.balance)},
        "epoch": state.epoch,
        "step": state.step,
        "loss_history": state.loss_history,
        "rng_state": state.rng_state,
    }
    (directory / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[ModelState, dict]:
    directory = Path(directory)
    meta_path = directory / "checkpoint.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no model found in {directory}")
    meta = json.loads(meta_path.read_text())
    params = {n: np.load(directory / f"{n}.npy") for n in PARAM_NAMES}
    m = {n: np.load(directory / f"adam_m_{n}.npy") for n in PARAM_NAMES}
    v = {n: np.load(directory / f"adam_v_{n}.npy") for n in PARAM_NAMES}
    state = ModelState(params, m, v, meta["step"], meta["epoch"], list(meta["loss_history"]), meta["rng_state"])
    return state, meta["config"]


def configs_from_meta(config: dict) -> tuple[GcnConfig, SslConfig, BalanceConfig]:
    return GcnConfig(**config["gcn"]), SslConfig(**config["ssl"]), BalanceConfig(**config["balance"])


def with_preset(balance: BalanceConfig, name: str) -> tuple[BalanceConfig, int]:
    alpha, q = PRESETS[name]
    return replace(balance, alpha=alpha), q
