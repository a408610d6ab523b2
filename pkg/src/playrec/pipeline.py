"""In-memory wiring of the stages: fit, walk, train, evaluate."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .betamix import EmConfig, InterestAssignment, UserFit, classify_interactions, fit_users
from .dataio import Dataset
from .evalmetrics import DEFAULT_KS, MetricsReport, evaluate
from .interestgraphs import GraphViews, SslConfig, build_graph_views
from .mrw import WalkConfig, WalkResult, run_walks
from .propagation import GcnConfig
from .training import BalanceConfig, DualPhaseModel, Graphs, ModelState, train


@dataclass
class FitStage:
    fits: dict[int, UserFit]
    assignment: InterestAssignment


def fit_stage(train_set: Dataset, config: EmConfig | None = None, min_interactions: int = 1,
              threads: int = 1) -> FitStage:
    fits = fit_users(train_set, config, min_interactions=min_interactions, threads=threads)
    models = {u: f.model for u, f in fits.items()}
    return FitStage(fits, classify_interactions(train_set, models))


def train_stage(train_set: Dataset, views: GraphViews, walks: WalkResult, gcn: GcnConfig,
                ssl: SslConfig, balance: BalanceConfig) -> tuple[ModelState, DualPhaseModel]:
    return train(train_set, Graphs.from_views(views, walks.graph), gcn, ssl, balance)


@dataclass
class Experiment:
    """Train/test split plus the stages that do not depend on (alpha, Q)."""

    train_set: Dataset
    test_set: Dataset
    fit: FitStage
    views: GraphViews
    gcn: GcnConfig
    ssl: SslConfig
    balance: BalanceConfig
    walk: WalkConfig
    _walks: dict[int, WalkResult] = None

    @classmethod
    def prepare(cls, train_set: Dataset, test_set: Dataset, em: EmConfig | None = None, gcn: GcnConfig | None = None,
                ssl: SslConfig | None = None, balance: BalanceConfig | None = None,
                walk: WalkConfig | None = None, threads: int = 1) -> Experiment:
        fit = fit_stage(train_set, em, threads=threads)
        views = build_graph_views(train_set, fit.assignment)
        return cls(train_set, test_set, fit, views, gcn or GcnConfig(), ssl or SslConfig(),
                   balance or BalanceConfig(), walk or WalkConfig(), {})

    def walks(self, q: int) -> WalkResult:
        if q not in self._walks:
            self._walks[q] = run_walks(self.train_set, self.fit.assignment, replace(self.walk, Q=q))
        return self._walks[q]

    def run(self, alpha: float, q: int, ks=DEFAULT_KS) -> MetricsReport:
        balance = replace(self.balance, alpha=alpha)
        state, model = train_stage(self.train_set, self.views, self.walks(q), self.gcn, self.ssl, balance)
        fw = model.forward(state.params)
        return evaluate(fw.user, fw.item, self.train_set, self.test_set, ks)
