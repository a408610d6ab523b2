from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from playrec.dataio import SyntheticSpec, generate_synthetic, split_dataset
from playrec.interestgraphs import SslConfig, build_graph_views
from playrec.mrw import WalkConfig, run_walks
from playrec.pipeline import fit_stage
from playrec.propagation import BipartiteGraph, GcnConfig
from playrec.training import (
    PRESETS,
    BalanceConfig,
    DualPhaseModel,
    Graphs,
    ModelState,
    TrainingDiverged,
    balance_loss,
    fuse_embeddings,
    load_checkpoint,
    reweighted_score,
    sample_triplets,
    save_checkpoint,
    train,
    with_preset,
)


def tiny_graphs(seed=0):
    rng = np.random.default_rng(seed)
    users = np.array([0, 0, 1, 1, 2, 3, 3, 4, 4, 2])
    items = np.array([0, 1, 1, 2, 3, 4, 0, 2, 3, 4])
    full = BipartiteGraph(5, 5, users, items)
    strong = BipartiteGraph(5, 5, users[::2], items[::2])
    walk = BipartiteGraph(5, 5, users, items, rng.uniform(0.2, 1.0, len(users)))
    return Graphs(full, strong, walk)


TRIPLETS = (np.array([0, 1, 2, 3, 4, 0]), np.array([0, 1, 3, 4, 2, 1]), np.array([2, 3, 0, 1, 0, 4]))


def finite_difference_check(model, params, triplets, h=1e-4):
    _, _, grads = model.loss_and_grad(params, triplets)
    worst = 0.0
    for name, base in params.items():
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            hi, lo = base.copy(), base.copy()
            hi[idx] += h
            lo[idx] -= h
            num[idx] = (model.loss_and_grad({**params, name: hi}, triplets)[0]
                        - model.loss_and_grad({**params, name: lo}, triplets)[0]) / (2 * h)
        denom = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - grads[name]) / denom))
    return worst


class TestFusion:
    def test_hand_value(self):
        np.testing.assert_allclose(fuse_embeddings([[1.0, 2.0]], [[0.5, 0.0]], 0.6), [[1.1, 1.2]])

    def test_identity_cases(self, rng):
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        np.testing.assert_allclose(fuse_embeddings(a, np.zeros_like(a), 1.0), a)
        np.testing.assert_allclose(fuse_embeddings(a, b, 1e-12), b, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.01, 3), st.integers(0, 1000))
    def test_linearity(self, c, alpha, seed):
        r = np.random.default_rng(seed)
        x, y = r.normal(size=(3, 2)), r.normal(size=(3, 2))
        np.testing.assert_allclose(fuse_embeddings(c * x, c * y, alpha), c * fuse_embeddings(x, y, alpha), atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            fuse_embeddings(np.zeros((2, 3)), np.zeros((2, 2)), 1.0)


class TestReweight:
    def test_zero(self):
        for zeta, k in [(0.3, 1.0), (5.0, 2.0)]:
            assert reweighted_score(0.0, zeta, k)[0] == 0.0

    def test_unit(self):
        assert float(reweighted_score(1.0, 1.0, 1.0)[0]) == pytest.approx(0.73106, abs=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-10, 10), st.floats(0.1, 3))
    def test_small_zeta_limit(self, s, k):
        assert float(reweighted_score(s, 1e-8, k)[0]) == pytest.approx(s * k / 2, abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-8, 8), st.floats(0.1, 3), st.floats(0.1, 3))
    def test_derivative(self, s, zeta, k):
        h = 1e-6
        num = (reweighted_score(s + h, zeta, k)[0] - reweighted_score(s - h, zeta, k)[0]) / (2 * h)
        assert float(reweighted_score(s, zeta, k)[1]) == pytest.approx(float(num), abs=1e-6)


class TestBalanceLoss:
    def test_ln2_when_equal(self):
        # s_ui equal to s~_uj: user (1,0), positive (0.73106/1, 0), negative (1, 0) gives s~ = sigma(1)
        sig = 1 / (1 + math.exp(-1))
        user = np.array([[1.0, 0.0]])
        item = np.array([[sig, 0.0], [1.0, 0.0]])
        loss, *_ = balance_loss(user, item, ([0], [0], [1]), BalanceConfig())
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_gradient(self, rng):
        user, item = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        cfg = BalanceConfig(zeta=1.7, k_scale=0.8)
        _, gu, gi = balance_loss(user, item, TRIPLETS, cfg)
        h = 1e-5
        for table, grad, first in ((user, gu, True), (item, gi, False)):
            num = np.zeros_like(table)
            for idx in np.ndindex(table.shape):
                hi, lo = table.copy(), table.copy()
                hi[idx] += h
                lo[idx] -= h
                a = balance_loss(hi, item, TRIPLETS, cfg)[0] if first else balance_loss(user, hi, TRIPLETS, cfg)[0]
                b = balance_loss(lo, item, TRIPLETS, cfg)[0] if first else balance_loss(user, lo, TRIPLETS, cfg)[0]
                num[idx] = (a - b) / (2 * h)
            assert np.linalg.norm(num - grad) / np.linalg.norm(num) < 1e-6

    def test_detach_changes_gradient(self, rng):
        user, item = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        a = balance_loss(user, item, TRIPLETS, BalanceConfig())
        b = balance_loss(user, item, TRIPLETS, BalanceConfig(detach_reweight=True))
        assert a[0] == b[0] and not np.allclose(a[1], b[1])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 4), st.integers(0, 1000))
    def test_scores_bilinear(self, c, seed):
        r = np.random.default_rng(seed)
        eu, ei = r.normal(size=3), r.normal(size=3)
        assert (c * eu) @ ei == pytest.approx(c * (eu @ ei))
        assert eu @ (c * ei) == pytest.approx(c * (eu @ ei))

    def test_non_finite(self):
        user = np.array([[np.inf, 0.0]])
        with pytest.raises(TrainingDiverged), np.errstate(invalid="ignore"):
            balance_loss(user, np.ones((2, 2)), ([0], [0], [1]), BalanceConfig())


class TestJointGradient:
    @pytest.mark.parametrize("balance,ssl,gcn", [
        (BalanceConfig(alpha=0.7, zeta=1.3, k_scale=1.1, ssl_weight=0.3), SslConfig(tau=0.5), GcnConfig(2, 4)),
        (BalanceConfig(alpha=1.6, share_base=True), SslConfig(fusion="mean"), GcnConfig(2, 4, "layer_mean")),
        (BalanceConfig(alpha=0.4, detach_reweight=False, ssl_weight=1.0), SslConfig(lam=0.3), GcnConfig(3, 3)),
    ])
    def test_finite_differences(self, balance, ssl, gcn):
        model = DualPhaseModel(tiny_graphs(), gcn, ssl, balance)
        r = np.random.default_rng(1)
        params = {k: r.normal(scale=0.7, size=v.shape)
                  for k, v in ModelState.initialize(5, 5, gcn.dim, 0).params.items()}
        assert finite_difference_check(model, params, TRIPLETS) < 1e-4

    def test_share_base_ignores_mrw_tables(self):
        model = DualPhaseModel(tiny_graphs(), GcnConfig(2, 3), SslConfig(), BalanceConfig(share_base=True))
        st_ = ModelState.initialize(5, 5, 3, 0)
        _, _, grads = model.loss_and_grad(st_.params, TRIPLETS)
        assert not grads["mrw_user"].any()


@pytest.fixture(scope="module")
def tiny_problem():
    spec = SyntheticSpec(min_interactions=5, max_interactions=12)
    ds = generate_synthetic(50, 30, 4, spec, seed=2)
    tr, _, te = split_dataset(ds, seed=2)
    fit = fit_stage(tr)
    views = build_graph_views(tr, fit.assignment)
    walks = run_walks(tr, fit.assignment, WalkConfig(Q=1))
    return tr, te, Graphs.from_views(views, walks.graph)


GCN = GcnConfig(2, 16)


class TestTrain:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_decreases(self, tiny_problem, seed):
        tr, _, graphs = tiny_problem
        state, _ = train(tr, graphs, GCN, SslConfig(), BalanceConfig(epochs=20, seed=seed))
        h = state.loss_history
        assert len(h) == 20 and all(b < a for a, b in zip(h[:5], h[1:6]))
        assert all(np.isfinite(p).all() for p in state.params.values())

    def test_zero_learning_rate(self, tiny_problem):
        tr, _, graphs = tiny_problem
        init = ModelState.initialize(tr.num_users, tr.num_items, GCN.dim, 0)
        before = {k: v.copy() for k, v in init.params.items()}
        cfg = BalanceConfig(epochs=3, learning_rate=0.0)
        state, model = train(tr, graphs, GCN, SslConfig(), cfg, init)
        for k in before:
            np.testing.assert_array_equal(state.params[k], before[k])
        trip = sample_triplets(tr, 1, np.random.default_rng(0))
        fixed = DualPhaseModel(graphs, GCN, SslConfig(), cfg)
        assert fixed.loss_and_grad(before, trip)[0] == model.loss_and_grad(state.params, trip)[0]

    def test_deterministic(self, tiny_problem):
        tr, _, graphs = tiny_problem
        cfg = BalanceConfig(epochs=3, learning_rate=0.01, seed=4)
        a, _ = train(tr, graphs, GCN, SslConfig(), cfg)
        b, _ = train(tr, graphs, GCN, SslConfig(), cfg)
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()
        assert a.loss_history == b.loss_history

    def test_empty_split(self, tiny_problem):
        tr, _, graphs = tiny_problem
        with pytest.raises(ValueError, match="empty"):
            train(tr.with_rows(np.zeros(0, dtype=np.int64)), graphs, GCN)

    def test_divergence_aborts(self, tiny_problem):
        tr, _, graphs = tiny_problem
        state = ModelState.initialize(tr.num_users, tr.num_items, GCN.dim, 0)
        state.params["iie_user"][:] = np.nan
        with pytest.raises(TrainingDiverged):
            train(tr, graphs, GCN, SslConfig(), BalanceConfig(epochs=1), state)

    def test_checkpoint_round_trip(self, tmp_path, tiny_problem):
        tr, _, graphs = tiny_problem
        cfg = BalanceConfig(epochs=2, learning_rate=0.01)
        state, model = train(tr, graphs, GCN, SslConfig(), cfg)
        save_checkpoint(tmp_path / "ck", state, model)
        loaded, meta = load_checkpoint(tmp_path / "ck")
        assert meta["balance"]["epochs"] == 2 and loaded.epoch == 2
        assert loaded.loss_history == state.loss_history
        assert model.scores(loaded.params).tobytes() == model.scores(state.params).tobytes()
        for k in state.m:
            assert loaded.m[k].tobytes() == state.m[k].tobytes()

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_problem):
        tr, _, graphs = tiny_problem
        cfg = BalanceConfig(epochs=4, learning_rate=0.01, seed=1)
        full, _ = train(tr, graphs, GCN, SslConfig(), cfg)
        half, model = train(tr, graphs, GCN, SslConfig(), replace(cfg, epochs=2))
        save_checkpoint(tmp_path / "ck", half, model)
        loaded, _ = load_checkpoint(tmp_path / "ck")
        resumed, _ = train(tr, graphs, GCN, SslConfig(), replace(cfg, epochs=2), loaded)
        assert resumed.loss_history == full.loss_history
        for k in full.params:
            assert resumed.params[k].tobytes() == full.params[k].tobytes()

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="no model found"):
            load_checkpoint(tmp_path)


def test_negatives_are_unobserved(tiny_problem):
    tr = tiny_problem[0]
    u, i, j = sample_triplets(tr, 3, np.random.default_rng(0))
    assert len(u) == 3 * len(tr)
    assert all(jj not in tr.item_sets[uu] for uu, jj in zip(u.tolist(), j.tolist()))


def test_presets():
    assert PRESETS == {"accuracy": (1.6, 4), "diversity": (0.4, 1), "trade-off": (0.6, 1)}
    cfg, q = with_preset(BalanceConfig(), "trade-off")
    assert (cfg.alpha, q) == (0.6, 1)


@pytest.mark.parametrize("kwargs", [{"alpha": 0}, {"learning_rate": -1}, {"batch_size": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        BalanceConfig(**kwargs)
