from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from playrec.propagation import (
    BipartiteGraph,
    GcnConfig,
    init_embeddings,
    normalize_adjacency,
    propagate,
    propagate_backward,
    read_embedding_table,
    write_edges_tsv,
    write_embedding_table,
)


def random_graph(rng, n_users=6, n_items=5, density=0.5, weighted=True):
    mask = rng.random((n_users, n_items)) < density
    u, i = np.nonzero(mask)
    w = rng.uniform(0.1, 1.0, len(u)) if weighted else None
    return BipartiteGraph(n_users, n_items, u, i, w)


graphs = st.integers(0, 10_000).map(lambda s: (random_graph(np.random.default_rng(s)), np.random.default_rng(s + 1)))
configs = st.sampled_from([GcnConfig(1, 3), GcnConfig(2, 3), GcnConfig(3, 3, "layer_mean"), GcnConfig(2, 3, "layer_mean")])


class TestGraph:
    def test_single_edge_coefficient(self):
        g = BipartiteGraph(1, 1, [0], [0], [0.5])
        assert normalize_adjacency(g)[0, 0] == pytest.approx(0.5)

    def test_star_coefficients(self):
        g = BipartiteGraph(1, 4, [0] * 4, [0, 1, 2, 3])
        np.testing.assert_allclose(g.coefficients, 0.5)

    def test_isolated_node(self):
        g = BipartiteGraph(2, 2, [0], [0])
        out = propagate(g, np.ones((2, 3)), np.ones((2, 3)), GcnConfig(2, 3))
        np.testing.assert_array_equal(out.user[1], 0.0)
        np.testing.assert_array_equal(out.item[1], 0.0)

    def test_views_are_transposes(self, rng):
        g = random_graph(rng)
        assert (g.user_adjacency.T != g.item_adjacency).nnz == 0
        np.testing.assert_array_equal(g.user_degree, np.diff(g.user_adjacency.indptr))
        np.testing.assert_array_equal(g.item_degree, np.diff(g.item_adjacency.indptr))

    @pytest.mark.parametrize("weights", [[0.0], [-1.0], [np.nan]])
    def test_bad_weights(self, weights):
        with pytest.raises(ValueError):
            BipartiteGraph(1, 1, [0], [0], weights)

    def test_duplicate_edge(self):
        with pytest.raises(ValueError, match="duplicate"):
            BipartiteGraph(2, 2, [0, 0], [1, 1])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            BipartiteGraph(1, 1, [0], [3])


class TestPropagate:
    def test_single_term(self):
        g = BipartiteGraph(1, 1, [0], [0])
        out = propagate(g, np.zeros((1, 2)), np.array([[1.0, 0.0]]), GcnConfig(1, 2))
        np.testing.assert_allclose(out.user, [[1.0, 0.0]])

    def test_zero_in_zero_out(self, rng):
        g = random_graph(rng)
        out = propagate(g, np.zeros((6, 4)), np.zeros((5, 4)), GcnConfig(2, 4))
        assert not out.user.any() and not out.item.any()

    def test_dimension_mismatch(self, rng):
        g = random_graph(rng)
        with pytest.raises(ValueError):
            propagate(g, np.zeros((6, 4)), np.zeros((5, 3)))
        with pytest.raises(ValueError):
            propagate(g, np.zeros((4, 4)), np.zeros((5, 4)))

    def test_layer_mean(self, rng):
        g = random_graph(rng)
        u, i = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        last = propagate(g, u, i, GcnConfig(2, 3))
        mean = propagate(g, u, i, GcnConfig(2, 3, "layer_mean"))
        np.testing.assert_allclose(mean.user, sum(last.user_layers) / 3)

    @settings(max_examples=40, deadline=None)
    @given(graphs, configs, st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, gr, cfg, a, b):
        g, rng = gr
        x = (rng.normal(size=(6, 3)), rng.normal(size=(5, 3)))
        y = (rng.normal(size=(6, 3)), rng.normal(size=(5, 3)))
        lhs = propagate(g, a * x[0] + b * y[0], a * x[1] + b * y[1], cfg)
        px, py = propagate(g, *x, cfg), propagate(g, *y, cfg)
        np.testing.assert_allclose(lhs.user, a * px.user + b * py.user, atol=1e-10)
        np.testing.assert_allclose(lhs.item, a * px.item + b * py.item, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(graphs, configs)
    def test_bipartite_symmetry(self, gr, cfg):
        g, rng = gr
        u, i = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        a = propagate(g, u, i, cfg)
        b = propagate(g.transpose(), i, u, cfg)
        np.testing.assert_allclose(a.user, b.item, atol=1e-12)
        np.testing.assert_allclose(a.item, b.user, atol=1e-12)


class TestBackward:
    @settings(max_examples=40, deadline=None)
    @given(graphs, configs)
    def test_adjoint(self, gr, cfg):
        g, rng = gr
        x = (rng.normal(size=(6, 3)), rng.normal(size=(5, 3)))
        y = (rng.normal(size=(6, 3)), rng.normal(size=(5, 3)))
        fx = propagate(g, *x, cfg)
        by = propagate_backward(g, *y, cfg)
        lhs = np.sum(fx.user * y[0]) + np.sum(fx.item * y[1])
        rhs = np.sum(x[0] * by[0]) + np.sum(x[1] * by[1])
        assert lhs == pytest.approx(rhs, abs=1e-8)

    def test_zero_upstream(self, rng):
        g = random_graph(rng)
        gu, gi = propagate_backward(g, np.zeros((6, 2)), np.zeros((5, 2)))
        assert not gu.any() and not gi.any()

    def test_single_edge_scaled_by_coefficient(self):
        g = BipartiteGraph(1, 1, [0], [0], [0.3])
        gu, gi = propagate_backward(g, np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]), GcnConfig(1, 2))
        np.testing.assert_allclose(gi, [[0.3, 0.6]])
        np.testing.assert_allclose(gu, 0.0)

    @pytest.mark.parametrize("cfg", [GcnConfig(2, 3), GcnConfig(2, 3, "layer_mean")])
    def test_finite_differences(self, rng, cfg):
        g = random_graph(rng)
        u, i = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))

        def f(u_, i_):
            p = propagate(g, u_, i_, cfg)
            return np.sum(p.user ** 2) + np.sum(p.item ** 2)

        p = propagate(g, u, i, cfg)
        gu, gi = propagate_backward(g, 2 * p.user, 2 * p.item, cfg)
        h = 1e-4
        for base, grad, is_user in ((u, gu, True), (i, gi, False)):
            num = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                plus, minus = base.copy(), base.copy()
                plus[idx] += h
                minus[idx] -= h
                fp = f(plus, i) if is_user else f(u, plus)
                fm = f(minus, i) if is_user else f(u, minus)
                num[idx] = (fp - fm) / (2 * h)
            rel = np.linalg.norm(num - grad) / max(np.linalg.norm(num), 1e-12)
            assert rel < 1e-4


class TestPersistence:
    def test_table_round_trip(self, tmp_path, rng):
        u, i = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
        sidecar = write_embedding_table(tmp_path / "t.prec", u, i, "full")
        assert json.loads(sidecar.read_text()) == {"dim": 3, "num_users": 4, "num_items": 6, "view": "full"}
        u2, i2, _ = read_embedding_table(tmp_path / "t.prec")
        np.testing.assert_allclose(u2, u, atol=1e-6)
        np.testing.assert_allclose(i2, i, atol=1e-6)

    def test_edges_tsv(self, tmp_path):
        g = BipartiteGraph(2, 2, [0, 1], [1, 0], [0.5, 1.0])
        write_edges_tsv(tmp_path / "e.tsv", g, "strong", ["a", "b"], ["x", "y"])
        assert (tmp_path / "e.tsv").read_text().splitlines() == ["a\ty\t0.5\tstrong", "b\tx\t1.0\tstrong"]


def test_init_scale():
    e = init_embeddings(2000, 64, np.random.default_rng(0))
    assert e.std() == pytest.approx(0.1 / 8, rel=0.05)


@pytest.mark.parametrize("kwargs", [{"num_layers": 0}, {"dim": 0}, {"final_embedding": "concat"}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GcnConfig(**kwargs)
