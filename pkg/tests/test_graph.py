"""Posterior tests: probability normalization, lag coupling, sampling,
prior and entropy closed forms vs Monte Carlo."""

import numpy as np
import pytest

from causalmarket import autodiff as ad
from causalmarket import graph
from causalmarket.errors import ConfigError, DataError


def make_store(D=3, L=2, seed=0, dtype=np.float64, depth=1):
    store = ad.ParamStore(dtype=dtype)
    graph.init_params(store, np.random.default_rng(seed), D, L, transform_depth=depth)
    return store


class TestEdgeProbabilities:
    def test_equal_likelihoods_give_half(self):
        store = make_store()
        x = np.random.default_rng(1).normal(size=(2, 3, 3))
        store.set_value("graph.u", x)
        store.set_value("graph.v", x.copy())
        sigma = graph.edge_probabilities(ad.ParamView(store), lag_dependent=False)
        np.testing.assert_allclose(sigma.value, 0.5, atol=1e-12)

    def test_two_thirds_case(self):
        # exp(ln 2) / (exp(ln 2) + exp(0)) = 2/3
        store = make_store()
        store.set_value("graph.u", np.full((2, 3, 3), np.log(2.0)))
        store.set_value("graph.v", np.zeros((2, 3, 3)))
        sigma = graph.edge_probabilities(ad.ParamView(store), lag_dependent=False)
        np.testing.assert_allclose(sigma.value, 2.0 / 3.0, rtol=1e-12)

    def test_lag_independent_ignores_transform_params(self):
        store = make_store()
        view = ad.ParamView(store)
        before = graph.edge_probabilities(view, lag_dependent=False).value
        store.set_value("graph.hu.w0", store.value("graph.hu.w0") + 5.0)
        after = graph.edge_probabilities(ad.ParamView(store), lag_dependent=False).value
        np.testing.assert_array_equal(before, after)

    def test_lag_one_passes_through_untransformed(self):
        store = make_store()
        dep = graph.edge_probabilities(ad.ParamView(store), lag_dependent=True).value
        indep = graph.edge_probabilities(ad.ParamView(store), lag_dependent=False).value
        np.testing.assert_allclose(dep[0], indep[0], rtol=1e-12)
        assert not np.allclose(dep[1], indep[1])  # lag 2 went through the coupling

    def test_existence_only_uses_sigmoid_of_u(self):
        store = make_store()
        sigma = graph.edge_probabilities(ad.ParamView(store), lag_dependent=False, existence_only=True)
        u = store.value("graph.u")
        np.testing.assert_allclose(sigma.value, 1.0 / (1.0 + np.exp(-u)), rtol=1e-10)

    def test_existence_only_ignores_v(self):
        store = make_store()
        a = graph.edge_probabilities(ad.ParamView(store), existence_only=True).value
        store.set_value("graph.v", store.value("graph.v") + 3.0)
        b = graph.edge_probabilities(ad.ParamView(store), existence_only=True).value
        np.testing.assert_array_equal(a, b)

    def test_recomputation_is_deterministic(self):
        store = make_store(D=4, L=3)
        a = graph.edge_probabilities(ad.ParamView(store)).value
        b = graph.edge_probabilities(ad.ParamView(store)).value
        np.testing.assert_array_equal(a, b)

    def test_values_clamped_inside_open_interval(self):
        store = make_store()
        store.set_value("graph.u", np.full((2, 3, 3), 500.0))
        store.set_value("graph.v", np.full((2, 3, 3), -500.0))
        sigma = graph.edge_probabilities(ad.ParamView(store), lag_dependent=False).value
        assert np.all(sigma >= 1e-13) and np.all(sigma <= 1.0 - 1e-13)
        assert np.all(sigma > 0.0) and np.all(sigma < 1.0)

    def test_gradients_flow_to_u_v_and_transform(self):
        store = make_store(D=2, L=3, depth=2)
        tape = ad.Tape()
        view = ad.ParamView(store, tape)
        sigma = graph.edge_probabilities(view, lag_dependent=True, transform_depth=2)
        grads = ad.backward(tape, ad.reduce_sum(sigma))
        for name in ("graph.u", "graph.v", "graph.hu.w0", "graph.hv.w0"):
            assert np.any(grads.get(view(name)) != 0.0), name


class TestSampleGraph:
    def sigma_node(self, values):
        return ad.constant(np.asarray(values, dtype=np.float64))

    def test_fixed_seed_reproducible(self):
        sigma = self.sigma_node(np.full((2, 3, 3), 0.4))
        a = graph.sample_graph(sigma, rng=np.random.default_rng(9)).hard_values
        b = graph.sample_graph(sigma, rng=np.random.default_rng(9)).hard_values
        np.testing.assert_array_equal(a, b)

    def test_hard_and_relaxed_agree_under_rounding(self):
        sigma = self.sigma_node(np.random.default_rng(2).uniform(0.05, 0.95, size=(2, 4, 4)))
        s = graph.sample_graph(sigma, rng=np.random.default_rng(3))
        np.testing.assert_array_equal(s.hard_values, (s.relaxed.value >= 0.5).astype(float))
        assert np.all((s.relaxed.value > 0) & (s.relaxed.value < 1))
        assert set(np.unique(s.hard_values)) <= {0.0, 1.0}

    def test_degenerate_sigma_one_always_on(self):
        sigma = self.sigma_node(np.ones((1, 2, 2)))
        rng = np.random.default_rng(4)
        for _ in range(20):
            assert np.all(graph.sample_graph(sigma, rng=rng).hard_values == 1.0)

    def test_half_probability_frequency_within_three_se(self):
        rng = np.random.default_rng(5)
        hard = graph.sample_hard_many(np.array([[[0.5]]]), 100_000, rng)
        freq = hard.mean()
        assert abs(freq - 0.5) < 0.005  # 3 * sqrt(0.25 / 1e5) ~ 0.0047

    def test_edge_frequencies_match_sigma(self):
        rng = np.random.default_rng(6)
        sigma = np.random.default_rng(7).uniform(0.1, 0.9, size=(1, 3, 3))
        hard = graph.sample_hard_many(sigma, 100_000, rng)
        freq = hard.mean(axis=0)
        se = np.sqrt(sigma * (1 - sigma) / 100_000)
        assert np.all(np.abs(freq - sigma) <= 3 * se + 1e-9)

    def test_missing_rng_and_noise_rejected(self):
        with pytest.raises(ConfigError):
            graph.sample_graph(self.sigma_node(np.full((1, 1, 1), 0.5)))


class TestLogPrior:
    def test_binary_graph_counts_edges(self):
        g = np.zeros((2, 3, 3))
        g[0, 1, 2] = g[1, 0, 0] = g[1, 2, 1] = 1.0
        lp = graph.log_prior(ad.constant(g), lambda_sparse=1.0)
        assert lp.value == pytest.approx(-3.0)

    def test_matching_domain_graph_no_penalty(self):
        g = np.ones((1, 2, 2))
        lp = graph.log_prior(ad.constant(g), lambda_sparse=0.0, lambda_domain=2.0, domain_graph=g.copy())
        assert lp.value == pytest.approx(0.0)

    def test_empty_graph_zero(self):
        g = np.zeros((2, 2, 2))
        lp = graph.log_prior(ad.constant(g), lambda_sparse=5.0, lambda_domain=0.0)
        assert lp.value == pytest.approx(0.0)

    def test_adding_edge_strictly_decreases(self):
        rng = np.random.default_rng(8)
        g = (rng.random((2, 4, 4)) < 0.3).astype(float)
        g[1, 2, 3] = 0.0
        base = graph.log_prior(ad.constant(g), lambda_sparse=0.7).value
        g2 = g.copy()
        g2[1, 2, 3] = 1.0
        denser = graph.log_prior(ad.constant(g2), lambda_sparse=0.7).value
        assert denser < base

    def test_domain_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            graph.log_prior(ad.constant(np.zeros((1, 2, 2))), 1.0, 1.0, np.zeros((2, 2, 2)))

    def test_expected_value_matches_monte_carlo(self):
        # E[log p(G)] for binary G: -ls * sum(sigma) when ld = 0
        rng = np.random.default_rng(9)
        sigma = rng.uniform(0.1, 0.9, size=(2, 3, 3))
        hard = graph.sample_hard_many(sigma, 100_000, rng)
        ls = 0.8
        vals = -ls * hard.reshape(100_000, -1).sum(axis=1)
        closed = -ls * sigma.sum()
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - closed) <= 3 * se


class TestEntropy:
    def test_single_edge_half_is_ln2(self):
        h = graph.posterior_entropy(ad.constant(np.array([[[0.5]]])))
        assert h.value == pytest.approx(np.log(2.0), abs=1e-12)

    def test_additivity_over_edges(self):
        h = graph.posterior_entropy(ad.constant(np.full((1, 2, 2), 0.5)))
        assert h.value == pytest.approx(4 * np.log(2.0), abs=1e-12)

    def test_degenerate_edges_contribute_nothing(self):
        eps = 1e-13
        h = graph.posterior_entropy(ad.constant(np.array([[[eps, 1 - eps]]])))
        assert h.value == pytest.approx(0.0, abs=1e-10)

    def test_matches_negative_log_q_monte_carlo(self):
        rng = np.random.default_rng(10)
        sigma = rng.uniform(0.15, 0.85, size=(2, 2, 2))
        hard = graph.sample_hard_many(sigma, 100_000, rng)
        logq = hard * np.log(sigma) + (1 - hard) * np.log1p(-sigma)
        neg_logq = -logq.reshape(100_000, -1).sum(axis=1)
        closed = graph.posterior_entropy(ad.constant(sigma)).value
        se = neg_logq.std(ddof=1) / np.sqrt(len(neg_logq))
        assert abs(neg_logq.mean() - closed) <= 3 * se


class TestCausalStrength:
    def test_unit_weights_return_graph(self):
        sigma = np.random.default_rng(11).uniform(size=(2, 3, 3))
        per_lag, avg = graph.causal_strength(sigma, np.ones_like(sigma))
        np.testing.assert_array_equal(per_lag, sigma)
        np.testing.assert_allclose(avg, sigma.mean(axis=0), rtol=1e-12)

    def test_zero_graph_zero_strength(self):
        z = np.zeros((2, 2, 2))
        _, avg = graph.causal_strength(z, np.random.default_rng(0).normal(size=(2, 2, 2)))
        np.testing.assert_array_equal(avg, np.zeros((2, 2)))

    def test_hand_computed_average(self):
        g = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]])
        w = np.array([[[2.0, 3.0], [4.0, 5.0]], [[6.0, 7.0], [8.0, 9.0]]])
        _, avg = graph.causal_strength(g, w)
        np.testing.assert_allclose(avg, [[1.0, 3.5], [4.0, 2.5]])


class TestSerialization:
    def test_export_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        sigma = rng.uniform(size=(2, 3, 3))
        weight = rng.normal(size=(2, 3, 3))
        sample = (sigma > 0.5).astype(float)
        path = tmp_path / "graph.npz"
        graph.save_graph_export(path, sigma, weight, sample, ["A", "B", "C"])
        loaded = graph.load_graph_export(path)
        np.testing.assert_array_equal(loaded["sigma"], sigma)
        assert loaded["symbols"] == ["A", "B", "C"]
        np.testing.assert_allclose(loaded["strength_lag_avg"], (sigma * weight).mean(axis=0))

    def test_domain_prior_file(self, tmp_path):
        path = tmp_path / "prior.csv"
        path.write_text("lag,from_symbol,to_symbol,value\n1,A,B,1\n2,B,C,1\n")
        gp = graph.load_domain_prior(path, ["A", "B", "C"], n_lags=2)
        assert gp[0, 0, 1] == 1.0
        assert gp[1, 1, 2] == 1.0
        assert gp.sum() == 2.0

    def test_domain_prior_unknown_symbol_rejected(self, tmp_path):
        path = tmp_path / "prior.csv"
        path.write_text("lag,from_symbol,to_symbol,value\n1,A,ZZZ,1\n")
        with pytest.raises(DataError, match="ZZZ"):
            graph.load_domain_prior(path, ["A", "B"], n_lags=1)

    def test_domain_prior_bad_lag_rejected(self, tmp_path):
        path = tmp_path / "prior.csv"
        path.write_text("lag,from_symbol,to_symbol,value\n3,A,B,1\n")
        with pytest.raises(DataError, match="lag 3"):
            graph.load_domain_prior(path, ["A", "B"], n_lags=2)
