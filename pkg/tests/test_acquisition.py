import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import addtree.acquisition as acq
from addtree.acquisition import (
    UcbConfig,
    beta,
    component_ucb,
    joint_ucb,
    naive_propose,
    optimize_vertex,
    propose,
)
from addtree.gp import Dataset, FitConfig, fit, prior_model
from addtree.kernels import build_add_tree
from addtree.space import dimensions, parse_spec, sample_uniform

from _trees import random_kernel, random_points, random_spec


def _fitted(spec, rng, n=12, fn=None):
    X = random_points(spec, rng, n)
    if fn is None:
        y = rng.normal(size=n)
    else:
        y = np.array([fn(p) for p in X])
    return fit(Dataset(spec, X, y), FitConfig(n_restarts=2, seed=0))


def _quad(p):
    return -sum(float(np.sum((np.asarray(x) - 0.3) ** 2)) for x in p.values.values())


class TestBeta:
    def test_values(self):
        assert beta(1, 1) == pytest.approx(0.13863, abs=1e-5)
        assert beta(2, 2) == pytest.approx(0.55452, abs=1e-5)

    @pytest.mark.parametrize("t,d", [(0, 1), (1, 0)])
    def test_rejects(self, t, d):
        with pytest.raises(ValueError):
            beta(t, d)

    @given(st.integers(1, 10_000), st.integers(1, 20))
    def test_monotone(self, t, d):
        assert beta(t + 1, d) > beta(t, d)
        assert beta(t, d + 1) > beta(t, d)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            UcbConfig(beta_coeff=0.0)
        with pytest.raises(ValueError):
            UcbConfig(restarts=0)


class TestOptimizeVertex:
    def test_prior_value_exact(self, jenatton, rng):
        k = random_kernel(jenatton, rng)
        gp = prior_model(k)
        for v in jenatton.block_vertices:
            x, u = optimize_vertex(gp, v, 3)
            b = beta(3, 1)
            assert u == pytest.approx(np.sqrt(b) * np.sqrt(k.variance_of(v)), rel=1e-12)
            assert np.all(x >= jenatton.vertices[v].block.lows)

    def test_grid_oracle_one_dim(self, jenatton, rng):
        for _ in range(3):
            gp = _fitted(jenatton, rng, 16)
            for v in jenatton.block_vertices:
                b = jenatton.vertices[v].block
                grid = np.linspace(b.lows[0], b.highs[0], 200)[:, None]
                sb = np.sqrt(beta(5, 1))
                m, s2 = gp.component_moments_many(v, grid)
                oracle = float(np.max(m + sb * np.sqrt(s2)))
                _, u = optimize_vertex(gp, v, 5)
                assert u >= oracle - 1e-3

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_bounds_and_probe_dominance(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng)
        gp = _fitted(spec, rng, int(rng.integers(2, 15)))
        t = int(rng.integers(1, 50))
        for v in spec.block_vertices:
            blk = spec.vertices[v].block
            x, u = optimize_vertex(gp, v, t)
            assert np.all(x >= blk.lows) and np.all(x <= blk.highs)
            probes = rng.uniform(blk.lows, blk.highs, size=(100, blk.dim))
            b = beta(t, blk.dim)
            m, s2 = gp.component_moments_many(v, probes)
            assert u >= np.max(m + np.sqrt(b) * np.sqrt(s2)) - 1e-6

    def test_deterministic(self, example, rng):
        gp = _fitted(example, rng)
        a = optimize_vertex(gp, 2, 4)
        b = optimize_vertex(gp, 2, 4)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]


class TestPropose:
    def test_scores_match_component_ucb(self, jenatton, rng):
        gp = _fitted(jenatton, rng, 15, _quad)
        prop = propose(gp, 7)
        i = prop.path
        for v, u in prop.scores.items():
            b = beta(7, jenatton.vertices[v].dim)
            x = prop.point.values[v] if jenatton.on_path(i, v) else None
            if x is not None:
                assert u == pytest.approx(component_ucb(gp, v, x, b), abs=1e-10)
        assert prop.value == pytest.approx(
            sum(prop.scores[v] for v in jenatton.paths[i] if v in prop.scores), abs=1e-12)

    def test_chosen_path_maximizes(self, rng):
        for _ in range(5):
            spec = random_spec(rng)
            prop = propose(_fitted(spec, rng), 3)
            assert prop.path == int(np.argmax(prop.path_scores))
            assert np.all(prop.path_scores[: prop.path] < prop.value)
            spec.validate(prop.point)

    def test_symmetric_prior_takes_first_path(self, jenatton):
        gp = prior_model(build_add_tree(jenatton))
        prop = propose(gp, 1)
        assert np.ptp(prop.path_scores) == 0.0
        assert prop.path == 0

    def test_single_vertex_matches_naive(self, rng):
        spec = parse_spec({"continuous": [{"name": "a", "low": 0, "high": 1}]})
        gp = _fitted(spec, rng, 6, lambda p: float(np.sin(6 * p.values[0][0])))
        a = propose(gp, 4)
        b = naive_propose(gp, 4)
        np.testing.assert_allclose(a.point.values[0], b.point.values[0], atol=1e-6)

    def test_vertex_call_count(self, jenatton, rng, monkeypatch):
        calls = []
        real = acq.optimize_vertex

        def counting(gp, v, *args, **kwargs):
            calls.append(v)
            return real(gp, v, *args, **kwargs)

        monkeypatch.setattr(acq, "optimize_vertex", counting)
        gp = _fitted(jenatton, rng)
        prop = propose(gp, 2)
        assert sorted(calls) == [1, 2, 3, 4, 5, 6]
        assert prop.n_optimizations == 6

    def test_threads_are_bit_identical(self, jenatton, rng):
        gp = _fitted(jenatton, rng, 15, _quad)
        a = propose(gp, 5, UcbConfig(n_jobs=1))
        b = propose(gp, 5, UcbConfig(n_jobs=3))
        assert a.point == b.point
        np.testing.assert_array_equal(a.path_scores, b.path_scores)

    def test_interactions_rejected(self, example, rng):
        k = build_add_tree(example, interactions=[(0, 1)])
        with pytest.raises(ValueError):
            propose(prior_model(k), 1)


class TestNaive:
    def test_dominance(self, rng):
        for _ in range(5):
            spec = random_spec(rng, max_dim=2, max_depth=3)
            gp = _fitted(spec, rng, 10, _quad)
            t = 6
            add = propose(gp, t)
            naive = naive_propose(gp, t)
            d = dimensions(spec)[1][add.path]
            if d == 0:
                continue
            assert naive.value >= joint_ucb(gp, add.point, beta(t, d)) - 1e-6

    def test_path_count(self, jenatton, rng, monkeypatch):
        calls = []
        real = acq.optimize_path

        def counting(gp, i, *args, **kwargs):
            calls.append(i)
            return real(gp, i, *args, **kwargs)

        monkeypatch.setattr(acq, "optimize_path", counting)
        naive_propose(_fitted(jenatton, rng), 2)
        assert calls == [0, 1, 2, 3]

    def test_joint_ucb_prior(self, jenatton, rng):
        k = random_kernel(jenatton, rng)
        p = sample_uniform(jenatton, rng)
        b = beta(2, 2)
        expected = np.sqrt(b) * np.sqrt(k.prior_variance(jenatton.path_index(p)))
        assert joint_ucb(prior_model(k), p, b) == pytest.approx(expected)

    def test_handles_interactions(self, example, rng):
        X = random_points(example, rng, 10)
        k = build_add_tree(example, interactions=[(0, 1), (0, 2)])
        gp = fit(Dataset(example, X, [_quad(p) for p in X]), FitConfig(n_restarts=1), kernel=k)
        prop = naive_propose(gp, 3)
        example.validate(prop.point)
        assert prop.value == pytest.approx(
            joint_ucb(gp, prop.point, beta(3, dimensions(example)[1][prop.path])), rel=1e-9)
