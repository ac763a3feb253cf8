import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from addtree.gp import (
    Dataset,
    FitConfig,
    FittedGP,
    NotPSDError,
    _standardize,
    active_set,
    component_posterior,
    fit,
    log_marginal_likelihood,
    posterior,
    prior_model,
)
from addtree.kernels import build_add_tree, gram
from addtree.space import parse_spec, sample_uniform

from _trees import random_kernel, random_points, random_spec, two_leaf_spec


def _random_data(spec, rng, n, noise=None):
    X = random_points(spec, rng, n)
    y = rng.normal(size=n) * 2.0 + 0.3
    return Dataset(spec, X, y, noise)


def _conditioned(spec, rng, n, noise=1e-3, interactions=False):
    k = random_kernel(spec, rng, interactions=interactions)
    data = _random_data(spec, rng, n)
    shift, scale = _standardize(data.y)
    return FittedGP(k, data, noise, shift, scale)


def _dense_oracle(gp, X_star, K_full, K_star, k_star_diag):
    """Condition on every observation with the full gram matrix."""
    ys = (gp.data.y - gp.y_shift) / gp.y_scale
    A = K_full + np.diag(gp.noise_diag + gp.jitter)
    mean = K_star @ np.linalg.solve(A, ys)
    var = k_star_diag - np.einsum("ij,ji->i", K_star, np.linalg.solve(A, K_star.T))
    return gp.y_shift + gp.y_scale * mean, var * gp.y_scale**2


class TestActiveSet:
    def test_blockless_root_splits_halves(self, jenatton, rng):
        X = random_points(jenatton, rng, 30)
        data = Dataset(jenatton, X, np.zeros(30))
        q = jenatton.point(["0", "1"], {"r8": 0.0, "x5": 0.0})
        s = active_set(data, q)
        assert {p.choices[0] for p in s.points} == {"0"}
        assert len(s.indices) == sum(p.choices[0] == "0" for p in X)

    def test_root_with_block_keeps_all(self, example, rng):
        data = _random_data(example, rng, 12)
        s = active_set(data, sample_uniform(example, rng))
        np.testing.assert_array_equal(s.indices, np.arange(12))

    def test_empty(self, jenatton, rng):
        s = active_set(Dataset.empty(jenatton), sample_uniform(jenatton, rng))
        assert len(s.indices) == 0 and s.y.size == 0


class TestPosterior:
    def test_prior(self, jenatton, rng):
        k = random_kernel(jenatton, rng)
        p = sample_uniform(jenatton, rng)
        post = posterior(prior_model(k), p)
        assert post.mean == 0.0
        assert post.variance == pytest.approx(k.prior_variance(jenatton.path_index(p)))

    def test_interpolation_limit(self, example, rng):
        p = sample_uniform(example, rng)
        data = Dataset(example, [p], [1.7], noise=[0.0])
        gp = FittedGP(build_add_tree(example), data, None, 0.0, 1.0)
        post = posterior(gp, p)
        assert post.mean == pytest.approx(1.7, abs=1e-6)
        assert post.variance < 1e-6

    def test_factor_reproduces_matrix(self, jenatton, rng):
        gp = _conditioned(jenatton, rng, 15)
        K = gram(gp.kernel, gp.data.points) + np.diag(gp.noise_diag + gp.jitter)
        L = gp.factor
        assert np.abs(L @ L.T - K).max() <= 1e-8 * np.abs(K).max()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_restriction_matches_dense_conditioning(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng) if seed % 2 else two_leaf_spec(rng)
        gp = _conditioned(spec, rng, int(rng.integers(1, 21)),
                          interactions=bool(seed % 3 == 0))
        X_star = random_points(spec, rng, 8)
        X = gp.data.points
        k = gp.kernel
        mean_o, var_o = _dense_oracle(gp, X_star, gram(k, X), gram(k, X_star, X),
                                      np.diag(gram(k, X_star)))
        mean, var = gp.predict(X_star)
        # Random variances reach 1e4 and both routes solve the same system, so
        # allow the usual eps * cond rounding on top of the fixed tolerance.
        A = gram(k, X) + np.diag(gp.noise_diag + gp.jitter)
        prior = max(1.0, float(np.max(np.diag(gram(k, X_star)))))
        slack = 100 * np.finfo(float).eps * np.linalg.cond(A) * prior
        scale = max(1.0, gp.y_scale)
        np.testing.assert_allclose(mean, mean_o, rtol=0, atol=(1e-10 + slack) * scale)
        np.testing.assert_allclose(var, np.maximum(var_o, 0), rtol=0,
                                   atol=(1e-10 + slack) * scale**2)

    def test_matches_explicit_block_gram(self, rng):
        # two-leaf oracle: K = K_root + blockdiag(K_a, K_b) built by hand
        for _ in range(10):
            spec = two_leaf_spec(rng, root_dim=int(rng.integers(1, 3)))
            gp = _conditioned(spec, rng, 14)
            k = gp.kernel
            X = list(gp.data.points)
            X_star = random_points(spec, rng, 5)

            def explicit(A, B):
                out = np.zeros((len(A), len(B)))
                for i, a in enumerate(A):
                    for j, b in enumerate(B):
                        out[i, j] = k._vertex_value(0, a, b)
                        if a.choices[0] == b.choices[0]:
                            leaf = 1 if a.choices[0] == "a" else 2
                            out[i, j] += k._vertex_value(leaf, a, b)
                return out

            mean_o, var_o = _dense_oracle(gp, X_star, explicit(X, X), explicit(X_star, X),
                                          np.diag(explicit(X_star, X_star)))
            mean, var = gp.predict(X_star)
            np.testing.assert_allclose(mean, mean_o, atol=1e-10 * gp.y_scale)
            np.testing.assert_allclose(var, var_o, atol=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_variance_bounded_by_prior(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng)
        gp = _conditioned(spec, rng, int(rng.integers(1, 25)), noise=1e-6)
        X_star = random_points(spec, rng, 10) + list(gp.data.points[:3])
        _, var = gp.predict(X_star)
        prior = np.array([gp.kernel.prior_variance(spec.path_index(p)) for p in X_star])
        assert np.all(var >= -1e-10)
        assert np.all(var <= prior * gp.y_scale**2 + 1e-10)


class TestComponents:
    def test_prior_component(self, jenatton, rng):
        k = random_kernel(jenatton, rng)
        post = component_posterior(prior_model(k), 4, [0.3])
        assert post.mean == 0.0 and post.variance == pytest.approx(k.variance_of(4))

    def test_blockless_vertex_rejected(self, jenatton, rng):
        with pytest.raises(ValueError):
            component_posterior(prior_model(random_kernel(jenatton, rng)), 0, [])

    def test_components_sum_to_mean(self, rng):
        for _ in range(10):
            spec = random_spec(rng)
            gp = _conditioned(spec, rng, 15)
            for p in gp.data.points[:5]:
                i = spec.path_index(p)
                total = sum(gp.component_posterior(v, p.values[v]).mean
                            for v in spec.paths[i] if spec.vertices[v].dim)
                assert total == pytest.approx(gp.posterior(p).mean - gp.y_shift, abs=1e-8)

    def test_component_variance_bounded(self, rng):
        spec = random_spec(rng)
        gp = _conditioned(spec, rng, 20)
        for v in spec.block_vertices:
            blk = spec.vertices[v].block
            for _ in range(5):
                x = rng.uniform(blk.lows, blk.highs)
                var = gp.component_posterior(v, x).variance
                assert -1e-10 <= var <= gp.kernel.variance_of(v) * gp.y_scale**2 + 1e-10

    def test_vectorized_matches_scalar(self, jenatton, rng):
        gp = _conditioned(jenatton, rng, 20)
        X = rng.uniform(-1, 1, size=(7, 1))
        m, s = gp.component_moments_many(3, X)
        for j in range(7):
            mj, sj = gp.component_moments(3, X[j])
            assert m[j] == pytest.approx(mj, abs=1e-12)
            assert s[j] == pytest.approx(sj, abs=1e-12)

    def test_moment_gradients(self, example, rng):
        gp = _conditioned(example, rng, 15)
        x = np.array([0.2, -0.4, 0.1])
        _, _, dm, dv = gp.component_moments(2, x, with_grad=True)
        h = 1e-6
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            mp, vp = gp.component_moments(2, x + e)
            mm, vm = gp.component_moments(2, x - e)
            assert dm[j] == pytest.approx((mp - mm) / (2 * h), rel=1e-5, abs=1e-7)
            assert dv[j] == pytest.approx((vp - vm) / (2 * h), rel=1e-5, abs=1e-7)


class TestMarginalLikelihood:
    def test_single_point_closed_form(self, example, rng):
        k = random_kernel(example, rng)
        p = sample_uniform(example, rng)
        data = Dataset(example, [p], [0.0], noise=[0.3])
        cfg = FitConfig(standardize=False)
        mll, _ = log_marginal_likelihood(k, data, config=cfg)
        sigma = k.prior_variance(example.path_index(p))
        assert mll == pytest.approx(-0.5 * np.log(2 * np.pi * (sigma + 0.3 + cfg.jitter)))

    @pytest.mark.parametrize("interactions", [False, True])
    def test_gradient_finite_differences(self, rng, interactions):
        for _ in range(5):
            spec = random_spec(rng)
            k = random_kernel(spec, rng, interactions=interactions)
            data = _random_data(spec, rng, 12)
            noise = 0.05
            mll, g = log_marginal_likelihood(k, data, noise)
            theta = np.r_[k.theta, np.log(noise)]
            fd = np.zeros_like(theta)
            h = 1e-6
            for i in range(theta.size):
                e = np.zeros_like(theta)
                e[i] = h
                up = log_marginal_likelihood(k.with_theta((theta + e)[:-1]), data,
                                             np.exp((theta + e)[-1]))[0]
                dn = log_marginal_likelihood(k.with_theta((theta - e)[:-1]), data,
                                             np.exp((theta - e)[-1]))[0]
                fd[i] = (up - dn) / (2 * h)
            assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-8) < 1e-5

    def test_duplicate_noiseless_points(self, example, rng):
        p = sample_uniform(example, rng)
        data = Dataset(example, [p, p], [1.0, 1.0], noise=[0.0, 0.0])
        mll, _ = log_marginal_likelihood(build_add_tree(example), data)
        assert np.isfinite(mll)
        gp = fit(data, FitConfig(n_restarts=2))
        assert np.isfinite(gp.mll)

    def test_not_psd_after_escalation(self, example, rng, monkeypatch):
        data = _random_data(example, rng, 3, noise=0.0)
        k = build_add_tree(example)
        monkeypatch.setattr(k, "gram_encoded", lambda A, B=None: -np.eye(len(A)))
        with pytest.raises(NotPSDError):
            FittedGP(k, data, None, 0.0, 1.0)

    def test_bad_jitter_rejected(self):
        with pytest.raises(ValueError):
            FitConfig(jitter=0.0)


class TestFit:
    def test_improves_on_initialization(self, jenatton, rng):
        data = _random_data(jenatton, rng, 16)
        cfg = FitConfig(n_restarts=3, seed=4)
        gp = fit(data, cfg)
        k0 = build_add_tree(jenatton)
        mll0, _ = log_marginal_likelihood(k0, data, cfg.noise_init)
        assert gp.mll >= mll0
        mll_fit, _ = log_marginal_likelihood(gp.kernel, data, gp.noise_variance)
        assert gp.mll == pytest.approx(mll_fit, rel=1e-9)

    def test_deterministic(self, jenatton, rng):
        data = _random_data(jenatton, rng, 12)
        a = fit(data, FitConfig(seed=3))
        b = fit(data, FitConfig(seed=3))
        assert a.hyperparameters == b.hyperparameters

    def test_affine_invariance(self, example, rng):
        data = _random_data(example, rng, 14)
        scaled = Dataset(example, data.points, 3.0 * data.y - 5.0)
        a = fit(data, FitConfig(seed=1, n_restarts=2))
        b = fit(scaled, FitConfig(seed=1, n_restarts=2))
        X = random_points(example, rng, 6)
        ma, va = a.predict(X)
        mb, vb = b.predict(X)
        np.testing.assert_allclose(mb, 3.0 * ma - 5.0, atol=1e-8)
        np.testing.assert_allclose(vb, 9.0 * va, atol=1e-8)

    def test_empty_data_rejected(self, jenatton):
        with pytest.raises(ValueError):
            fit(Dataset.empty(jenatton))

    def test_recovers_smooth_function(self):
        spec = parse_spec({"continuous": [{"name": "x", "low": -1, "high": 1}]})
        xs = np.linspace(-1, 1, 12)
        data = Dataset(spec, [spec.point(0, {"x": x}) for x in xs], np.sin(2 * xs))
        gp = fit(data)
        grid = np.linspace(-0.9, 0.9, 15)
        pred = gp.predict([spec.point(0, {"x": x}) for x in grid], return_var=False)
        assert np.abs(pred - np.sin(2 * grid)).max() < 1e-3
