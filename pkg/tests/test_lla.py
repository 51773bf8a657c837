import numpy as np
import pytest
import scipy.stats

from lagp.errors import CapExceeded, DimensionMismatch
from lagp.kernel import KernelContext, jacobian, kernel_block, kernel_block_fast
from lagp.linalg import rng_stream
from lagp.lla import (
    GaussianPredictive,
    LikelihoodModel,
    fit_diag,
    fit_exact,
    fit_last_layer,
    fit_weight_space,
    grid_search_hyperparameters,
    lambda_of,
    last_layer_jacobian,
    log_marginal_likelihood,
    predict_diag,
    predict_exact,
    predict_exact_batch,
    predict_last_layer,
    predict_weight_space,
    softmax,
)
from lagp.nn import MlpArchitecture, MlpNetwork, forward

from test_kernel import random_ctx


class TestLambdaOf:
    def test_gaussian_is_inverse_noise(self):
        lik = LikelihoodModel(kind="gaussian", noise_variance=0.5)
        assert np.allclose(lambda_of(lik, np.zeros(1)), [[2.0]])

    def test_uniform_softmax(self):
        lik = LikelihoodModel(kind="categorical")
        lam = lambda_of(lik, np.zeros(3))
        expected = np.eye(3) / 3.0 - np.ones((3, 3)) / 9.0
        assert np.allclose(lam, expected, atol=1e-12)

    def test_matches_fd_hessian_of_log_softmax(self):
        rng = rng_stream(0)
        lik = LikelihoodModel(kind="categorical")
        g = rng.normal(size=4)
        lam = lambda_of(lik, g)
        h = 1e-4
        label = 2

        def f(v):
            return -np.log(softmax(v)[label])

        for a in range(4):
            for b in range(4):
                ea, eb = np.zeros(4), np.zeros(4)
                ea[a] = h
                eb[b] = h
                fd = (f(g + ea + eb) - f(g + ea - eb) - f(g - ea + eb) + f(g - ea - eb)) / (4 * h * h)
                assert abs(fd - lam[a, b]) <= 1e-6


class TestFitExact:
    def test_empty_data_returns_prior(self):
        rng = rng_stream(1)
        ctx = random_ctx(rng, 2, [4], 2, log_prior_variance=0.2)
        lik = LikelihoodModel(kind="gaussian", noise_variance=0.3)
        state = fit_exact(ctx, lik, np.zeros((0, 2)), np.zeros((0, 1)))
        x_star = rng.normal(size=2)
        pred = predict_exact(state, x_star)
        assert np.allclose(pred.covariance, kernel_block(ctx, x_star, x_star), atol=1e-12)

    def test_huge_noise_recovers_prior(self):
        rng = rng_stream(2)
        ctx = random_ctx(rng, 1, [5], 1)
        x = rng.normal(size=(6, 1))
        y = rng.normal(size=(6, 1))
        lik = LikelihoodModel(kind="gaussian", noise_variance=1e9)
        state = fit_exact(ctx, lik, x, y)
        x_star = rng.normal(size=1)
        pred = predict_exact(state, x_star)
        prior = kernel_block(ctx, x_star, x_star)
        assert np.max(np.abs(pred.covariance - prior)) <= 1e-6 * np.max(np.abs(prior))

    def test_cap_enforced(self):
        rng = rng_stream(3)
        ctx = random_ctx(rng, 1, [2], 1)
        with pytest.raises(CapExceeded):
            fit_exact(ctx, LikelihoodModel(kind="gaussian", noise_variance=1.0), np.zeros((11, 1)), np.zeros((11, 1)), cap=10)

    def test_interpolation_variance_vanishes_with_noise(self):
        rng = rng_stream(4)
        ctx = random_ctx(rng, 1, [6], 1)
        x = rng.normal(size=(5, 1))
        y = rng.normal(size=(5, 1))
        lik = LikelihoodModel(kind="gaussian", noise_variance=1e-10)
        state = fit_exact(ctx, lik, x, y)
        pred = predict_exact(state, x[2])
        assert pred.covariance[0, 0] <= 1e-6

    def test_posterior_deflation(self):
        rng = rng_stream(5)
        ctx = random_ctx(rng, 2, [5], 3)
        x = rng.normal(size=(6, 2))
        lik = LikelihoodModel(kind="categorical")
        state = fit_exact(ctx, lik, x, None)
        for _ in range(10):
            x_star = rng.normal(size=2)
            post = np.diag(predict_exact(state, x_star).covariance)
            prior = np.diag(kernel_block(ctx, x_star, x_star))
            assert np.all(post <= prior + 1e-10)

    def test_mean_is_forward_pass_bitwise(self):
        rng = rng_stream(6)
        ctx = random_ctx(rng, 2, [4], 2)
        x = rng.normal(size=(4, 2))
        state = fit_exact(ctx, LikelihoodModel(kind="categorical"), x)
        x_star = rng.normal(size=(3, 2))
        preds = predict_exact_batch(state, x_star)
        outputs = forward(ctx.net, x_star).output
        for i, p in enumerate(preds):
            assert np.array_equal(p.mean, outputs[i])


class TestWeightSpaceEquivalence:
    @pytest.mark.parametrize("kind", ["gaussian", "categorical"])
    def test_function_space_matches_weight_space(self, kind):
        rng = rng_stream(7)
        for _ in range(5):
            c = int(rng.integers(1, 4))
            ctx = random_ctx(rng, 2, [3], c, log_prior_variance=float(rng.normal(scale=0.3)))
            assert ctx.net.param_count <= 40
            x = rng.normal(size=(8, 2))
            y = rng.normal(size=(8, c)) if kind == "gaussian" else None
            lik = LikelihoodModel(kind=kind, noise_variance=0.4)
            exact = fit_exact(ctx, lik, x, y)
            weight = fit_weight_space(
                ctx.net, lik, x, y, prior_variance=ctx.prior_variance
            )
            for _ in range(4):
                x_star = rng.normal(size=2)
                a = predict_exact(exact, x_star).covariance
                b = predict_weight_space(weight, x_star).covariance
                scale = max(1e-12, float(np.max(np.abs(a))))
                assert np.max(np.abs(a - b)) <= 1e-8 * scale

    def test_no_data_weight_space_covariance_is_prior(self):
        rng = rng_stream(8)
        ctx = random_ctx(rng, 2, [3], 1, log_prior_variance=np.log(0.7))
        lik = LikelihoodModel(kind="gaussian", noise_variance=1.0)
        weight = fit_weight_space(ctx.net, lik, np.zeros((0, 2)), np.zeros((0, 1)), prior_variance=0.7)
        x_star = rng.normal(size=2)
        pred = predict_weight_space(weight, x_star)
        assert np.allclose(pred.covariance, kernel_block(ctx, x_star, x_star), atol=1e-10)

    def test_single_point_precision_assembly(self):
        rng = rng_stream(9)
        ctx = random_ctx(rng, 2, [], 1)
        x = rng.normal(size=(1, 2))
        y = rng.normal(size=(1, 1))
        sigma2, prior = 0.5, 2.0
        lik = LikelihoodModel(kind="gaussian", noise_variance=sigma2)
        weight = fit_weight_space(ctx.net, lik, x, y, prior_variance=prior)
        j = jacobian(ctx, x[0]).values
        expected = j.T @ j / sigma2 + np.eye(3) / prior
        assert np.allclose(weight.precision, expected, atol=1e-12)

    def test_cap_enforced(self):
        rng = rng_stream(10)
        ctx = random_ctx(rng, 10, [50], 10)
        with pytest.raises(CapExceeded):
            fit_weight_space(ctx.net, LikelihoodModel(kind="categorical"), np.zeros((2, 10)), cap=100)


class TestDiag:
    def test_matches_full_ggn_diagonal(self):
        rng = rng_stream(11)
        ctx = random_ctx(rng, 2, [3], 2)
        x = rng.normal(size=(5, 2))
        lik = LikelihoodModel(kind="categorical")
        full = fit_weight_space(ctx.net, lik, x, prior_variance=1.5)
        diag = fit_diag(ctx.net, lik, x, prior_variance=1.5)
        assert np.max(np.abs(np.diag(full.precision) - diag.precision_diag)) <= 1e-10

    def test_equals_weight_space_when_ggn_diagonal(self):
        # one data point at x = 0 makes the linear-model GGN exactly diagonal
        rng = rng_stream(12)
        arch = MlpArchitecture(1, (), 1)
        net = MlpNetwork(arch=arch, weights=(rng.normal(size=(1, 1)),), biases=(rng.normal(size=1),))
        lik = LikelihoodModel(kind="gaussian", noise_variance=0.3)
        x = np.zeros((1, 1))
        y = rng.normal(size=(1, 1))
        d = fit_diag(net, lik, x, y, prior_variance=0.8)
        w = fit_weight_space(net, lik, x, y, prior_variance=0.8)
        for _ in range(5):
            x_star = rng.normal(size=1)
            assert np.allclose(
                predict_diag(d, x_star).covariance,
                predict_weight_space(w, x_star).covariance,
                atol=1e-12,
            )

    def test_variance_nonnegative(self):
        rng = rng_stream(13)
        ctx = random_ctx(rng, 3, [6], 2)
        x = rng.normal(size=(10, 3))
        diag = fit_diag(ctx.net, LikelihoodModel(kind="categorical"), x)
        for _ in range(20):
            pred = predict_diag(diag, rng.normal(size=3))
            assert np.all(np.diag(pred.covariance) >= 0)


class TestLastLayer:
    def test_single_layer_network_equals_weight_space(self):
        rng = rng_stream(14)
        ctx = random_ctx(rng, 3, [], 2)
        x = rng.normal(size=(6, 3))
        lik = LikelihoodModel(kind="categorical")
        ll = fit_last_layer(ctx.net, lik, x, prior_variance=1.2)
        w = fit_weight_space(ctx.net, lik, x, prior_variance=1.2)
        for _ in range(5):
            x_star = rng.normal(size=3)
            a = predict_last_layer(ll, x_star).covariance
            b = predict_weight_space(w, x_star).covariance
            assert np.max(np.abs(a - b)) <= 1e-10

    def test_jacobian_equals_explicit_slice(self):
        rng = rng_stream(15)
        ctx = random_ctx(rng, 2, [4, 3], 2)
        x = rng.normal(size=2)
        full = jacobian(ctx, x).values
        last_cols = (3 + 1) * 2
        assert np.max(np.abs(last_layer_jacobian(ctx.net, x) - full[:, -last_cols:])) <= 1e-12

    def test_mean_unchanged_from_map(self):
        rng = rng_stream(16)
        ctx = random_ctx(rng, 2, [5], 3)
        x = rng.normal(size=(4, 2))
        ll = fit_last_layer(ctx.net, LikelihoodModel(kind="categorical"), x)
        x_star = rng.normal(size=2)
        pred = predict_last_layer(ll, x_star)
        assert np.array_equal(pred.mean, forward(ctx.net, x_star[None, :]).output[0])


class TestLogMarginalLikelihood:
    def test_single_point_zero_kernel_limit(self):
        rng = rng_stream(17)
        ctx = random_ctx(rng, 1, [3], 1, log_prior_variance=np.log(1e-300))
        x = rng.normal(size=(1, 1))
        y = np.array([0.7])
        lik = LikelihoodModel(kind="gaussian", noise_variance=0.5)
        value = log_marginal_likelihood(ctx, lik, x, y)
        mean = forward(ctx.net, x).output[0, 0]
        expected = scipy.stats.norm.logpdf(0.7, loc=mean, scale=np.sqrt(0.5))
        assert abs(value - expected) <= 1e-9

    def test_matches_dense_mvn_oracle(self):
        rng = rng_stream(18)
        ctx = random_ctx(rng, 2, [4], 1, log_prior_variance=0.4)
        x = rng.normal(size=(7, 2))
        y = rng.normal(size=7)
        lik = LikelihoodModel(kind="gaussian", noise_variance=0.3)
        value = log_marginal_likelihood(ctx, lik, x, y)
        mean = forward(ctx.net, x).output.ravel()
        cov = kernel_block_fast(ctx, x, x).values + 0.3 * np.eye(7)
        expected = scipy.stats.multivariate_normal.logpdf(y, mean=mean, cov=cov)
        assert abs(value - expected) <= 1e-8

    def test_adding_perfect_point_increases_evidence(self):
        rng = rng_stream(19)
        ctx = random_ctx(rng, 1, [4], 1)
        x = rng.normal(size=(5, 1))
        y = forward(ctx.net, x).output.ravel() + 0.01 * rng.normal(size=5)
        lik = LikelihoodModel(kind="gaussian", noise_variance=1e-6)
        base = log_marginal_likelihood(ctx, lik, x, y)
        x_new = np.vstack([x, rng.normal(size=(1, 1))])
        y_new = np.append(y, forward(ctx.net, x_new[-1:]).output.ravel())
        assert log_marginal_likelihood(ctx, lik, x_new, y_new) > base

    def test_categorical_rejected(self):
        ctx = random_ctx(rng_stream(20), 1, [2], 2)
        with pytest.raises(DimensionMismatch):
            log_marginal_likelihood(ctx, LikelihoodModel(kind="categorical"), np.zeros((1, 1)), np.zeros(1))


class TestGridSearch:
    def test_recovers_generating_scales(self):
        rng = rng_stream(21)
        ctx = random_ctx(rng, 1, [8], 1)
        x = rng.uniform(-1, 1, size=(40, 1))
        noise = 0.05
        y = forward(ctx.net, x).output.ravel() + noise * rng.normal(size=40)
        pv, nv, table = grid_search_hyperparameters(ctx.net, x, y)
        assert len(table) == 100
        # the selected noise should be within one grid step of the truth
        assert nv <= 0.1

    def test_best_entry_is_argmax_of_table(self):
        rng = rng_stream(22)
        ctx = random_ctx(rng, 1, [3], 1)
        x = rng.normal(size=(10, 1))
        y = rng.normal(size=10)
        pv, nv, table = grid_search_hyperparameters(ctx.net, x, y)
        best_row = max(table, key=lambda r: r[2])
        assert (pv, nv) == (best_row[0], best_row[1])
