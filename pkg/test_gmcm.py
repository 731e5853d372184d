import math

import numpy as np
import pytest
from scipy import stats

import autodiff
from errors import ConfigError, ConstantColumnError
from gmcm import (cluster_labels, fit_gmcm_auto, gmcm_exact_loglik, gmcm_log_density, gmcm_pseudo_loglik,
                  init_gmcm_params, rank_transform, recover_latent)
from mixfit_settings import FitConfig, PinwheelConfig
from mixture_density import GmmParams, gmm_layout, gmm_marginal_cdf, gmm_marginal_pdf, gmm_marginal_quantile, params_from_vector
from synthetic import sample_pinwheel


def random_params(rng, G, p):
    factors = np.array([np.tril(rng.uniform(-0.5, 0.5, size=(p, p)), -1) + np.diag(rng.uniform(0.7, 1.3, size=p)) for _ in range(G)])
    return GmmParams(rng.normal(size=G), rng.normal(0.0, 1.0, size=(G, p)), factors)


@pytest.fixture
def pinwheel():
    return sample_pinwheel(PinwheelConfig(clusters=3, per_cluster=200, seed=7))


#==================================================================#
#  Pseudo-observations
#==================================================================#
def test_rank_transform_examples():
    assert rank_transform(np.array([[3.0], [1.0], [4.0], [2.0]]))[:, 0] == pytest.approx([0.6, 0.2, 0.8, 0.4], abs=1e-15)
    assert rank_transform(np.array([[1.0], [2.0], [2.0]]))[:, 0] == pytest.approx([0.25, 0.625, 0.625], abs=1e-15)


def test_rank_transform_is_monotone_invariant():
    X = np.random.default_rng(0).normal(size=(50, 3))
    U = rank_transform(X)
    assert np.array_equal(U, rank_transform(np.exp(X)))
    assert np.all((U > 0.0) & (U < 1.0))
    for j in range(3):
        assert sorted(U[:, j] * 51) == pytest.approx(list(range(1, 51)))


def test_rank_transform_errors():
    with pytest.raises(ConstantColumnError) as info:
        rank_transform(np.array([[1.0, 2.0], [3.0, 2.0], [0.0, 2.0]]))
    assert info.value.column == 1
    with pytest.raises(ConfigError):
        rank_transform(np.array([[1.0, 2.0]]))


#==================================================================#
#  Latent recovery
#==================================================================#
def test_recover_latent_standard_normal():
    theta = GmmParams(np.zeros(1), np.zeros((1, 2)), np.array([np.eye(2)]))
    Y = recover_latent(np.full((3, 2), 0.5), theta)
    assert Y == pytest.approx(np.zeros((3, 2)), abs=1e-6)


def test_recover_latent_scaled_normal():
    theta = GmmParams(np.zeros(1), np.array([[1.5, -2.0]]), np.array([[[2.0, 0.0], [0.0, 0.5]]]))
    U = np.random.default_rng(1).uniform(0.02, 0.98, size=(40, 2))
    Y = recover_latent(U, theta)
    assert Y[:, 0] == pytest.approx(1.5 + 2.0 * stats.norm.ppf(U[:, 0]), abs=1e-3)
    assert Y[:, 1] == pytest.approx(-2.0 + 0.5 * stats.norm.ppf(U[:, 1]), abs=1e-3)


def test_recover_latent_roundtrip():
    rng = np.random.default_rng(2)
    theta = random_params(rng, 3, 2)
    U = rng.uniform(0.01, 0.99, size=(60, 2))
    Y = recover_latent(U, theta)
    for j in range(2):
        assert np.max(np.abs(gmm_marginal_cdf(Y[:, j], j, theta) - U[:, j])) <= 1e-3


#==================================================================#
#  Likelihoods
#==================================================================#
def test_exact_loglik_vanishes_in_one_dimension():
    rng = np.random.default_rng(3)
    theta = random_params(rng, 3, 1)
    assert gmcm_exact_loglik(rng.normal(size=(25, 1)), theta) == pytest.approx(0.0, abs=1e-10)


def test_exact_loglik_of_independence_copula():
    rng = np.random.default_rng(4)
    theta = GmmParams(np.zeros(1), np.array([[0.4, -1.0]]), np.array([np.diag([1.7, 0.6])]))
    assert gmcm_exact_loglik(rng.normal(size=(25, 2)), theta) == pytest.approx(0.0, abs=1e-10)


def test_exact_loglik_matches_copula_ratio():
    rng = np.random.default_rng(5)
    for _ in range(5):
        theta = random_params(rng, 2, 2)
        Y = rng.normal(size=(10, 2))
        expected = 0.0
        for y in Y:
            joint = sum(w * stats.multivariate_normal(mu, S).pdf(y) for w, mu, S in zip(theta.weights(), theta.means, theta.covariances()))
            marginals = 1.0
            for j in range(2):
                marginals *= sum(w * stats.norm(mu[j], math.sqrt(S[j, j])).pdf(y[j]) for w, mu, S in zip(theta.weights(), theta.means, theta.covariances()))
            expected += math.log(joint / marginals)
        assert gmcm_exact_loglik(Y, theta) == pytest.approx(expected, abs=1e-10)


def test_pseudo_loglik_single_component():
    rng = np.random.default_rng(6)
    theta = random_params(rng, 1, 2)
    Y = rng.normal(size=(15, 2))
    expected = np.sum(stats.multivariate_normal(theta.means[0], theta.covariances()[0]).logpdf(Y))
    assert gmcm_pseudo_loglik(Y, theta) == pytest.approx(expected, abs=1e-10)


def test_exact_and_pseudo_loglik_identity():
    rng = np.random.default_rng(7)
    for _ in range(5):
        theta = random_params(rng, 3, 2)
        Y = rng.normal(size=(20, 2))
        correction = sum(np.sum(np.log(gmm_marginal_pdf(Y[:, j], j, theta))) for j in range(2))
        assert gmcm_exact_loglik(Y, theta) == pytest.approx(gmcm_pseudo_loglik(Y, theta) - correction, abs=1e-10)


def test_exact_loglik_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    Y = rng.normal(size=(8, 2))
    layout = gmm_layout(2, 2)
    f = lambda x: gmcm_exact_loglik(Y, params_from_vector(layout, x))
    for _ in range(20):
        x = layout.pack(random_params(rng, 2, 2).__dict__)
        _, g = autodiff.grad(f, x)
        expected = np.empty_like(x)
        for i in range(len(x)):
            eps = 1e-6 * (1.0 + abs(x[i]))
            up, down = x.copy(), x.copy()
            up[i] += eps
            down[i] -= eps
            expected[i] = (float(f(up)) - float(f(down))) / (2.0 * eps)
        assert g == pytest.approx(expected, rel=1e-6, abs=1e-6)


def test_copula_density_integrates_to_one():
    rng = np.random.default_rng(9)
    theta = random_params(rng, 2, 2)
    m = 400
    u = (np.arange(m) + 0.5) / m
    y0 = gmm_marginal_quantile(u, 0, theta)
    y1 = gmm_marginal_quantile(u, 1, theta)
    Y = np.column_stack([np.repeat(y0, m), np.tile(y1, m)])
    total = np.sum(np.exp(gmcm_log_density(Y, theta))) / (m * m)
    assert total == pytest.approx(1.0, abs=1e-2)


#==================================================================#
#  Labels and fitting
#==================================================================#
def test_cluster_labels():
    rng = np.random.default_rng(10)
    one = random_params(rng, 1, 2)
    assert np.all(cluster_labels(rng.normal(size=(10, 2)), one) == 0)
    apart = GmmParams(np.zeros(2), np.array([[-6.0, 0.0], [6.0, 0.0]]), np.array([np.eye(2), np.eye(2)]))
    assert cluster_labels(apart.means, apart).tolist() == [0, 1]
    theta = random_params(rng, 3, 2)
    Y = rng.normal(size=(30, 2))
    resp = np.column_stack([w * stats.multivariate_normal(mu, S).pdf(Y) for w, mu, S in zip(theta.weights(), theta.means, theta.covariances())])
    assert np.array_equal(cluster_labels(Y, theta), np.argmax(resp, axis=1))


def test_init_is_shared_and_deterministic(pinwheel):
    U = rank_transform(pinwheel.X)
    a, Y0 = init_gmcm_params(U, 3, 5)
    b, _ = init_gmcm_params(U, 3, 5)
    assert np.array_equal(a.means, b.means)
    assert np.array_equal(a.cov_factors, np.array([np.eye(2)] * 3))
    assert np.array_equal(a.logits, np.zeros(3))
    assert Y0 == pytest.approx(stats.norm.ppf(U), abs=1e-3)


def test_fit_single_component_is_monotone():
    X = np.random.default_rng(11).normal(size=(100, 2))
    result = fit_gmcm_auto(rank_transform(X), 1, FitConfig.for_gmcm(max_iters=200))
    assert result.trace.is_non_decreasing(slack=1e-10)
    assert np.all(result.labels == 0)


def test_fit_on_independent_gaussian_data_recovers_identity_correlation():
    X = np.random.default_rng(12).normal(size=(500, 2))
    result = fit_gmcm_auto(rank_transform(X), 1, FitConfig.for_gmcm(max_iters=500))
    S = result.params.covariances()[0]
    sd = np.sqrt(np.diag(S))
    correlation = S / np.outer(sd, sd)
    assert np.linalg.norm(correlation - np.eye(2)) <= 0.2


def test_fit_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        fit_gmcm_auto(np.array([[0.5, 1.0]]), 1)
    with pytest.raises(ConfigError):
        fit_gmcm_auto(np.full((3, 2), 0.5), 3)


@pytest.mark.slow
def test_fit_on_pinwheel_is_monotone_and_terminates(pinwheel):
    result = fit_gmcm_auto(rank_transform(pinwheel.X), 3, FitConfig.for_gmcm(seed=7))
    logliks = np.array(result.trace.logliks)
    assert np.all(np.isfinite(logliks))
    assert result.trace.is_non_decreasing(slack=1e-10)
    assert logliks[-1] >= logliks[0]
    assert result.trace.iterations <= 2000
    assert len(result.labels) == 600
    assert np.all(np.bincount(result.labels, minlength=3) > 0)
    for S in result.params.covariances():
        assert np.min(np.linalg.eigvalsh(S)) >= -1e-10


@pytest.mark.slow
def test_pipeline_is_rank_invariant(pinwheel):
    fit = FitConfig.for_gmcm(seed=3, max_iters=100)
    U = rank_transform(pinwheel.X)
    V = rank_transform(np.exp(pinwheel.X))
    assert np.array_equal(U, V)
    a = fit_gmcm_auto(U, 3, fit)
    b = fit_gmcm_auto(V, 3, fit)
    assert np.array_equal(a.labels, b.labels)
    assert a.loglik == b.loglik
