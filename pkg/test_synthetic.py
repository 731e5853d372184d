import math

import numpy as np
import pytest
from scipy import stats

from mfa import MfaParams
from mixfit_settings import PinwheelConfig
from mixture_density import GmmParams
from synthetic import sample_gmm, sample_mfa, sample_pinwheel


@pytest.fixture
def mixture():
    return GmmParams.from_covariances([0.3, 0.7], [[0.0, 3.0], [2.0, -1.0]], [[[1.0, 0.4], [0.4, 0.8]], [[0.5, 0.0], [0.0, 2.0]]])


def test_gmm_sample_moments(mixture):
    data = sample_gmm(mixture, 10000, seed=0)
    w = mixture.weights()
    mean = w @ mixture.means
    cov = sum(wg * (S + np.outer(mu - mean, mu - mean)) for wg, mu, S in zip(w, mixture.means, mixture.covariances()))
    assert data.X.shape == (10000, 2)
    assert np.mean(data.X, axis=0) == pytest.approx(mean, abs=0.1)
    assert np.cov(data.X.T) == pytest.approx(cov, abs=0.25)
    assert np.mean(data.labels == 1) == pytest.approx(0.7, abs=0.02)


def test_gmm_sample_skips_empty_component(mixture):
    mixture.logits = np.array([0.0, -np.inf])
    assert np.all(sample_gmm(mixture, 500, seed=3).labels == 0)


def test_samplers_are_deterministic(mixture):
    a = sample_gmm(mixture, 50, seed=11)
    b = sample_gmm(mixture, 50, seed=11)
    c = sample_gmm(mixture, 50, seed=12)
    assert np.array_equal(a.X, b.X)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.X, c.X)
    cfg = PinwheelConfig(seed=5)
    assert np.array_equal(sample_pinwheel(cfg).X, sample_pinwheel(cfg).X)


#==================================================================#
#  Pinwheel
#==================================================================#
def test_pinwheel_shape_and_labels():
    data = sample_pinwheel(PinwheelConfig(clusters=4, per_cluster=25, seed=1))
    assert data.X.shape == (100, 2)
    assert np.bincount(data.labels).tolist() == [25, 25, 25, 25]


def test_pinwheel_noise_free_limit():
    cfg = PinwheelConfig(clusters=3, per_cluster=10, radial_std=1e-12, tangential_std=1e-12, swirl_rate=0.4, seed=2)
    data = sample_pinwheel(cfg)
    for g in range(3):
        phi = 2.0 * math.pi * g / 3 + 0.4
        arm = data.X[data.labels == g]
        assert arm[:, 0] == pytest.approx(np.full(10, math.cos(phi)), abs=1e-9)
        assert arm[:, 1] == pytest.approx(np.full(10, math.sin(phi)), abs=1e-9)


def test_pinwheel_arms_are_not_gaussian():
    cfg = PinwheelConfig(clusters=3, per_cluster=200, seed=7)
    data = sample_pinwheel(cfg)
    # Monte-Carlo oracle from the same generative formula
    rng = np.random.default_rng(0)
    rho = 1.0 + rng.normal(0.0, cfg.radial_std, size=10 ** 6)
    phi = rng.normal(0.0, cfg.tangential_std, size=10 ** 6) + cfg.swirl_rate * rho
    band = 5.0 * math.sqrt(24.0 / cfg.per_cluster)
    for g in range(3):
        angle = 2.0 * math.pi * g / 3
        x = (rho * np.cos(phi + angle))
        arm = data.X[data.labels == g]
        assert stats.kurtosis(arm[:, 0]) == pytest.approx(stats.kurtosis(x), abs=band)
        radius = np.linalg.norm(arm, axis=1)
        assert np.mean(radius) == pytest.approx(1.0, abs=0.1)
        assert np.std(radius) == pytest.approx(cfg.radial_std, abs=0.05)
    # The swirl bends each arm, so the angle drifts with the radius
    arm = data.X[data.labels == 0]
    angle = np.arctan2(arm[:, 1], arm[:, 0])
    assert np.corrcoef(np.linalg.norm(arm, axis=1), angle)[0, 1] > 0.5


#==================================================================#
#  Factor-analyzer samples
#==================================================================#
def test_mfa_sample_covariance():
    theta = MfaParams(np.zeros(1), np.array([[1.0, -1.0, 0.0]]), np.array([[[0.8], [0.5], [-0.6]]]), np.array([[0.3, 0.4, 0.5]]))
    data = sample_mfa(theta, 20000, seed=4)
    assert np.mean(data.X, axis=0) == pytest.approx([1.0, -1.0, 0.0], abs=0.03)
    assert np.cov(data.X.T) == pytest.approx(theta.covariances()[0], abs=0.05)
    assert np.all(data.labels == 0)
