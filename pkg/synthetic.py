'''
Seeded generators for synthetic test data. Every generator is a pure
function of its arguments and seed.
'''
import math

import numpy as np

from mfa import MfaParams
from mixfit_settings import PinwheelConfig
from mixture_density import GmmParams
from structures import Dataset
from utils import make_rng


def sample_gmm(theta: GmmParams, n: int, seed: int) -> Dataset:
    '''Draw g ~ pi, then y = mu_g + U_g z with z standard normal.'''
    rng = make_rng(seed)
    weights = theta.weights()
    labels = rng.choice(theta.n_components, size=n, p=weights)
    z = rng.standard_normal((n, theta.dim))
    factors = np.asarray(theta.cov_factors, dtype=float)
    means = np.asarray(theta.means, dtype=float)
    X = means[labels] + np.einsum("nij,nj->ni", factors[labels], z)
    return Dataset(X, labels)


def sample_mfa(theta: MfaParams, n: int, seed: int) -> Dataset:
    '''x = mu_g + Lambda_g f + psi_g * e with standard normal factors f and noise e.'''
    rng = make_rng(seed)
    labels = rng.choice(theta.n_components, size=n, p=theta.weights())
    f = rng.standard_normal((n, theta.n_factors))
    e = rng.standard_normal((n, theta.dim))
    loadings = np.asarray(theta.loadings, dtype=float)
    X = (np.asarray(theta.means, dtype=float)[labels]
         + np.einsum("nij,nj->ni", loadings[labels], f)
         + np.asarray(theta.noise_sqrt, dtype=float)[labels] * e)
    return Dataset(X, labels)


def sample_pinwheel(cfg: PinwheelConfig) -> Dataset:
    '''
    Arms of a pinwheel: radius 1 + e with e ~ N(0, radial_std^2), angle
    2 pi g / G + t + swirl_rate * radius with t ~ N(0, tangential_std^2).
    '''
    rng = make_rng(cfg.seed)
    points = []
    labels = []
    for g in range(cfg.clusters):
        e = rng.normal(0.0, cfg.radial_std, size=cfg.per_cluster)
        t = rng.normal(0.0, cfg.tangential_std, size=cfg.per_cluster)
        rho = 1.0 + e
        phi = 2.0 * math.pi * g / cfg.clusters + t + cfg.swirl_rate * rho
        points.append(np.column_stack([rho * np.cos(phi), rho * np.sin(phi)]))
        labels.append(np.full(cfg.per_cluster, g))
    return Dataset(np.vstack(points), np.concatenate(labels))
