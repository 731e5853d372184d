'''
Closed-form EM baselines: plain mixtures, pseudo-EM for the copula model
and the factor-analyzer mixture. These only use numpy/scipy; the
autodiff tape is never involved.
'''
from typing import Optional, Tuple

import numpy as np
import scipy.linalg
from scipy import special

from errors import ConfigError, RankDeficiencyError, SingularCovarianceError
from gmcm import check_pseudo_obs, cluster_labels, gmcm_exact_loglik, init_gmcm_params, recover_latent_counted
from logger import logger
from mfa import MfaParams, init_mfa_params, log_joint, mfa_labels
from mixfit_settings import EmConfig, QuantileGridConfig
from mixture_density import GmmParams, init_gmm_params, map_labels
from optimize import relative_change
from structures import FitResult, FitTrace, SinkFactory
from utils import Stopwatch, make_rng, restart_seeds, run_restarts

# Smallest total responsibility a component may keep
MIN_COMPONENT_MASS = 1e-10


def _floor(Y: np.ndarray, cfg: EmConfig) -> float:
    return cfg.min_covariance_floor * float(np.mean(np.var(Y, axis=0)))


#==================================================================#
#  Gaussian mixture EM
#==================================================================#
def gaussian_log_probs(Y: np.ndarray, log_weights: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    '''n x G matrix of log pi_g + log N(y_i; mu_g, Sigma_g).'''
    n, p = Y.shape
    G = len(log_weights)
    logprobs = -0.5 * np.ones((n, G)) * p * np.log(2 * np.pi)
    for g in range(G):
        try:
            L = scipy.linalg.cholesky(covs[g], lower=True)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError("Component {} covariance is singular".format(g))
        logprobs[:, g] -= np.sum(np.log(np.diag(L)))
        soln = scipy.linalg.solve_triangular(L, (Y - means[g]).T, lower=True)
        logprobs[:, g] -= 0.5 * np.sum(soln ** 2, axis=0)
    return logprobs + log_weights


def _gmm_m_step(Y: np.ndarray, resp: np.ndarray, floor: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, p = Y.shape
    mass = resp.sum(axis=0)
    if np.any(mass < MIN_COMPONENT_MASS):
        raise SingularCovarianceError("A component lost all of its responsibility")
    means = (resp.T @ Y) / mass[:, None]
    covs = np.empty((len(mass), p, p))
    for g in range(len(mass)):
        diff = Y - means[g]
        S = (resp[:, g, None] * diff).T @ diff / mass[g]
        S = 0.5 * (S + S.T)
        # Only rescue covariances that are about to collapse
        if floor > 0.0 and np.min(np.linalg.eigvalsh(S)) < floor:
            S = S + floor * np.eye(p)
        covs[g] = S
    return np.log(mass / n), means, covs


def _to_params(log_weights, means, covs) -> GmmParams:
    try:
        factors = np.array([np.linalg.cholesky(s) for s in covs])
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("Fitted covariance is not positive definite")
    return GmmParams(np.array(log_weights, dtype=float), np.array(means, dtype=float), factors)


def em_gmm_from(Y: np.ndarray, theta0: GmmParams, cfg: EmConfig, trace: Optional[FitTrace] = None) -> Tuple[GmmParams, FitTrace]:
    clock = Stopwatch()
    trace = trace if trace is not None else FitTrace()
    floor = _floor(Y, cfg)
    log_w = np.log(theta0.weights())
    means = np.array(theta0.means, dtype=float)
    covs = theta0.covariances()
    previous = None
    for it in range(cfg.max_iters + 1):
        logprobs = gaussian_log_probs(Y, log_w, means, covs)
        norm = special.logsumexp(logprobs, axis=1)
        ll = float(np.sum(norm))
        if not np.isfinite(ll):
            raise SingularCovarianceError("EM log-likelihood became non-finite at iteration {}".format(it))
        trace.record(ll, 0.0, 1.0, clock.ms())
        logger.iteration("em gmm iter {} loglik {:.8f}".format(it, ll))
        if previous is not None and relative_change(previous, ll) < cfg.tol:
            trace.converged = True
            break
        if it == cfg.max_iters:
            break
        previous = ll
        log_w, means, covs = _gmm_m_step(Y, np.exp(logprobs - norm[:, None]), floor)
    return _to_params(log_w, means, covs), trace


def em_gmm(Y, G: int, cfg: Optional[EmConfig] = None, trace_sinks: Optional[SinkFactory] = None) -> FitResult:
    '''
    EM for a full-covariance mixture. Starts from the same initialization
    as the gradient fit for the same seed.
    '''
    cfg = cfg or EmConfig()
    Y = np.asarray(Y, dtype=float)
    n, p = Y.shape
    if G < 1 or n <= G:
        raise ConfigError("Need G >= 1 and more rows than components (n={}, G={})".format(n, G))
    scale = np.std(Y, axis=0)
    scale[scale == 0.0] = 1.0

    def one(seed):
        theta0 = init_gmm_params(Y, G, make_rng(seed), factor_scale=scale)
        theta, trace = em_gmm_from(Y, theta0, cfg, FitTrace.for_seed(trace_sinks, seed))
        return FitResult(theta, trace, map_labels(Y, theta), trace.final_loglik, seed, "em")

    return run_restarts(one, restart_seeds(cfg.seed, cfg.restarts), label="em-gmm")


#==================================================================#
#  Pseudo-EM for the copula model
#==================================================================#
def pem_from(U: np.ndarray, theta0: GmmParams, cfg: EmConfig, grid: Optional[QuantileGridConfig] = None,
             trace: Optional[FitTrace] = None) -> Tuple[GmmParams, np.ndarray, FitTrace]:
    '''
    Alternate latent recovery and one EM step on the pseudo-likelihood.
    Each trace row holds the pseudo log-likelihood in `loglik` and the exact
    copula log-likelihood in `exact_loglik`; only the former is an EM
    objective, so only it is expected to rise.
    '''
    clock = Stopwatch()
    trace = trace if trace is not None else FitTrace()
    log_w = np.log(theta0.weights())
    means = np.array(theta0.means, dtype=float)
    covs = theta0.covariances()
    theta = theta0
    previous = None
    for it in range(cfg.max_iters + 1):
        Y, clamped = recover_latent_counted(U, theta, grid)
        if clamped:
            trace.warn("{} latent value(s) clamped at iteration {}".format(clamped, it))
        logprobs = gaussian_log_probs(Y, log_w, means, covs)
        norm = special.logsumexp(logprobs, axis=1)
        pseudo = float(np.sum(norm))
        exact = float(gmcm_exact_loglik(Y, theta))
        if not (np.isfinite(pseudo) and np.isfinite(exact)):
            raise SingularCovarianceError("Pseudo-EM log-likelihood became non-finite at iteration {}".format(it))
        trace.record(pseudo, 0.0, 1.0, clock.ms(), exact_loglik=exact)
        logger.iteration("pem iter {} pseudo {:.8f} exact {:.8f}".format(it, pseudo, exact))
        if previous is not None and relative_change(previous, pseudo) < cfg.tol:
            trace.converged = True
            break
        if it == cfg.max_iters:
            break
        previous = pseudo
        log_w, means, covs = _gmm_m_step(Y, np.exp(logprobs - norm[:, None]), _floor(Y, cfg))
        theta = _to_params(log_w, means, covs)
    return theta, Y, trace


def pem_gmcm(U, G: int, cfg: Optional[EmConfig] = None, grid: Optional[QuantileGridConfig] = None,
             trace_sinks: Optional[SinkFactory] = None) -> FitResult:
    '''
    Pseudo-EM from the same starting mixture the gradient copula fit uses
    for a given seed. The reported log-likelihood is the exact copula one.
    '''
    cfg = cfg or EmConfig()
    U = check_pseudo_obs(U)
    n = U.shape[0]
    if G < 1 or n <= G:
        raise ConfigError("Need G >= 1 and more rows than components (n={}, G={})".format(n, G))

    def one(seed):
        theta0, _ = init_gmcm_params(U, G, seed, grid)
        theta, Y, trace = pem_from(U, theta0, cfg, grid, FitTrace.for_seed(trace_sinks, seed))
        return FitResult(theta, trace, cluster_labels(Y, theta), trace[-1].exact_loglik, seed, "pem")

    return run_restarts(one, restart_seeds(cfg.seed, cfg.restarts), label="pem")


#==================================================================#
#  Factor-analyzer mixture EM
#==================================================================#
def _mfa_m_step(X: np.ndarray, resp: np.ndarray, theta: MfaParams, floor: float) -> MfaParams:
    n, p = X.shape
    G, q = theta.n_components, theta.n_factors
    X_sq = X ** 2
    Iq = np.eye(q)
    logits = np.empty(G)
    means = np.empty((G, p))
    loadings = np.empty((G, p, q))
    noise = np.empty((G, p))
    for g in range(G):
        W = theta.loadings[g]
        psi = theta.noise_sqrt[g] ** 2
        fac = W.T / psi
        try:
            cov_z = np.linalg.inv(Iq + fac @ W)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError("Latent factor covariance of component {} is singular".format(g))
        E_z = (X - theta.means[g]) @ fac.T @ cov_z
        z = np.append(E_z, np.ones((n, 1)), axis=1)
        wz = resp[:, g, None] * z
        wzX = wz.T @ X
        wzz = wz.T @ z
        mass = resp[:, g].sum()
        if mass < MIN_COMPONENT_MASS:
            raise RankDeficiencyError("Component {} lost all of its responsibility".format(g))
        wzz[:q, :q] += mass * cov_z
        if np.linalg.matrix_rank(wzz) < q + 1:
            raise RankDeficiencyError("Weighted factor scatter of component {} is singular".format(g))
        sol = np.linalg.solve(wzz, wzX)
        means[g] = sol[q, :]
        loadings[g] = sol[:q, :].T
        psi_new = (resp[:, g] @ X_sq - np.sum(sol * wzX, axis=0)) / mass
        noise[g] = np.sqrt(np.maximum(psi_new, max(floor, 1e-300)))
        logits[g] = np.log(mass / n)
    return MfaParams(logits, means, loadings, noise, False)


def em_mfa_from(X: np.ndarray, theta0: MfaParams, cfg: EmConfig, trace: Optional[FitTrace] = None) -> Tuple[MfaParams, FitTrace]:
    clock = Stopwatch()
    trace = trace if trace is not None else FitTrace()
    floor = _floor(X, cfg)
    theta = theta0
    previous = None
    for it in range(cfg.max_iters + 1):
        comps = log_joint(X, theta)
        norm = special.logsumexp(comps, axis=1)
        ll = float(np.sum(norm))
        if not np.isfinite(ll):
            raise RankDeficiencyError("EM log-likelihood became non-finite at iteration {}".format(it))
        trace.record(ll, 0.0, 1.0, clock.ms())
        logger.iteration("em mfa iter {} loglik {:.8f}".format(it, ll))
        if previous is not None and relative_change(previous, ll) < cfg.tol:
            trace.converged = True
            break
        if it == cfg.max_iters:
            break
        previous = ll
        theta = _mfa_m_step(X, np.exp(comps - norm[:, None]), theta, floor)
    return theta, trace


def em_mfa(X, G: int, q: int, cfg: Optional[EmConfig] = None, trace_sinks: Optional[SinkFactory] = None) -> FitResult:
    '''
    EM with expected factor moments in the E-step and the closed-form
    regression M-step. Refuses data with no more rows than columns, where
    the per-component scatter matrices cannot be full rank.
    '''
    cfg = cfg or EmConfig()
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if not 1 <= q < p:
        raise ConfigError("Need 1 <= q < p, got q={} with p={}".format(q, p))
    if n <= p:
        raise RankDeficiencyError("EM for factor-analyzer mixtures needs more rows than columns (n={}, p={})".format(n, p))
    if G < 1 or n <= G:
        raise ConfigError("Need G >= 1 and more rows than components (n={}, G={})".format(n, G))

    def one(seed):
        theta0 = init_mfa_params(X, G, q, make_rng(seed))
        theta, trace = em_mfa_from(X, theta0, cfg, FitTrace.for_seed(trace_sinks, seed))
        return FitResult(theta, trace, mfa_labels(X, theta), trace.final_loglik, seed, "em")

    return run_restarts(one, restart_seeds(cfg.seed, cfg.restarts), label="em-mfa")
