'''
Gaussian mixture copula model.

Data enter only through their column ranks (pseudo-observations). A fit
alternates between mapping the pseudo-observations to latent values
through the current mixture's marginal quantiles and taking an ascent
step on the exact copula log-likelihood with those latents held fixed.
Copula parameters are identifiable only up to a location-scale change of
each latent marginal; the raw parameters are reported as fitted.
'''
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.stats import rankdata

import autodiff
from errors import ConfigError, ConstantColumnError, DivergenceError, NumericalError
from logger import logger
from mixfit_settings import FitConfig, QuantileGridConfig
from mixture_density import (GmmParams, gmm_layout, gmm_logpdf, gmm_loglik, gmm_marginal_logpdf,
                             init_gmm_params, map_labels, marginal_quantiles, params_from_vector)
from optimize import Objective, line_search_backtrack, relative_change
from structures import FitResult, FitTrace, SinkFactory
from utils import Stopwatch, make_rng, restart_seeds, run_restarts

# Tolerated decrease when comparing log-likelihoods across latent refreshes
MONOTONE_SLACK = 1e-10


@dataclass
class GmcmState:
    pseudo_obs: np.ndarray
    latent: np.ndarray
    params: GmmParams


def rank_transform(X) -> np.ndarray:
    '''Column ranks scaled by n + 1, ties sharing their average rank.'''
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ConfigError("Expected an n x p matrix, got shape {}".format(X.shape))
    n, p = X.shape
    if n < 2:
        raise ConfigError("Need at least 2 rows to rank, got {}".format(n))
    U = np.empty_like(X)
    for j in range(p):
        column = X[:, j]
        if np.all(column == column[0]):
            raise ConstantColumnError(j)
        U[:, j] = rankdata(column, method="average") / (n + 1.0)
    return U


def check_pseudo_obs(U) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    if U.ndim != 2:
        raise ConfigError("Pseudo-observations must be an n x p matrix")
    if np.any((U <= 0.0) | (U >= 1.0)):
        raise ConfigError("Pseudo-observations must lie strictly inside (0, 1)")
    return U


def recover_latent_counted(U, theta: GmmParams, cfg: Optional[QuantileGridConfig] = None) -> Tuple[np.ndarray, int]:
    U = np.asarray(U, dtype=float)
    Y = np.empty_like(U)
    clamped = 0
    for j in range(U.shape[1]):
        Y[:, j], c = marginal_quantiles(U[:, j], j, theta, cfg)
        clamped += c
    return Y, clamped


def recover_latent(U, theta: GmmParams, cfg: Optional[QuantileGridConfig] = None) -> np.ndarray:
    '''Y_ij = inverse j-th marginal CDF of the mixture at U_ij.'''
    Y, clamped = recover_latent_counted(U, theta, cfg)
    if clamped:
        logger.warning("{} pseudo-observation(s) fell outside the quantile grid and were clamped".format(clamped))
    return Y


def gmcm_pseudo_loglik(Y, theta: GmmParams):
    return gmm_loglik(Y, theta)


def gmcm_log_density(Y, theta: GmmParams):
    '''
    Log copula density at each latent row: the joint mixture log-density
    minus the log marginal densities, all in log space.
    '''
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    lanes = gmm_logpdf(Y, theta)
    for j in range(Y.shape[1]):
        lanes = lanes - gmm_marginal_logpdf(Y[:, j], j, theta)
    return lanes


def gmcm_exact_loglik(Y, theta: GmmParams):
    '''Copula log-likelihood of the latent rows; differentiable in theta with Y held fixed.'''
    return autodiff.vsum(gmcm_log_density(Y, theta))


def cluster_labels(Y, theta: GmmParams) -> np.ndarray:
    return map_labels(Y, theta)


def reference_params(G: int, p: int) -> GmmParams:
    '''Zero means, identity factors, uniform weights.'''
    return GmmParams(np.zeros(G), np.zeros((G, p)), np.array([np.eye(p) for _ in range(G)]))


def init_gmcm_params(U, G: int, seed: int, grid: Optional[QuantileGridConfig] = None) -> Tuple[GmmParams, np.ndarray]:
    '''
    Starting mixture shared by every copula fitter: latents recovered under
    the reference mixture, means on G distinct random latent rows, identity
    factors and zero logits. Returns the parameters and those latents.
    '''
    U = check_pseudo_obs(U)
    Y0 = recover_latent(U, reference_params(G, U.shape[1]), grid)
    return init_gmm_params(Y0, G, make_rng(seed)), Y0


def _exact_objective(Y, layout):
    return Objective(lambda x: gmcm_exact_loglik(Y, params_from_vector(layout, x)), layout, name="gmcm")


def _safe_exact(Y, theta) -> float:
    try:
        f = float(gmcm_exact_loglik(Y, theta))
    except NumericalError:
        return -np.inf
    return f if np.isfinite(f) else -np.inf


def ascend_gmcm(U, theta0: GmmParams, fit: FitConfig, grid: Optional[QuantileGridConfig] = None,
                cov_param: str = "full", trace: Optional[FitTrace] = None) -> Tuple[GmcmState, FitTrace]:
    '''
    Alternating fit from theta0. With line search on, a step is first
    chosen by backtracking on the fixed-latent objective and then halved
    further until the objective re-evaluated with refreshed latents does
    not decrease, so the recorded exact log-likelihood is non-decreasing.
    '''
    clock = Stopwatch()
    trace = trace if trace is not None else FitTrace()
    U = check_pseudo_obs(U)
    G, p = theta0.n_components, theta0.dim
    layout = gmm_layout(G, p, cov_param)
    x = layout.pack(theta0.__dict__)

    Y, clamped = recover_latent_counted(U, params_from_vector(layout, x), grid)
    obj = _exact_objective(Y, layout)
    f, g = obj.value_and_grad(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise DivergenceError("Copula log-likelihood is non-finite at the starting point", best_x=x, trace=trace, params=params_from_vector(layout, x))
    trace.record(f, np.linalg.norm(g), 0.0, clock.ms())
    step = fit.learning_rate

    for it in range(1, fit.max_iters + 1):
        if not np.any(g):
            trace.converged = True
            break
        refresh = it % fit.latent_every == 0
        if fit.line_search:
            eta = line_search_backtrack(obj, x, g, fit, f=f, g=g, eta0=max(fit.learning_rate, 2.0 * step), trace=trace)
            accepted = False
            for _ in range(fit.max_halvings + 1):
                if eta == 0.0:
                    break
                x_new = x + eta * g
                theta_new = params_from_vector(layout, x_new)
                if refresh:
                    Y_new, clamped = recover_latent_counted(U, theta_new, grid)
                else:
                    Y_new = Y
                if _safe_exact(Y_new, theta_new) >= f - MONOTONE_SLACK:
                    accepted = True
                    break
                eta *= 0.5
            if not accepted:
                message = "copula step rejected after latent refresh at iteration {}".format(it)
                logger.debug(message)
                trace.warn(message)
                trace.stop_stalled(np.linalg.norm(g), f)
                break
            step = eta
        else:
            step = fit.learning_rate
            x_new = x + step * g
            Y_new = recover_latent_counted(U, params_from_vector(layout, x_new), grid)[0] if refresh else Y
        if clamped:
            trace.warn("{} latent value(s) clamped at iteration {}".format(clamped, it))
            clamped = 0

        obj_new = _exact_objective(Y_new, layout)
        try:
            f_new, g_new = obj_new.value_and_grad(x_new)
        except NumericalError as e:
            raise DivergenceError("Copula fit failed at iteration {}: {}".format(it, e), best_x=x, trace=trace, params=params_from_vector(layout, x))
        if not np.isfinite(f_new) or not np.all(np.isfinite(g_new)):
            raise DivergenceError("Copula log-likelihood became non-finite at iteration {}".format(it), best_x=x, trace=trace, params=params_from_vector(layout, x))
        trace.record(f_new, np.linalg.norm(g_new), step, clock.ms())
        logger.iteration("gmcm iter {} exact loglik {:.8f} |g| {:.3e} step {:.3e}".format(it, f_new, np.linalg.norm(g_new), step))
        converged = relative_change(f, f_new) < fit.tol
        x, f, g, Y, obj = x_new, f_new, g_new, Y_new, obj_new
        if converged:
            trace.converged = True
            break
    return GmcmState(U, Y, params_from_vector(layout, x)), trace


def fit_gmcm_auto(U, G: int, fit: Optional[FitConfig] = None, grid: Optional[QuantileGridConfig] = None,
                  cov_param: str = "full", trace_sinks: Optional[SinkFactory] = None) -> FitResult:
    fit = fit or FitConfig.for_gmcm()
    U = check_pseudo_obs(U)
    n = U.shape[0]
    if G < 1 or n <= G:
        raise ConfigError("Need G >= 1 and more rows than components (n={}, G={})".format(n, G))

    def one(seed):
        theta0, _ = init_gmcm_params(U, G, seed, grid)
        state, trace = ascend_gmcm(U, theta0, fit, grid, cov_param, FitTrace.for_seed(trace_sinks, seed))
        return FitResult(state.params, trace, cluster_labels(state.latent, state.params), trace.final_loglik, seed, "auto")

    return run_restarts(one, restart_seeds(fit.seed, fit.restarts), label="gmcm")
