'''
Gaussian mixture densities over unconstrained parameters.

Weights come from logits through a softmax and every covariance is
assembled as U U^T, so any real-valued parameter vector is a valid
mixture. The density functions are written once for plain numbers and
for autodiff Vars: parameters may be float arrays or object arrays of
Vars, and data arguments may be a single point (p,) or a block of rows
(n, p), in which case the result has one lane per row.
'''
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import special

import autodiff
from autodiff import Var, value_of
from errors import ConfigError, DegenerateMarginalError, DivergenceError, SingularCovarianceError
from logger import logger
from mixfit_settings import FitConfig, QuantileGridConfig
from optimize import Objective, ParamLayout, maximize
from structures import FitResult, FitTrace, SinkFactory
from utils import make_rng, restart_seeds, run_restarts

LOG_2PI = math.log(2.0 * math.pi)
JITTER_SCALE = 1e-8
MIN_MARGINAL_SD = 1e-12


@dataclass
class GmmParams:
    logits: np.ndarray       # (G,)
    means: np.ndarray        # (G, p)
    cov_factors: np.ndarray  # (G, p, p), Sigma_g = U_g U_g^T

    @property
    def n_components(self) -> int:
        return len(self.logits)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def weights(self) -> np.ndarray:
        return softmax_weights(self.logits)

    def covariances(self) -> np.ndarray:
        return np.array([assemble_cov(u) for u in self.cov_factors])

    def to_dict(self) -> dict:
        return {
            "logits": [float(a) for a in self.logits],
            "means": np.asarray(self.means, dtype=float).tolist(),
            "cov_factors": np.asarray(self.cov_factors, dtype=float).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GmmParams":
        try:
            logits = np.asarray(data["logits"], dtype=float)
            means = np.asarray(data["means"], dtype=float)
            factors = np.asarray(data["cov_factors"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError("Malformed mixture parameters: {}".format(e))
        G = len(logits)
        if means.ndim != 2 or means.shape[0] != G or factors.shape != (G, means.shape[1], means.shape[1]):
            raise ConfigError("Inconsistent mixture parameter shapes: logits {}, means {}, cov_factors {}".format(
                logits.shape, means.shape, factors.shape))
        return cls(logits, means, factors)

    @classmethod
    def from_covariances(cls, weights, means, covariances) -> "GmmParams":
        factors = np.array([np.linalg.cholesky(np.asarray(s, dtype=float)) for s in covariances])
        return cls(np.log(np.asarray(weights, dtype=float)), np.asarray(means, dtype=float), factors)


#==================================================================#
#  Small helpers shared by the Var-aware linear algebra
#==================================================================#
def is_zero(v) -> bool:
    return not isinstance(v, Var) and np.ndim(v) == 0 and v == 0.0


def dot_entries(a, b):
    total = 0.0
    for x, y in zip(a, b):
        if is_zero(x) or is_zero(y):
            continue
        total = x * y if is_zero(total) else total + x * y
    return total


def minus_entry(a, b):
    return a if is_zero(b) else a - b


def log_softmax(alpha) -> list:
    lse = autodiff.logsumexp(list(alpha))
    return [a - lse for a in alpha]


def softmax_weights(alpha) -> np.ndarray:
    '''pi_g = exp(alpha_g - logsumexp(alpha)); shift invariant and overflow safe.'''
    alpha = np.asarray(alpha, dtype=float)
    return np.exp(alpha - special.logsumexp(alpha))


def assemble_cov(U) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    return U @ U.T


def _cov_entries(U) -> list:
    p = len(U)
    rows = [[U[i, k] for k in range(p)] for i in range(p)]
    S = [[0.0] * p for _ in range(p)]
    for i in range(p):
        for j in range(i + 1):
            S[i][j] = dot_entries(rows[i], rows[j])
            S[j][i] = S[i][j]
    return S


def _jitter(S: list) -> list:
    p = len(S)
    numeric = np.array([[float(value_of(s)) for s in row] for row in S])
    if not np.all(np.isfinite(numeric)):
        raise SingularCovarianceError("Covariance has non-finite entries")
    try:
        np.linalg.cholesky(numeric)
        return S
    except np.linalg.LinAlgError:
        pass
    eps = JITTER_SCALE * np.trace(numeric) / p
    try:
        if eps <= 0.0:
            raise np.linalg.LinAlgError("zero trace")
        np.linalg.cholesky(numeric + eps * np.eye(p))
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("Covariance is not positive definite even after adding {:.3e} to its diagonal".format(eps))
    logger.debug("Added jitter {:.3e} to a near-singular covariance".format(eps))
    S = [list(row) for row in S]
    for j in range(p):
        S[j][j] = S[j][j] + eps
    return S


def cholesky_entries(S: list) -> Tuple[list, list]:
    '''Lower Cholesky factor of a covariance given as nested lists, plus its squared pivots.'''
    p = len(S)
    L = [[0.0] * p for _ in range(p)]
    pivots = []
    try:
        for j in range(p):
            d = minus_entry(S[j][j], dot_entries(L[j][:j], L[j][:j]))
            pivots.append(d)
            L[j][j] = autodiff.sqrt(d)
            for i in range(j + 1, p):
                L[i][j] = minus_entry(S[i][j], dot_entries(L[i][:j], L[j][:j])) / L[j][j]
    except autodiff.AdDomainError as e:
        raise SingularCovarianceError("Cholesky factorization failed: {}".format(e))
    return L, pivots


def mvn_logpdf_cov(x, mu, S: list):
    '''Normal log-density for a covariance given entrywise (nested lists of numbers or Vars).'''
    p = len(S)
    L, pivots = cholesky_entries(_jitter(S))
    x = np.asarray(x, dtype=float)
    z = []
    for j in range(p):
        diff = (x[j] if x.ndim == 1 else x[:, j]) - mu[j]
        z.append(minus_entry(diff, dot_entries(L[j][:j], z)) / L[j][j])
    quad = dot_entries(z, z)
    logdet = autodiff.log(pivots[0])
    for d in pivots[1:]:
        logdet = logdet + autodiff.log(d)
    return -0.5 * p * LOG_2PI - 0.5 * logdet - 0.5 * quad


def mvn_logpdf(x, mu, U):
    '''
    -1/2 [p log 2pi + log det Sigma + (x - mu)^T Sigma^-1 (x - mu)] with
    Sigma = U U^T, through a triangular factorization of Sigma.
    '''
    return mvn_logpdf_cov(x, mu, _cov_entries(U if isinstance(U, np.ndarray) else np.array(U, dtype=object)))


def component_logpdfs(x, theta: GmmParams) -> list:
    '''log pi_g + log phi(x; mu_g, Sigma_g) for every component g.'''
    logw = log_softmax(theta.logits)
    return [logw[g] + mvn_logpdf(x, theta.means[g], theta.cov_factors[g]) for g in range(theta.n_components)]


def gmm_logpdf(x, theta: GmmParams):
    return autodiff.logsumexp(component_logpdfs(x, theta))


def gmm_loglik(X, theta: GmmParams):
    '''Sum of gmm_logpdf over the rows of X.'''
    return autodiff.vsum(gmm_logpdf(X, theta))


def component_log_densities(X, theta: GmmParams) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.column_stack([np.broadcast_to(c, (X.shape[0],)) for c in component_logpdfs(X, theta)])


def map_labels(X, theta: GmmParams) -> np.ndarray:
    # argmax returns the lowest index on ties
    return np.argmax(component_log_densities(X, theta), axis=1)


#==================================================================#
#  Univariate marginals
#==================================================================#
def _check_dim(j: int, theta: GmmParams) -> None:
    if not 0 <= j < theta.dim:
        raise ValueError("Dimension index {} out of range for p={}".format(j, theta.dim))


def marginal_components(j: int, theta: GmmParams) -> list:
    '''(log pi_g, mu_gj, Sigma_g[j, j]) per component, the variance taken from the assembled covariance.'''
    _check_dim(j, theta)
    logw = log_softmax(theta.logits)
    out = []
    for g in range(theta.n_components):
        row = [theta.cov_factors[g][j, k] for k in range(theta.dim)]
        var = dot_entries(row, row)
        if math.sqrt(max(float(value_of(var)), 0.0)) < MIN_MARGINAL_SD:
            raise DegenerateMarginalError("Component {} has zero spread along dimension {}".format(g, j))
        out.append((logw[g], theta.means[g][j], var))
    return out


def gmm_marginal_cdf(y, j: int, theta: GmmParams):
    total = 0.0
    for logw, mu, var in marginal_components(j, theta):
        term = autodiff.exp(logw) * autodiff.std_normal_cdf((y - mu) / autodiff.sqrt(var))
        total = term if is_zero(total) else total + term
    return total


def gmm_marginal_logpdf(y, j: int, theta: GmmParams):
    terms = []
    for logw, mu, var in marginal_components(j, theta):
        diff = y - mu
        terms.append(logw - 0.5 * autodiff.log(var) - 0.5 * (diff * diff) / var - 0.5 * LOG_2PI)
    return autodiff.logsumexp(terms)


def gmm_marginal_pdf(y, j: int, theta: GmmParams):
    return autodiff.exp(gmm_marginal_logpdf(y, j, theta))


#==================================================================#
#  Grid-search quantile inversion
#==================================================================#
def _numeric_marginal(j: int, theta: GmmParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    parts = marginal_components(j, theta)
    w = np.exp(np.array([float(p[0]) for p in parts]))
    mu = np.array([float(p[1]) for p in parts])
    sd = np.sqrt(np.array([float(p[2]) for p in parts]))
    return w, mu, sd


def _mixture_cdf(y: np.ndarray, w: np.ndarray, mu: np.ndarray, sd: np.ndarray) -> np.ndarray:
    return special.ndtr((np.asarray(y)[..., None] - mu) / sd) @ w


def marginal_quantiles(u, j: int, theta: GmmParams, cfg: Optional[QuantileGridConfig] = None) -> Tuple[np.ndarray, int]:
    '''
    Vectorized inverse of the j-th marginal CDF. The CDF is tabulated on a
    grid spanning every component's mean +- tail_width standard deviations,
    inverted by linear interpolation and refined by bisection inside the
    bracketing cell. Returns the quantiles and how many inputs were clamped
    to the grid's CDF range.
    '''
    cfg = cfg or QuantileGridConfig()
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("Quantile levels must lie strictly inside (0, 1)")
    w, mu, sd = _numeric_marginal(j, theta)
    grid = np.linspace(np.min(mu - cfg.tail_width * sd), np.max(mu + cfg.tail_width * sd), cfg.points)
    cdf = np.maximum.accumulate(_mixture_cdf(grid, w, mu, sd))

    outside = (u < cdf[0]) | (u > cdf[-1])
    clamped = int(np.count_nonzero(outside))
    uc = np.clip(u, cdf[0], cdf[-1])

    idx = np.searchsorted(cdf, uc, side="left")
    a = grid[np.maximum(idx - 1, 0)]
    b = grid[np.minimum(idx, cfg.points - 1)]
    for _ in range(cfg.bisection_steps):
        mid = 0.5 * (a + b)
        below = _mixture_cdf(mid, w, mu, sd) < uc
        a = np.where(below, mid, a)
        b = np.where(below, b, mid)
    fa = _mixture_cdf(a, w, mu, sd)
    fb = _mixture_cdf(b, w, mu, sd)
    span = fb - fa
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(span > 0.0, (uc - fa) / span, 0.5)
    y = a + np.clip(frac, 0.0, 1.0) * (b - a)
    return y, clamped


def gmm_marginal_quantile(u, j: int, theta: GmmParams, cfg: Optional[QuantileGridConfig] = None):
    y, clamped = marginal_quantiles(u, j, theta, cfg)
    if clamped:
        logger.warning("{} quantile level(s) fell outside the grid's CDF range on dimension {} and were clamped".format(clamped, j))
    return float(y) if np.ndim(y) == 0 else y


#==================================================================#
#  Gradient fitting of a plain mixture
#==================================================================#
def gmm_layout(G: int, p: int, cov_param: str = "full") -> ParamLayout:
    layout = ParamLayout().add("logits", (G,)).add("means", (G, p))
    if cov_param == "full":
        layout.add("cov_factors", (G, p, p))
    elif cov_param == "cholesky":
        layout.add("cov_factors", (G, p, p), mask=np.broadcast_to(np.tril(np.ones((p, p), dtype=bool)), (G, p, p)).copy())
    else:
        raise ConfigError("Unknown covariance parametrization {!r}".format(cov_param))
    return layout


def params_from_vector(layout: ParamLayout, x) -> GmmParams:
    parts = layout.unpack(x)
    return GmmParams(parts["logits"], parts["means"], parts["cov_factors"])


def init_gmm_params(Y: np.ndarray, G: int, rng: np.random.Generator, factor_scale=None) -> GmmParams:
    '''Means on G distinct random rows, zero logits, diagonal factors (identity unless scaled).'''
    n, p = Y.shape
    if n < G:
        raise ConfigError("Need at least {} rows to seed {} components, got {}".format(G, G, n))
    rows = rng.choice(n, size=G, replace=False)
    scale = np.ones(p) if factor_scale is None else np.asarray(factor_scale, dtype=float)
    factors = np.array([np.diag(scale) for _ in range(G)])
    return GmmParams(np.zeros(G), np.array(Y[np.sort(rows)], dtype=float), factors)


def fit_gmm_auto(X, G: int, fit: Optional[FitConfig] = None, method: str = "gradient", cov_param: str = "full",
                 trace_sinks: Optional[SinkFactory] = None) -> FitResult:
    '''Maximize the mixture log-likelihood of X directly with the autodiff gradient.'''
    fit = fit or FitConfig.for_gmm(newton=method in ("newton", "newton-cg", "auto-newton"))
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if G < 1 or n <= G:
        raise ConfigError("Need G >= 1 and more rows than components (n={}, G={})".format(n, G))
    layout = gmm_layout(G, p, cov_param)
    obj = Objective(lambda x: gmm_loglik(X, params_from_vector(layout, x)), layout, name="gmm")
    scale = np.std(X, axis=0)
    scale[scale == 0.0] = 1.0
    label = "auto-newton" if method in ("newton", "newton-cg", "auto-newton") else "auto-gd"

    def one(seed):
        theta0 = init_gmm_params(X, G, make_rng(seed), factor_scale=scale)
        try:
            x, trace = maximize(obj, layout.pack(theta0.__dict__), fit, method, FitTrace.for_seed(trace_sinks, seed))
        except DivergenceError as e:
            if e.best_x is not None:
                e.params = params_from_vector(layout, e.best_x)
            raise
        theta = params_from_vector(layout, x)
        return FitResult(theta, trace, map_labels(X, theta), trace.final_loglik, seed, label)

    return run_restarts(one, restart_seeds(fit.seed, fit.restarts), label="gmm")
