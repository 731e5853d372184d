'''
Mixtures of factor analyzers, fitted by maximizing the exact likelihood.

Component covariances are Lambda_g Lambda_g^T + diag(psi_g)^2 where psi_g
is an unconstrained square root of the noise variances, so every
parameter vector gives a valid model. No sample covariance is ever
inverted, which is what lets the fit run with fewer rows than columns.
'''
import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

import autodiff
from autodiff import value_of
from errors import ConfigError, DivergenceError
from mixfit_settings import FitConfig
from mixture_density import (LOG_2PI, GmmParams, cholesky_entries, dot_entries, is_zero, log_softmax, minus_entry,
                             mvn_logpdf_cov)
from optimize import Objective, ParamLayout, maximize
from structures import FitResult, FitTrace, SinkFactory
from utils import make_rng, restart_seeds, run_restarts

INIT_LOADING_SD = 0.1


@dataclass
class MfaParams:
    logits: np.ndarray      # (G,)
    means: np.ndarray       # (G, p)
    loadings: np.ndarray    # (G, p, q)
    noise_sqrt: np.ndarray  # (G, p); all entries of a row equal when isotropic
    isotropic: bool = False

    @property
    def n_components(self) -> int:
        return len(self.logits)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[2]

    def weights(self) -> np.ndarray:
        return np.exp(np.asarray(self.logits, dtype=float) - special.logsumexp(np.asarray(self.logits, dtype=float)))

    def covariances(self) -> np.ndarray:
        return np.array([mfa_cov(self.loadings[g], self.noise_sqrt[g]) for g in range(self.n_components)])

    def to_dict(self) -> dict:
        return {
            "logits": [float(a) for a in self.logits],
            "means": np.asarray(self.means, dtype=float).tolist(),
            "loadings": np.asarray(self.loadings, dtype=float).tolist(),
            "noise_sqrt": np.asarray(self.noise_sqrt, dtype=float).tolist(),
            "isotropic": bool(self.isotropic),
            "free_parameters": free_parameter_count(self.n_components, self.dim, self.n_factors, self.isotropic),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MfaParams":
        try:
            logits = np.asarray(data["logits"], dtype=float)
            means = np.asarray(data["means"], dtype=float)
            loadings = np.asarray(data["loadings"], dtype=float)
            noise = np.asarray(data["noise_sqrt"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError("Malformed factor-analyzer parameters: {}".format(e))
        G = len(logits)
        if means.ndim != 2 or loadings.ndim != 3 or loadings.shape[:2] != means.shape or noise.shape != means.shape or means.shape[0] != G:
            raise ConfigError("Inconsistent factor-analyzer parameter shapes")
        return cls(logits, means, loadings, noise, bool(data.get("isotropic", False)))


def mfa_cov(loadings, noise_sqrt) -> np.ndarray:
    '''Lambda Lambda^T + diag(psi^2).'''
    L = np.asarray(loadings, dtype=float)
    psi = np.asarray(noise_sqrt, dtype=float)
    if L.shape[1] >= L.shape[0]:
        raise ConfigError("Factor count q={} must be below the dimension p={}".format(L.shape[1], L.shape[0]))
    return L @ L.T + np.diag(psi * psi)


def _cov_entries(loadings, noise_sqrt) -> list:
    p, q = loadings.shape
    rows = [[loadings[i, k] for k in range(q)] for i in range(p)]
    S = [[0.0] * p for _ in range(p)]
    for i in range(p):
        for j in range(i + 1):
            S[i][j] = dot_entries(rows[i], rows[j])
            S[j][i] = S[i][j]
        psi = noise_sqrt[i]
        S[i][i] = psi * psi if is_zero(S[i][i]) else S[i][i] + psi * psi
    return S


def _dense_logpdf(X, mu, loadings, noise_sqrt):
    return mvn_logpdf_cov(X, mu, _cov_entries(loadings, noise_sqrt))


def mvn_logpdf_lowrank(X, mu, loadings, noise_sqrt):
    '''
    Normal log-density with covariance Lambda Lambda^T + diag(psi^2) using
    the Woodbury identity and the matrix determinant lemma, so only the
    q x q matrix M = I + Lambda^T Psi^-1 Lambda is factorized. Falls back to
    the dense factorization when a noise entry is exactly zero.
    '''
    p, q = loadings.shape
    if any(float(value_of(s)) ** 2 == 0.0 for s in noise_sqrt):
        return _dense_logpdf(X, mu, loadings, noise_sqrt)
    X = np.asarray(X, dtype=float)
    var = [s * s for s in noise_sqrt]
    inv = [1.0 / v for v in var]

    M = [[0.0] * q for _ in range(q)]
    for k in range(q):
        for l in range(k + 1):
            entry = dot_entries([loadings[i, k] * inv[i] for i in range(p)], [loadings[i, l] for i in range(p)])
            M[k][l] = entry + 1.0 if k == l else entry
            M[l][k] = M[k][l]
    L, pivots = cholesky_entries(M)

    resid = [(X[i] if X.ndim == 1 else X[:, i]) - mu[i] for i in range(p)]
    scaled = [r * w for r, w in zip(resid, inv)]
    quad = dot_entries(resid, scaled)
    c = []
    for k in range(q):
        b = dot_entries([loadings[i, k] for i in range(p)], scaled)
        c.append(minus_entry(b, dot_entries(L[k][:k], c)) / L[k][k])
    quad = minus_entry(quad, dot_entries(c, c))

    logdet = autodiff.log(var[0])
    for v in var[1:]:
        logdet = logdet + autodiff.log(v)
    for d in pivots:
        logdet = logdet + autodiff.log(d)
    return -0.5 * p * LOG_2PI - 0.5 * logdet - 0.5 * quad


def component_logpdfs(X, theta: MfaParams) -> list:
    logw = log_softmax(theta.logits)
    return [logw[g] + mvn_logpdf_lowrank(X, theta.means[g], theta.loadings[g], theta.noise_sqrt[g])
            for g in range(theta.n_components)]


def mfa_loglik(X, theta: MfaParams):
    '''Sum over rows of log sum_g pi_g N(x; mu_g, Lambda_g Lambda_g^T + Psi_g).'''
    X = np.asarray(X, dtype=float)
    return autodiff.vsum(autodiff.logsumexp(component_logpdfs(X, theta)))


def log_joint(X, theta: MfaParams) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.column_stack([np.broadcast_to(c, (X.shape[0],)) for c in component_logpdfs(X, theta)])


def mfa_responsibilities(X, theta: MfaParams) -> np.ndarray:
    comps = log_joint(X, theta)
    return np.exp(comps - special.logsumexp(comps, axis=1, keepdims=True))


def mfa_labels(X, theta: MfaParams) -> np.ndarray:
    return np.argmax(log_joint(X, theta), axis=1)


def mfa_to_gmm(theta: MfaParams) -> GmmParams:
    '''Equivalent full-covariance mixture with Cholesky factors of each component covariance.'''
    factors = np.array([np.linalg.cholesky(s) for s in theta.covariances()])
    return GmmParams(np.array(theta.logits, dtype=float), np.array(theta.means, dtype=float), factors)


#==================================================================#
#  Parameter layout and fitting
#==================================================================#
def mfa_layout(G: int, p: int, q: int, isotropic: bool = False) -> ParamLayout:
    layout = ParamLayout().add("logits", (G,)).add("means", (G, p)).add("loadings", (G, p, q))
    layout.add("noise_sqrt", (G,) if isotropic else (G, p))
    return layout


def free_parameter_count(G: int, p: int, q: int, isotropic: bool = False) -> int:
    return mfa_layout(G, p, q, isotropic).size


def params_from_vector(layout: ParamLayout, x, isotropic: bool = False) -> MfaParams:
    parts = layout.unpack(x)
    noise = parts["noise_sqrt"]
    if isotropic:
        p = parts["means"].shape[1]
        expanded = np.empty((len(noise), p), dtype=noise.dtype)
        for g in range(len(noise)):
            expanded[g, :] = noise[g]
        noise = expanded
    return MfaParams(parts["logits"], parts["means"], parts["loadings"], noise, isotropic)


def params_to_vector(layout: ParamLayout, theta: MfaParams) -> np.ndarray:
    noise = np.asarray(theta.noise_sqrt, dtype=float)
    if theta.isotropic:
        noise = noise[:, 0]
    return layout.pack({"logits": theta.logits, "means": theta.means, "loadings": theta.loadings, "noise_sqrt": noise})


def init_mfa_params(X: np.ndarray, G: int, q: int, rng: np.random.Generator, isotropic: bool = False) -> MfaParams:
    '''Means on G random rows, small random loadings, noise at the column spreads, zero logits.'''
    n, p = X.shape
    rows = rng.choice(n, size=G, replace=False)
    loadings = rng.normal(0.0, INIT_LOADING_SD, size=(G, p, q))
    sd = np.std(X, axis=0)
    sd[sd == 0.0] = 1.0
    if isotropic:
        sd = np.full(p, float(np.mean(sd)))
    return MfaParams(np.zeros(G), np.array(X[np.sort(rows)], dtype=float), loadings, np.tile(sd, (G, 1)), isotropic)


def _check_shapes(X, G: int, q: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ConfigError("Expected an n x p data matrix")
    n, p = X.shape
    if not 1 <= q < p:
        raise ConfigError("Need 1 <= q < p, got q={} with p={}".format(q, p))
    if n < 2 or G < 1 or n < G:
        raise ConfigError("Need n >= 2 rows and at least G={} rows, got n={}".format(G, n))
    return X


def fit_mfa_auto(X, G: int, q: int, fit: Optional[FitConfig] = None, method: str = "gradient",
                 isotropic: bool = False, trace_sinks: Optional[SinkFactory] = None) -> FitResult:
    '''
    Maximize the mixture likelihood over (logits, means, loadings, noise
    square roots) by gradient ascent or Newton-CG. Fewer rows than
    columns is fine.
    '''
    newton = method in ("newton", "newton-cg", "auto-newton")
    fit = fit or FitConfig.for_mfa(newton=newton)
    X = _check_shapes(X, G, q)
    p = X.shape[1]
    if newton and fit.cg_max_iters is None:
        fit = copy.copy(fit)
        fit.cg_max_iters = p + q
    layout = mfa_layout(G, p, q, isotropic)
    obj = Objective(lambda x: mfa_loglik(X, params_from_vector(layout, x, isotropic)), layout, name="mfa")

    def one(seed):
        theta0 = init_mfa_params(X, G, q, make_rng(seed), isotropic)
        try:
            x, trace = maximize(obj, params_to_vector(layout, theta0), fit, "newton" if newton else "gradient",
                                FitTrace.for_seed(trace_sinks, seed))
        except DivergenceError as e:
            if e.best_x is not None:
                e.params = params_from_vector(layout, e.best_x, isotropic)
            raise
        theta = params_from_vector(layout, x, isotropic)
        return FitResult(theta, trace, mfa_labels(X, theta), trace.final_loglik, seed, "auto-newton" if newton else "auto-gd")

    return run_restarts(one, restart_seeds(fit.seed, fit.restarts), label="mfa")
