'''
Maximizers over unconstrained parameter vectors.

Everything here maximizes; a log-likelihood goes in as is and every number
written to a FitTrace is a log-likelihood.
'''
import math
from collections import OrderedDict
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

import autodiff
from errors import DivergenceError, NumericalError
from logger import logger
from mixfit_settings import FitConfig
from structures import FitTrace
from utils import Stopwatch

# Relative CG residual of an exact Newton solve
CG_RTOL = 1e-12


class ParamLayout(object):
    '''
    Named slices of a flat parameter vector. A slice may carry a boolean
    mask of free entries; masked-out entries unpack as 0.0 and have no
    slot in the vector.
    '''

    def __init__(self):
        self.entries = OrderedDict()
        self.size = 0

    def add(self, name: str, shape, mask: Optional[np.ndarray] = None) -> "ParamLayout":
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if np.ndim(shape) else (int(shape),)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != shape:
                raise ValueError("Mask shape {} does not match {}".format(mask.shape, shape))
            count = int(mask.sum())
        else:
            count = int(np.prod(shape))
        self.entries[name] = (self.size, count, shape, mask)
        self.size += count
        return self

    def names(self):
        return list(self.entries.keys())

    def slice(self, name: str) -> slice:
        start, count, _, _ = self.entries[name]
        return slice(start, start + count)

    def pack(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        x = np.zeros(self.size)
        for name, (start, count, shape, mask) in self.entries.items():
            v = np.asarray(values[name], dtype=float).reshape(shape)
            x[start:start + count] = v[mask] if mask is not None else v.ravel()
        return x

    def unpack(self, x) -> Dict[str, np.ndarray]:
        '''
        Float vectors unpack to float arrays; sequences of tape Vars unpack
        to object arrays of Vars (with 0.0 in masked-out slots).
        '''
        numeric = isinstance(x, np.ndarray) and x.dtype != object
        if not numeric:
            flat = np.empty(len(x), dtype=object)
            for i, v in enumerate(x):
                flat[i] = v
            x = flat
        out = {}
        for name, (start, count, shape, mask) in self.entries.items():
            chunk = x[start:start + count]
            if mask is None:
                out[name] = chunk.reshape(shape)
            else:
                full = np.zeros(shape) if numeric else np.full(shape, 0.0, dtype=object)
                full[mask] = chunk
                out[name] = full
        return out


class Objective(object):
    '''
    A scalar function of the flat parameter vector together with its
    layout. `fn` receives either a float vector or a list of tape Vars and
    must return a scalar of the same kind.
    '''

    def __init__(self, fn: autodiff.DiffFn, layout: ParamLayout, name: str = "objective"):
        self.fn = fn
        self.layout = layout
        self.name = name

    def value(self, x) -> float:
        return float(self.fn(np.asarray(x, dtype=float)))

    def safe_value(self, x) -> float:
        # Trial points that leave the domain count as -inf so a line search just shrinks
        try:
            f = self.value(x)
        except (NumericalError, FloatingPointError, OverflowError, ZeroDivisionError):
            return -math.inf
        return f if math.isfinite(f) else -math.inf

    def value_and_grad(self, x) -> Tuple[float, np.ndarray]:
        return autodiff.grad(self.fn, np.asarray(x, dtype=float))

    def hvp(self, x, v) -> np.ndarray:
        return autodiff.hvp(self.fn, x, v)

    def linearize(self, x) -> Tuple[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        '''Value, gradient and a Hessian-vector closure that reuses one recorded tape.'''
        tape, out = autodiff.record(self.fn, np.asarray(x, dtype=float))
        if not isinstance(out, autodiff.Var):
            zeros = np.zeros(len(tape.input_indices))
            return float(out), zeros, lambda v: np.zeros_like(zeros)
        adjoints = tape.backward(out)
        g = np.array([float(adjoints[i]) for i in tape.input_indices])
        return float(out.value), g, lambda v: tape.hessian_vector(out, v)


def relative_change(f_old: float, f_new: float) -> float:
    return abs(f_new - f_old) / (1.0 + abs(f_old))


def _check_finite(f, g, best_x, trace, where):
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise DivergenceError("Objective became non-finite at {}".format(where), best_x=best_x, trace=trace)


#==================================================================#
# Backtracking line search (Armijo sufficient increase)
#==================================================================#
def line_search_backtrack(obj: Objective, x: np.ndarray, d: np.ndarray, cfg: FitConfig,
                          f: Optional[float] = None, g: Optional[np.ndarray] = None,
                          eta0: Optional[float] = None, trace: Optional[FitTrace] = None) -> float:
    if f is None or g is None:
        f, g = obj.value_and_grad(x)
    eta0 = cfg.initial_step if eta0 is None else eta0
    slope = float(np.dot(g, d))
    if not slope > 0.0:
        message = "line search got a non-ascent direction (slope {:.3e}); returning step 0".format(slope)
        logger.warning(message)
        if trace is not None:
            trace.warn(message)
        return 0.0
    for k in range(cfg.max_halvings + 1):
        eta = eta0 * 2.0 ** (-k)
        f_trial = obj.safe_value(x + eta * d)
        if f_trial >= f + cfg.armijo_c * eta * slope:
            return eta
    message = "line search stalled after {} halvings".format(cfg.max_halvings)
    logger.warning(message)
    if trace is not None:
        trace.warn(message)
    return 0.0


#==================================================================#
# Gradient ascent, fixed rate or line searched
#==================================================================#
def gradient_ascent(obj: Objective, x0, cfg: FitConfig, trace: Optional[FitTrace] = None) -> Tuple[np.ndarray, FitTrace]:
    clock = Stopwatch()
    trace = trace if trace is not None else FitTrace()
    x = np.array(x0, dtype=float)
    f, g = obj.value_and_grad(x)
    _check_finite(f, g, x, trace, "the starting point")
    trace.record(f, np.linalg.norm(g), 0.0, clock.ms())
    best_x, best_f = x.copy(), f
    step = cfg.learning_rate

    for it in range(1, cfg.max_iters + 1):
        if not np.any(g):
            trace.converged = True
            break
        if cfg.line_search:
            # Let the trial step grow back after earlier reductions
            eta0 = max(cfg.learning_rate, 2.0 * step)
            step = line_search_backtrack(obj, x, g, cfg, f=f, g=g, eta0=eta0, trace=trace)
            if step == 0.0:
                trace.stop_stalled(np.linalg.norm(g), f)
                break
        else:
            step = cfg.learning_rate
        x_new = x + step * g
        try:
            f_new, g_new = obj.value_and_grad(x_new)
        except NumericalError as e:
            raise DivergenceError("Objective failed at iteration {}: {}".format(it, e), best_x=best_x, trace=trace)
        _check_finite(f_new, g_new, best_x, trace, "iteration {}".format(it))
        trace.record(f_new, np.linalg.norm(g_new), step, clock.ms())
        logger.iteration("{} iter {} loglik {:.8f} |g| {:.3e} step {:.3e}".format(obj.name, it, f_new, np.linalg.norm(g_new), step))
        converged = relative_change(f, f_new) < cfg.tol
        x, f, g = x_new, f_new, g_new
        if f > best_f:
            best_x, best_f = x.copy(), f
        if converged:
            trace.converged = True
            break
    return (x if cfg.line_search else best_x), trace


#==================================================================#
# Truncated conjugate gradient on A d = b with A = -H
#==================================================================#
def truncated_cg(apply_a: Callable[[np.ndarray], np.ndarray], b: np.ndarray, max_iters: int, rtol: float) -> Tuple[np.ndarray, bool]:
    '''
    Returns the CG iterate and whether non-positive curvature cut it short.
    On non-positive curvature at the first iteration the right-hand side
    itself is returned (steepest ascent).
    '''
    d = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(np.dot(r, r))
    tol = rtol * math.sqrt(rr)
    for i in range(max_iters):
        ap = apply_a(p)
        curvature = float(np.dot(p, ap))
        if curvature <= 0.0:
            if i == 0:
                return b.copy(), True
            return d, True
        alpha = rr / curvature
        d = d + alpha * p
        r = r - alpha * ap
        rr_new = float(np.dot(r, r))
        if math.sqrt(rr_new) <= tol:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return d, False


def cg_tolerance(cfg: FitConfig, gnorm: float) -> float:
    '''
    Relative residual at which CG stops. A fixed `cg_forcing` wins; the
    inexact-Newton sequence min(0.5, sqrt(|g|)) is used when asked for, and
    otherwise CG solves the Newton system to CG_RTOL.
    '''
    if cfg.cg_forcing is not None:
        return cfg.cg_forcing
    if cfg.inexact_newton:
        return min(0.5, math.sqrt(gnorm))
    return CG_RTOL


def newton_cg(obj: Objective, x0, cfg: FitConfig, trace: Optional[FitTrace] = None) -> Tuple[np.ndarray, FitTrace]:
    clock = Stopwatch()
    trace = trace if trace is not None else FitTrace()
    x = np.array(x0, dtype=float)
    f, g, hess = obj.linearize(x)
    _check_finite(f, g, x, trace, "the starting point")
    trace.record(f, np.linalg.norm(g), 0.0, clock.ms())
    cg_iters = cfg.cg_max_iters if cfg.cg_max_iters is not None else len(x)

    for it in range(1, cfg.max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            trace.converged = True
            break
        d, truncated = truncated_cg(lambda v: -hess(v), g, cg_iters, cg_tolerance(cfg, gnorm))
        if truncated:
            logger.debug("{} iter {}: non-positive curvature, CG truncated".format(obj.name, it))
        step = line_search_backtrack(obj, x, d, cfg, f=f, g=g, eta0=cfg.initial_step, trace=trace)
        if step == 0.0 and not truncated:
            # Fall back to steepest ascent before declaring a stall
            d = g
            step = line_search_backtrack(obj, x, d, cfg, f=f, g=g, eta0=cfg.initial_step, trace=trace)
        if step == 0.0:
            trace.stop_stalled(gnorm, f)
            break
        x_new = x + step * d
        try:
            f_new, g_new, hess = obj.linearize(x_new)
        except NumericalError as e:
            raise DivergenceError("Objective failed at iteration {}: {}".format(it, e), best_x=x, trace=trace)
        _check_finite(f_new, g_new, x, trace, "iteration {}".format(it))
        trace.record(f_new, np.linalg.norm(g_new), step, clock.ms())
        logger.iteration("{} newton iter {} loglik {:.8f} |g| {:.3e} step {:.3e}".format(obj.name, it, f_new, np.linalg.norm(g_new), step))
        converged = relative_change(f, f_new) < cfg.tol
        x, f, g = x_new, f_new, g_new
        if converged:
            trace.converged = True
            break
    return x, trace


def maximize(obj: Objective, x0, cfg: FitConfig, method: str = "gradient", trace: Optional[FitTrace] = None) -> Tuple[np.ndarray, FitTrace]:
    logger.debug("{}: {} over {} ({} free parameters)".format(obj.name, method, ", ".join(obj.layout.names()), obj.layout.size))
    if method in ("gradient", "auto-gd", "gd"):
        return gradient_ascent(obj, x0, cfg, trace)
    if method in ("newton", "newton-cg", "auto-newton"):
        return newton_cg(obj, x0, cfg, trace)
    raise ValueError("Unknown optimizer {!r}".format(method))
