import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np

from errors import ConfigError, NumericalError, RestartsExhaustedError
from logger import logger

T = TypeVar("T")

THREADS_ENV = "MIXFIT_THREADS"


#==================================================================#
# Counter-based generator; identical streams on every platform
#==================================================================#
def make_rng(seed: int) -> np.random.Generator:
    if seed is None or int(seed) < 0:
        raise ConfigError("Seed must be a non-negative integer, got {!r}".format(seed))
    return np.random.Generator(np.random.Philox(int(seed)))


def thread_count() -> int:
    value = os.environ.get(THREADS_ENV)
    if value is None or value == "":
        return 1
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError("{} must be an integer, got {!r}".format(THREADS_ENV, value))
    if threads < 1:
        raise ConfigError("{} must be at least 1, got {}".format(THREADS_ENV, threads))
    return threads


class Stopwatch(object):
    def __init__(self):
        self.start = time.perf_counter()

    def ms(self) -> float:
        return (time.perf_counter() - self.start) * 1000.0


def restart_seeds(seed: int, restarts: int) -> List[int]:
    return [int(seed) + r for r in range(max(1, int(restarts)))]


def _partial_loglik(error) -> float:
    trace = getattr(error, "trace", None)
    if trace is None or len(trace) == 0:
        return -np.inf
    finite = [ll for ll in trace.logliks if np.isfinite(ll)]
    return max(finite) if finite else -np.inf


#==================================================================#
# Run independent restarts and keep the best one.
# `fit(seed)` must return an object with a `loglik` attribute.
# Results are collected in seed order whatever the thread count,
# so the winner only depends on the seeds.
#==================================================================#
def run_restarts(fit: Callable[[int], T], seeds: Sequence[int], label: str = "fit", threads: Optional[int] = None) -> T:
    threads = thread_count() if threads is None else threads

    def attempt(seed):
        try:
            return fit(seed), None
        except NumericalError as e:
            return None, e

    if threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(attempt, seeds))
    else:
        outcomes = [attempt(seed) for seed in seeds]

    best = None
    errors = []
    for seed, (result, error) in zip(seeds, outcomes):
        if error is not None:
            logger.warning("{} restart with seed {} failed: {}".format(label, seed, error))
            errors.append(error)
            continue
        logger.restart("{} seed {}: loglik {:.6f}".format(label, seed, result.loglik))
        if best is None or result.loglik > best.loglik:
            best = result
    if best is None:
        # max keeps the earliest seed on ties
        partial = max(errors, key=_partial_loglik)
        raise RestartsExhaustedError("All {} {} restarts failed; last error: {}".format(len(seeds), label, errors[-1]),
                                     errors=errors, best_x=getattr(partial, "best_x", None),
                                     trace=getattr(partial, "trace", None), params=getattr(partial, "params", None)) from errors[-1]
    return best
