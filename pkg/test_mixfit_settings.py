import json

import pytest

from errors import ConfigError, DivergenceError, RestartsExhaustedError
from mixfit_settings import EmConfig, FitConfig, PinwheelConfig, QuantileGridConfig
from structures import FitResult, FitTrace
from utils import THREADS_ENV, make_rng, restart_seeds, run_restarts, thread_count

invalid_configs = [
    (FitConfig, {"learning_rate": 0.0}),
    (FitConfig, {"max_iters": 0}),
    (FitConfig, {"armijo_c": 1.0}),
    (FitConfig, {"seed": -1}),
    (QuantileGridConfig, {"points": 1}),
    (EmConfig, {"restarts": 0}),
    (PinwheelConfig, {"radial_std": 0.0}),
]


@pytest.mark.parametrize("cls, kwargs", invalid_configs)
def test_schema_rejects_out_of_range(cls, kwargs):
    with pytest.raises(ConfigError):
        cls(**kwargs)


def test_defaults():
    fit = FitConfig()
    assert (fit.learning_rate, fit.max_iters, fit.tol, fit.line_search) == (1e-3, 2000, 1e-8, True)
    assert FitConfig.for_mfa().learning_rate == 1e-2
    assert FitConfig.for_mfa(newton=True).max_iters == 200
    assert FitConfig.for_mfa(newton=True, max_iters=7).max_iters == 7
    assert FitConfig.for_gmm(newton=True).max_iters == 200
    assert FitConfig.for_gmm().max_iters == 2000
    assert QuantileGridConfig().points == 1000
    assert EmConfig().min_covariance_floor == 1e-6


def test_json_roundtrip_and_coercion():
    fit = FitConfig(seed=4, line_search=False)
    back = FitConfig().from_json(fit.to_json())
    assert back == fit
    coerced = FitConfig().from_json({"max_iters": 12.0, "learning_rate": 1, "cg_forcing": None, "unknown": 3})
    assert coerced.max_iters == 12 and isinstance(coerced.max_iters, int)
    assert isinstance(coerced.learning_rate, float)
    assert coerced.cg_forcing is None
    assert json.loads(coerced.to_json())["max_iters"] == 12


@pytest.mark.parametrize("values", [{"max_iters": "many"}, {"cg_max_iters": 3.7}, {"line_search": "perhaps"}, {"tol": [1]}])
def test_from_json_rejects_mistyped_values(values):
    with pytest.raises(ConfigError):
        FitConfig().from_json(values)


def test_from_json_loads_numeric_strings():
    fit = FitConfig().from_json({"max_iters": "7", "learning_rate": "0.5"})
    assert fit.max_iters == 7 and isinstance(fit.max_iters, int)
    assert fit.learning_rate == 0.5
    with pytest.raises(ConfigError):
        FitConfig().from_json("{not json")


def test_update_skips_unset_values():
    fit = FitConfig().update(max_iters=9, tol=None)
    assert fit.max_iters == 9
    assert fit.tol == 1e-8
    with pytest.raises(ConfigError):
        FitConfig().update(restarts=0)


#==================================================================#
#  Seeds, threads and restarts
#==================================================================#
def test_make_rng_is_reproducible():
    assert make_rng(5).normal() == make_rng(5).normal()
    with pytest.raises(ConfigError):
        make_rng(-2)


def test_restart_seeds():
    assert restart_seeds(10, 3) == [10, 11, 12]
    assert restart_seeds(0, 0) == [0]


def test_thread_count(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert thread_count() == 1
    monkeypatch.setenv(THREADS_ENV, "4")
    assert thread_count() == 4
    for bad in ("zero", "0"):
        monkeypatch.setenv(THREADS_ENV, bad)
        with pytest.raises(ConfigError):
            thread_count()


def fake_fit(seed):
    if seed % 2:
        raise DivergenceError("seed {} diverged".format(seed))
    return FitResult(None, FitTrace(), [], float(-abs(seed - 4)), seed)


@pytest.mark.parametrize("threads", [1, 3])
def test_run_restarts_keeps_best_and_skips_failures(threads):
    best = run_restarts(fake_fit, restart_seeds(0, 8), threads=threads)
    assert best.seed == 4


def test_run_restarts_ties_go_to_first_seed():
    best = run_restarts(lambda s: FitResult(None, FitTrace(), [], 1.0, s), [3, 4, 5])
    assert best.seed == 3


def test_run_restarts_all_failing():
    with pytest.raises(RestartsExhaustedError):
        run_restarts(fake_fit, [1])
    with pytest.raises(RestartsExhaustedError):
        run_restarts(fake_fit, [1, 3, 5])


def test_run_restarts_single_failure_keeps_partial_result():
    trace = FitTrace()
    trace.record(-3.0, 1.0, 0.0, 0.0)

    def failing(seed):
        raise DivergenceError("seed {} diverged".format(seed), best_x=[0.5], trace=trace, params="theta")

    with pytest.raises(RestartsExhaustedError) as info:
        run_restarts(failing, [7])
    assert info.value.trace is trace
    assert info.value.params == "theta"
    assert info.value.best_x == [0.5]
    assert len(info.value.errors) == 1


def test_run_restarts_reports_furthest_failure():
    def failing(seed):
        trace = FitTrace()
        trace.record(-10.0 + seed, 1.0, 0.0, 0.0)
        raise DivergenceError("seed {} diverged".format(seed), trace=trace, params=seed)

    with pytest.raises(RestartsExhaustedError) as info:
        run_restarts(failing, [1, 5, 3])
    assert info.value.params == 5
    assert [e.params for e in info.value.errors] == [1, 5, 3]
