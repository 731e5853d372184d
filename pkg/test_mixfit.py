import json

import numpy as np
import pytest

import mixfit
from errors import RestartsExhaustedError
from fileops import load_csv, read_params, read_trace, write_dataset
from logger import is_init_log, logger
from mfa import MfaParams
from mixfit import ARGS_ENV, TIMING_SIZES, _fit_config, parse_args, run_cli
from structures import FitTrace
from mixture_density import GmmParams
from synthetic import sample_gmm, sample_mfa

small_fit_commands = [
    ["fit-gmm", "--components", "2", "--max-iters", "5"],
    ["fit-gmm", "--components", "2", "--method", "em", "--max-iters", "5"],
    ["fit-gmm", "--components", "2", "--method", "auto-newton", "--max-iters", "2"],
    ["fit-gmcm", "--components", "2", "--max-iters", "3", "--grid-points", "200"],
    ["fit-gmcm", "--components", "2", "--method", "pem", "--max-iters", "3"],
    ["fit-mfa", "--components", "2", "--factors", "1", "--max-iters", "5"],
    ["fit-mfa", "--components", "2", "--factors", "1", "--max-iters", "2", "--method", "auto-newton", "--isotropic"],
]


@pytest.fixture
def init_records():
    seen = []
    handler = logger.add(lambda m: seen.append(m.record), level="INIT", filter=is_init_log, format="{message}")
    yield seen
    logger.remove(handler)


@pytest.fixture
def blobs_csv(tmp_path):
    theta = GmmParams(np.zeros(2), np.array([[-3.0, 0.0, 1.0], [3.0, 1.0, -1.0]]), np.array([np.eye(3), 0.5 * np.eye(3)]))
    path = str(tmp_path / "blobs.csv")
    write_dataset(sample_gmm(theta, 80, seed=0), path)
    return path


@pytest.fixture
def wide_csv(tmp_path):
    rng = np.random.default_rng(1)
    theta = MfaParams(np.zeros(2), rng.normal(size=(2, 50)), rng.normal(0.0, 0.5, size=(2, 50, 2)), np.full((2, 50), 0.5))
    path = str(tmp_path / "wide.csv")
    write_dataset(sample_mfa(theta, 20, seed=1), path)
    return path


#==================================================================#
#  demo-ad
#==================================================================#
def test_demo_ad_prints_gradient(capsys):
    assert run_cli(["demo-ad", "--logistic-n", "2", "--x", "0.25"]) == 0
    out = capsys.readouterr().out
    assert "value=0.75" in out
    assert "gradient=2.0" in out


def test_demo_ad_timing_table(capsys):
    assert run_cli(["demo-ad", "--timing"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("n=")]
    assert [int(l.split()[0][2:]) for l in lines] == TIMING_SIZES


def test_every_command_echoes_its_config(tmp_path, init_records):
    assert run_cli(["demo-ad", "--logistic-n", "3"]) == 0
    assert run_cli(["gen-gmm", "--components", "2", "--dim", "2", "--n", "5", "--out", str(tmp_path / "g")]) == 0
    assert run_cli(["gen-pinwheel", "--n", "5", "--out", str(tmp_path / "pw")]) == 0
    echoed = [r["message"].split()[0] for r in init_records if r["extra"].get("status") == "Config"]
    assert echoed == ["Demo", "Sample", "Pinwheel"]
    assert "'logistic_n': 3" in init_records[0]["message"]


def test_quiet_silences_the_echo(init_records):
    assert run_cli(["demo-ad", "-qq"]) == 0
    assert init_records == []


def test_args_come_from_environment(monkeypatch, capsys):
    monkeypatch.setenv(ARGS_ENV, "demo-ad --logistic-n 3 --x 0")
    assert run_cli() == 0
    assert "gradient=16.0" in capsys.readouterr().out


#==================================================================#
#  Argument handling
#==================================================================#
def test_bad_arguments_exit_one(blobs_csv):
    assert run_cli(["fit-gmm", "--bogus"]) == 1
    assert run_cli(["fit-gmm", "--in", blobs_csv]) == 1
    assert run_cli(["fit-gmcm", "--in", blobs_csv, "--components", "2", "--method", "em"]) == 1
    assert run_cli(["fit-mfa", "--in", blobs_csv, "--components", "2", "--factors", "1", "--method", "em", "--isotropic"]) == 1
    assert run_cli(["fit-gmm", "--in", blobs_csv, "--components", "2", "--lr", "-1"]) == 1
    assert run_cli(["demo-ad", "--logistic-n", "0"]) == 1


def test_missing_input_exits_one(tmp_path):
    assert run_cli(["fit-gmm", "--in", str(tmp_path / "nope.csv"), "--components", "2"]) == 1


def test_customsettings_fill_unset_flags(tmp_path):
    settings = tmp_path / "settings.json"
    settings.write_text(json.dumps({"max_iters": 50, "components": 3, "seed": None, "verbosity": None}))
    args = parse_args(["fit-gmm", "--customsettings", str(settings), "--max-iters", "4"])
    assert args.max_iters == 4
    assert args.components == 3
    assert args.seed is None


#==================================================================#
#  Fitting end to end
#==================================================================#
@pytest.mark.parametrize("argv", small_fit_commands)
def test_fit_commands_write_outputs(tmp_path, blobs_csv, capsys, argv):
    prefix = str(tmp_path / "fit")
    assert run_cli(argv + ["--in", blobs_csv, "--out", prefix]) == 0
    assert "RESULT loglik=" in capsys.readouterr().out
    assert len(read_trace(prefix + ".trace.csv")) >= 1
    labels = [int(l) for l in open(prefix + ".labels.csv").read().split()]
    assert len(labels) == 80
    assert set(labels) <= {0, 1}
    assert read_params(prefix + ".params.json").n_components == 2


def test_default_prefix_is_input_path(blobs_csv):
    assert run_cli(["fit-gmm", "--in", blobs_csv, "--components", "1", "--max-iters", "2"]) == 0
    assert read_params(blobs_csv[:-len(".csv")] + ".params.json").dim == 3


def test_fits_are_reproducible(tmp_path, blobs_csv):
    outputs = []
    for name in ("a", "b"):
        prefix = str(tmp_path / name)
        assert run_cli(["fit-gmm", "--in", blobs_csv, "--components", "2", "--max-iters", "10", "--seed", "3", "--out", prefix]) == 0
        outputs.append((open(prefix + ".params.json").read(), open(prefix + ".labels.csv").read()))
    assert outputs[0] == outputs[1]


def test_em_on_wide_data_is_rank_deficient(wide_csv):
    assert run_cli(["fit-mfa", "--method", "em", "--components", "2", "--factors", "2", "--in", wide_csv]) == 2


def test_generators_write_csv(tmp_path):
    assert run_cli(["gen-pinwheel", "--clusters", "2", "--n", "15", "--seed", "1", "--labels", "--out", str(tmp_path / "pw")]) == 0
    data = load_csv(str(tmp_path / "pw.csv"), label_column=True)
    assert data.X.shape == (30, 2)
    assert np.bincount(data.labels).tolist() == [15, 15]
    assert run_cli(["gen-gmm", "--components", "2", "--dim", "3", "--n", "40", "--out", str(tmp_path / "g")]) == 0
    assert load_csv(str(tmp_path / "g.csv")).X.shape == (40, 3)


def test_gen_gmm_from_fitted_params(tmp_path, blobs_csv):
    prefix = str(tmp_path / "fit")
    assert run_cli(["fit-gmm", "--in", blobs_csv, "--components", "2", "--max-iters", "3", "--out", prefix]) == 0
    assert run_cli(["gen-gmm", "--params", prefix + ".params.json", "--n", "25", "--seed", "2", "--out", str(tmp_path / "again")]) == 0
    assert load_csv(str(tmp_path / "again.csv")).X.shape == (25, 3)
    mfa_prefix = str(tmp_path / "mfa")
    assert run_cli(["fit-mfa", "--in", blobs_csv, "--components", "1", "--factors", "1", "--max-iters", "2", "--out", mfa_prefix]) == 0
    assert run_cli(["gen-gmm", "--params", mfa_prefix + ".params.json", "--n", "5", "--out", str(tmp_path / "x")]) == 1


@pytest.mark.slow
def test_pinwheel_copula_pipeline(tmp_path):
    prefix = str(tmp_path / "pw")
    assert run_cli(["gen-pinwheel", "--clusters", "3", "--n", "200", "--seed", "7", "--out", prefix]) == 0
    assert run_cli(["fit-gmcm", "--method", "auto", "--components", "3", "--in", prefix + ".csv"]) == 0
    trace = read_trace(prefix + ".trace.csv")
    assert trace.is_non_decreasing(slack=1e-10)
    assert len(open(prefix + ".labels.csv").read().split()) == 600


#==================================================================#
#  Settings files, presets and partial results
#==================================================================#
@pytest.mark.parametrize("values, status", [
    ({"components": "2"}, 0),
    ({"components": "two"}, 1),
    ({"max_iters": "many"}, 1),
    ({"max_iters": 2.5}, 1),
    ({"cg_max_iters": 3.7}, 1),
    ({"method": "simplex"}, 1),
    ({"line_search": "no"}, 1),
])
def test_customsettings_values_are_checked(tmp_path, blobs_csv, values, status):
    settings = tmp_path / "settings.json"
    settings.write_text(json.dumps(values))
    argv = ["fit-gmm", "--in", blobs_csv, "--out", str(tmp_path / "fit"), "--customsettings", str(settings)]
    for name, flag in (("components", "--components"), ("max_iters", "--max-iters")):
        if name not in values:
            argv += [flag, "2"]
    assert run_cli(argv) == status


def test_newton_gets_newton_preset():
    args = parse_args(["fit-gmm", "--components", "2", "--method", "auto-newton"])
    assert _fit_config(args, "fit-gmm", "auto-newton").max_iters == 200
    assert _fit_config(args, "fit-gmm", "auto-gd").max_iters == 2000
    args = parse_args(["fit-mfa", "--components", "2", "--factors", "1", "--method", "auto-newton", "--max-iters", "9"])
    cfg = _fit_config(args, "fit-mfa", "auto-newton")
    assert cfg.max_iters == 9 and cfg.inexact_newton


def test_restarts_stream_a_trace_per_seed(tmp_path, blobs_csv):
    prefix = str(tmp_path / "fit")
    assert run_cli(["fit-gmm", "--in", blobs_csv, "--components", "2", "--max-iters", "4", "--restarts", "2", "--out", prefix]) == 0
    per_seed = [read_trace("{}.trace.seed{}.csv".format(prefix, seed)).logliks for seed in (0, 1)]
    assert all(len(ll) >= 1 for ll in per_seed)
    assert read_trace(prefix + ".trace.csv").logliks in per_seed


def test_diverged_fit_leaves_partial_outputs(tmp_path, blobs_csv, monkeypatch):
    theta = GmmParams(np.zeros(2), np.zeros((2, 3)), np.array([np.eye(3), np.eye(3)]))

    def diverging_fit(X, G, cfg, method, trace_sinks=None):
        trace = FitTrace.for_seed(trace_sinks, cfg.seed)
        for k in range(3):
            trace.record(-100.0 + k, 1.0, 0.1, float(k))
        raise RestartsExhaustedError("seed {} diverged".format(cfg.seed), trace=trace, params=theta)

    monkeypatch.setattr(mixfit, "fit_gmm_auto", diverging_fit)
    prefix = str(tmp_path / "fit")
    assert run_cli(["fit-gmm", "--in", blobs_csv, "--components", "2", "--out", prefix]) == 2
    assert read_trace(prefix + ".trace.csv").logliks == [-100.0, -99.0, -98.0]
    assert read_params(prefix + ".params.json").means.tolist() == theta.means.tolist()
    assert not (tmp_path / "fit.labels.csv").exists()
