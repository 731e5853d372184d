#!/usr/bin/python3
#==================================================================#
# mixfit
# Fits Gaussian mixtures, mixture copulas and mixtures of factor
# analyzers by gradient ascent on their exact log-likelihoods
#==================================================================#
import argparse
import json
import os
import shlex
import sys

import numpy as np

import autodiff
from em_baselines import em_gmm, em_mfa, pem_gmcm
from errors import ConfigError, DivergenceError, MixfitError
from fileops import TraceWriter, load_csv, read_params, write_dataset, write_labels, write_params, write_trace
from gmcm import fit_gmcm_auto, rank_transform
from logger import logger, quiesce_logger, set_logger_verbosity
from mfa import MfaParams, fit_mfa_auto
from mixfit_settings import EmConfig, FitConfig, PinwheelConfig, QuantileGridConfig
from mixture_density import GmmParams, fit_gmm_auto
from synthetic import sample_gmm, sample_pinwheel
from utils import make_rng

ARGS_ENV = "MIXFIT_ARGS"
TIMING_SIZES = [1, 5, 10, 50, 100, 200]

FIT_METHODS = {
    "fit-gmm": ["auto-gd", "auto-newton", "em"],
    "fit-gmcm": ["auto", "pem"],
    "fit-mfa": ["auto-gd", "auto-newton", "em"],
}


class MixfitArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("{}: {}".format(self.prog, message))


def _add_common(parser):
    parser.add_argument("--customsettings", help="Preloads arguments from a json file. Use customsettings_template.json as a template and leave any setting you want at its default as null. Flags given on the command line win over the file.")
    parser.add_argument('-v', '--verbosity', action='count', default=0, help="The default logging level is INFO or higher. Each -v lowers it one level; -v shows every optimizer iteration")
    parser.add_argument('-q', '--quiesce', action='count', default=0, help="Each -q raises the logging level one step")


def _add_input(parser):
    parser.add_argument("--in", dest="input", help="Input CSV with one observation per row")
    parser.add_argument("--header", action='store_true', default=None, help="The input CSV starts with a header line")
    parser.add_argument("--labels", action='store_true', default=None, help="The last column of the input CSV holds integer labels and is not fitted")
    parser.add_argument("--delimiter", help="CSV field separator (defaults to ,)")
    parser.add_argument("--out", help="Output prefix; defaults to the input path without its extension")


def _add_fit(parser, command):
    parser.add_argument("--method", choices=FIT_METHODS[command], help="Fitting algorithm (defaults to {})".format(FIT_METHODS[command][0]))
    parser.add_argument("--components", type=int, help="Number of mixture components")
    parser.add_argument("--restarts", type=int, help="Random initializations; restart r uses seed + r")
    parser.add_argument("--seed", type=int, help="Seed of the first restart")
    parser.add_argument("--lr", type=float, dest="learning_rate", help="Gradient-ascent step size")
    parser.add_argument("--max-iters", type=int, dest="max_iters", help="Maximum iterations")
    parser.add_argument("--tol", type=float, help="Relative log-likelihood change that counts as converged")
    parser.add_argument("--no-line-search", action='store_const', const=False, dest="line_search", help="Use the fixed learning rate instead of backtracking")


def build_parser():
    parser = MixfitArgumentParser(prog="mixfit", description="Mixture model fitting by automatic differentiation")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen-pinwheel", help="Sample a pinwheel (wrapped mixture) dataset")
    p.add_argument("--clusters", type=int, help="Number of arms")
    p.add_argument("--n", type=int, dest="per_cluster", help="Points per arm")
    p.add_argument("--radial-std", type=float, dest="radial_std")
    p.add_argument("--tangential-std", type=float, dest="tangential_std")
    p.add_argument("--swirl-rate", type=float, dest="swirl_rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--labels", action='store_true', default=None, help="Append the arm index as a last column")
    p.add_argument("--out", help="Output prefix; writes <prefix>.csv")
    _add_common(p)

    p = sub.add_parser("gen-gmm", help="Sample from a Gaussian mixture")
    p.add_argument("--params", help="Mixture parameters JSON (as written by fit-gmm); a random mixture is drawn when omitted")
    p.add_argument("--components", type=int, help="Components of the random mixture")
    p.add_argument("--dim", type=int, help="Dimension of the random mixture")
    p.add_argument("--n", type=int, help="Number of points")
    p.add_argument("--seed", type=int)
    p.add_argument("--labels", action='store_true', default=None, help="Append the component index as a last column")
    p.add_argument("--out", help="Output prefix; writes <prefix>.csv")
    _add_common(p)

    for command, help in (("fit-gmm", "Fit a Gaussian mixture"),
                          ("fit-gmcm", "Fit a Gaussian mixture copula on the column ranks"),
                          ("fit-mfa", "Fit a mixture of factor analyzers")):
        p = sub.add_parser(command, help=help)
        _add_input(p)
        _add_fit(p, command)
        if command == "fit-mfa":
            p.add_argument("--factors", type=int, help="Latent factors per component")
            p.add_argument("--isotropic", action='store_true', default=None, help="Share one noise variance across dimensions (PPCA)")
        if command == "fit-gmcm":
            p.add_argument("--grid-points", type=int, dest="points", help="Quantile grid points per axis")
        _add_common(p)

    p = sub.add_parser("demo-ad", help="Differentiate iterations of the logistic map")
    p.add_argument("--logistic-n", type=int, dest="logistic_n", help="Number of logistic-map iterations")
    p.add_argument("--x", type=float, help="Starting value l_1")
    p.add_argument("--timing", action='store_true', default=None, help="Print tape size and gradient time for n in {}".format(", ".join(str(n) for n in TIMING_SIZES)))
    _add_common(p)
    return parser


#==================================================================#
#  Argument resolution
#==================================================================#
def _command_actions(parser, command: str) -> dict:
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return {a.dest: a for a in action.choices[command]._actions}
    return {}


def _setting_value(action, name: str, value, source: str):
    '''Coerce a settings-file value the way argparse would have coerced the flag.'''
    try:
        if action.nargs == 0:
            if not isinstance(value, bool):
                raise TypeError("expected true or false")
        elif action.type is int:
            if isinstance(value, bool) or not float(value).is_integer():
                raise ValueError("expected a whole number")
            value = int(float(value))
        elif action.type is not None:
            if isinstance(value, bool):
                raise TypeError("expected a number")
            value = action.type(value)
        elif not isinstance(value, str):
            raise TypeError("expected a string")
    except (TypeError, ValueError) as e:
        raise ConfigError("{}: setting {} = {!r} is invalid ({})".format(source, name, value, e))
    if action.choices is not None and value not in action.choices:
        raise ConfigError("{}: setting {} must be one of {}, got {!r}".format(source, name, ", ".join(action.choices), value))
    return value


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    set_logger_verbosity(args.verbosity)
    quiesce_logger(args.quiesce)
    if args.customsettings:
        try:
            with open(args.customsettings) as f:
                importedsettings = json.load(f)
        except OSError as e:
            raise ConfigError("Cannot read {}: {}".format(args.customsettings, e.strerror or e))
        except json.JSONDecodeError as e:
            raise ConfigError("{} is not valid JSON: {}".format(args.customsettings, e))
        if not isinstance(importedsettings, dict):
            raise ConfigError("{} must hold a JSON object".format(args.customsettings))
        actions = _command_actions(parser, args.command)
        for items in importedsettings:
            # Command-line flags take precedence over the file
            if importedsettings[items] is not None and getattr(args, items, None) is None:
                value = importedsettings[items]
                if items in actions:
                    value = _setting_value(actions[items], items, value, args.customsettings)
                # Anything else is checked by the settings class it ends up in
                setattr(args, items, value)
    return args


def _pick(args, *names) -> dict:
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def _prefix(args) -> str:
    if args.out:
        return args.out
    if getattr(args, "input", None):
        return os.path.splitext(args.input)[0]
    raise ConfigError("--out is required when there is no --in")


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError("--{} is required for {}".format(name.replace("_", "-"), args.command))


def _echo(name, cfg) -> None:
    logger.init("{} {!r}".format(name, cfg).replace("{", "{{").replace("}", "}}"), status="Config")


def _load_input(args):
    _require(args, "input")
    return load_csv(args.input, has_header=bool(args.header), delimiter=args.delimiter or ",", label_column=bool(args.labels))


def _fit_config(args, command: str, method: str) -> FitConfig:
    keys = _pick(args, "learning_rate", "max_iters", "tol", "line_search", "seed", "restarts", "initial_step",
                 "cg_max_iters", "cg_forcing", "inexact_newton", "max_halvings", "armijo_c", "latent_every")
    newton = method == "auto-newton"
    if command == "fit-mfa":
        return FitConfig.for_mfa(newton=newton).update(**keys)
    if command == "fit-gmcm":
        return FitConfig.for_gmcm().update(**keys)
    return FitConfig.for_gmm(newton=newton).update(**keys)


def _em_config(args) -> EmConfig:
    return EmConfig().update(**_pick(args, "max_iters", "tol", "seed", "restarts", "min_covariance_floor"))


def _trace_sinks(prefix: str, restarts: int):
    '''
    Stream every restart's trace while it runs. A single restart writes
    straight to <prefix>.trace.csv; with several each seed gets its own
    <prefix>.trace.seed<k>.csv and the winner is copied over at the end.
    '''
    def sink(seed):
        if restarts == 1:
            return TraceWriter(prefix + ".trace.csv")
        return TraceWriter("{}.trace.seed{}.csv".format(prefix, seed))
    return sink


def _write_fit(prefix: str, result) -> None:
    write_params(result.params, prefix + ".params.json")
    write_trace(result.trace, prefix + ".trace.csv")
    write_labels(result.labels, prefix + ".labels.csv")
    for warning in result.trace.warnings:
        logger.warning(warning)
    if result.trace.stalled:
        logger.warning("The line search stalled before convergence (|g| = {:.3e})".format(result.trace[-1].grad_norm))
    print("RESULT loglik={!r} iters={} ms={:.3f}".format(float(result.loglik), result.trace.iterations, result.trace.elapsed_ms))


def _write_partial(prefix: str, error: DivergenceError) -> None:
    written = []
    if error.trace is not None and len(error.trace) > 0:
        write_trace(error.trace, prefix + ".trace.csv")
        written.append(prefix + ".trace.csv")
    if error.params is not None:
        write_params(error.params, prefix + ".params.json")
        written.append(prefix + ".params.json")
    if written:
        logger.warning("Fit diverged; wrote the partial result to {}".format(", ".join(written)))


def _run_fit(args, fit, restarts: int) -> int:
    '''`fit(trace_sinks)` runs the fit; its result, or what a diverged fit got to, is written out.'''
    prefix = _prefix(args)
    try:
        result = fit(_trace_sinks(prefix, restarts))
    except DivergenceError as e:
        _write_partial(prefix, e)
        raise
    _write_fit(prefix, result)
    return 0


#==================================================================#
#  Subcommands
#==================================================================#
def cmd_gen_pinwheel(args) -> int:
    cfg = PinwheelConfig().update(**_pick(args, "clusters", "per_cluster", "radial_std", "tangential_std", "swirl_rate", "seed"))
    _echo("Pinwheel", cfg)
    path = _prefix(args) + ".csv"
    write_dataset(sample_pinwheel(cfg), path, labels=bool(args.labels))
    logger.message("Wrote {}".format(path))
    return 0


def _random_mixture(G: int, p: int, seed: int) -> GmmParams:
    rng = make_rng(seed)
    means = rng.normal(0.0, 5.0, size=(G, p))
    factors = np.array([np.eye(p) + np.tril(rng.normal(0.0, 0.3, size=(p, p)), -1) for _ in range(G)])
    return GmmParams(np.zeros(G), means, factors)


def cmd_gen_gmm(args) -> int:
    _require(args, "n")
    seed = args.seed if args.seed is not None else 0
    if args.params:
        theta = read_params(args.params)
        if isinstance(theta, MfaParams):
            raise ConfigError("{} holds factor-analyzer parameters, not a Gaussian mixture".format(args.params))
    else:
        _require(args, "components", "dim")
        if args.components < 1 or args.dim < 1:
            raise ConfigError("--components and --dim must be positive")
        theta = _random_mixture(args.components, args.dim, seed)
    if args.n < 1:
        raise ConfigError("--n must be positive")
    _echo("Sample", {"n": args.n, "seed": seed, "components": theta.n_components, "dim": theta.dim, "params": args.params})
    path = _prefix(args) + ".csv"
    write_dataset(sample_gmm(theta, args.n, seed), path, labels=bool(args.labels))
    logger.message("Wrote {}".format(path))
    return 0


def cmd_fit_gmm(args) -> int:
    _require(args, "components")
    data = _load_input(args)
    method = args.method or "auto-gd"
    if method == "em":
        cfg = _em_config(args)
        _echo("EM", cfg)
        return _run_fit(args, lambda sinks: em_gmm(data.X, args.components, cfg, trace_sinks=sinks), cfg.restarts)
    cfg = _fit_config(args, "fit-gmm", method)
    _echo("Fit", cfg)
    return _run_fit(args, lambda sinks: fit_gmm_auto(data.X, args.components, cfg, method, trace_sinks=sinks), cfg.restarts)


def cmd_fit_gmcm(args) -> int:
    _require(args, "components")
    data = _load_input(args)
    method = args.method or "auto"
    grid = QuantileGridConfig().update(**_pick(args, "points", "tail_width", "bisection_steps"))
    _echo("Grid", grid)
    U = rank_transform(data.X)
    if method == "pem":
        cfg = _em_config(args)
        _echo("EM", cfg)
        return _run_fit(args, lambda sinks: pem_gmcm(U, args.components, cfg, grid, trace_sinks=sinks), cfg.restarts)
    cfg = _fit_config(args, "fit-gmcm", method)
    _echo("Fit", cfg)
    return _run_fit(args, lambda sinks: fit_gmcm_auto(U, args.components, cfg, grid, trace_sinks=sinks), cfg.restarts)


def cmd_fit_mfa(args) -> int:
    _require(args, "components", "factors")
    data = _load_input(args)
    method = args.method or "auto-gd"
    if method == "em":
        if args.isotropic:
            raise ConfigError("--isotropic is only available for the gradient fits")
        cfg = _em_config(args)
        _echo("EM", cfg)
        return _run_fit(args, lambda sinks: em_mfa(data.X, args.components, args.factors, cfg, trace_sinks=sinks), cfg.restarts)
    cfg = _fit_config(args, "fit-mfa", method)
    _echo("Fit", cfg)
    return _run_fit(args, lambda sinks: fit_mfa_auto(data.X, args.components, args.factors, cfg, method,
                                                     isotropic=bool(args.isotropic), trace_sinks=sinks), cfg.restarts)


def cmd_demo_ad(args) -> int:
    x = args.x if args.x is not None else 0.25
    n = args.logistic_n if args.logistic_n is not None else 2
    _echo("Demo", {"x": x, "logistic_n": n, "timing": bool(args.timing)})
    if args.timing:
        for size in TIMING_SIZES:
            run = autodiff.trace_logistic_map(x, size)
            print("n={} nodes={} gradient={!r} ms={:.3f}".format(run.n, run.nodes, run.gradient, run.elapsed_ms))
        return 0
    if n < 1:
        raise ConfigError("--logistic-n must be at least 1")
    run = autodiff.trace_logistic_map(x, n)
    print("n={} x={!r} value={!r} gradient={!r} nodes={}".format(run.n, run.x, run.value, run.gradient, run.nodes))
    return 0


COMMANDS = {
    "gen-pinwheel": cmd_gen_pinwheel,
    "gen-gmm": cmd_gen_gmm,
    "fit-gmm": cmd_fit_gmm,
    "fit-gmcm": cmd_fit_gmcm,
    "fit-mfa": cmd_fit_mfa,
    "demo-ad": cmd_demo_ad,
}


def run_cli(argv=None) -> int:
    '''
    Run one subcommand and return the process exit status: 0 on success,
    1 for configuration or input problems, 2 for numerical failures.
    '''
    if argv is None:
        if(os.environ.get(ARGS_ENV) is not None):
            argv = shlex.split(os.environ[ARGS_ENV])
        else:
            argv = sys.argv[1:]
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except MixfitError as e:
        logger.error("{}: {}".format(e.type, e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(run_cli())
