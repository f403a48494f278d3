""" Command-line interface: `rpel {fit,tune,simulate,diagnose,compare} ...`.
    Exit status: 0 success, 1 usage error, 2 data error, 3 no convergence.
"""
__all__ = ['main', 'build_parser', 'EXIT_OK', 'EXIT_USAGE', 'EXIT_DATA', 'EXIT_CONVERGENCE']

import argparse
import sys
import warnings

import numpy as np

from dataclasses import replace
from pathlib import Path

from . import config
from .core import BasisSet, ConvergenceError, DataError, DegenerateMatrixError, ModelFamily, NumericalError
from .diagnostics import DEFAULT_MAGNITUDES, influence_sweep, sandwich
from .estimating import ModelSpec, build_context
from .io import CsvSchema, FitReport, compare_reports, ingest_csv, write_table
from .methods import METHODS, MethodConfig, fit_method, get_method
from .optimizer import ElState, SolverOptions
from .penalties import Penalties, PenaltyConfig
from .scores import make_score
from .simulation import ScenarioSpec, run_experiment
from .tuning import TuningGrid, default_grid, select_score_constant
from .utils import load_json, log, save_json


EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """ Usage errors exit with status 1 instead of argparse's 2, which is reserved for data errors here. """
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


## ARGUMENTS
def _add_data_arguments(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('data')
    group.add_argument('data', type=str, help="Long-format CSV file, one row per measurement.")
    group.add_argument('--subject', default='subject', help="Subject identifier column. (default: %(default)s)")
    group.add_argument('--time', default='time', help="Measurement time column. (default: %(default)s)")
    group.add_argument('--response', default='y', help="Response column. (default: %(default)s)")
    group.add_argument('--covariates', nargs='+', default=None, help="Covariate columns (default: all other columns).")
    group.add_argument('--no-standardize', dest='standardize', action='store_false', help="Keep the covariates on their own scale.")
    group.add_argument('--intercept', action='store_true', help="Prepend an intercept column.")
    group.add_argument('--add-time', action='store_true', help="Add the raw measurement time as a covariate.")

def _add_model_arguments(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('model')
    group.add_argument('--method', type=str.upper, choices=list(METHODS), default=None,
                       help="Preset configuration. --score and --score-const override its score function.")
    group.add_argument('--score', choices=['identity', 'huber', 'exponential', 'tukey'], default=None, help="Score function. (default: huber)")
    group.add_argument('--score-const', type=float, default=None, help="Tuning constant of the score function.")
    group.add_argument('--no-leverage', dest='leverage', action='store_false', help="Use unit leverage weights W_i = I.")
    group.add_argument('--corr', type=str.upper, choices=['CS', 'AR1', 'IND'], default='CS', help="Working correlation structure. (default: %(default)s)")
    group.add_argument('--link', choices=['identity', 'log'], default='identity', help="Identity link with constant variance, or log link with Poisson variance. (default: %(default)s)")
    group.add_argument('--phi', choices=['fixed', 'mad'], default='fixed', help="Dispersion: fixed at 1, or estimated by MAD at the initial fit. (default: %(default)s)")
    group.add_argument('--penalty', type=str.upper, choices=['SCAD', 'L1', 'MCP'], default='SCAD', help="Penalty on the coefficients. (default: %(default)s)")
    group.add_argument('--lambda-penalty', type=str.upper, choices=['SCAD', 'L1', 'MCP'], default='SCAD', help="Penalty on the multipliers. (default: %(default)s)")

def _add_tuning_arguments(parser: argparse.ArgumentParser, fixed_levels: bool = True):
    group = parser.add_argument_group('tuning')
    if fixed_levels:
        group.add_argument('--v', type=float, default=None, help="Fixed multiplier penalty level (needs --omega, skips the grid search).")
        group.add_argument('--omega', type=float, default=None, help="Fixed coefficient penalty level (needs --v).")
    group.add_argument('--grid', type=int, default=10, help="Number of log-spaced points per level in the default grid. (default: %(default)s)")
    group.add_argument('--v-values', type=float, nargs='+', default=None, help="Explicit multiplier penalty levels.")
    group.add_argument('--omega-values', type=float, nargs='+', default=None, help="Explicit coefficient penalty levels.")

def _add_run_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--seed', type=int, default=0, help="Seed of every random choice (MCD starts, simulated data). (default: %(default)s)")
    parser.add_argument('--threads', type=int, default=1, help="Parallel workers for grid paths or replicates. (default: %(default)s)")
    parser.add_argument('--out', type=str, default='rpel_out', help="Output directory. (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='rpel', description="Robust doubly-penalized empirical likelihood for sparse longitudinal marginal models.")
    parser.add_argument('--rpel-quiet', action='store_true', help="No progress messages (read by rpel.config).")
    parser.add_argument('--rpel-verbose', action='store_true', help="Progress messages in long loops (read by rpel.config).")
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    fit = sub.add_parser('fit', help="Fit one model and write a report.")
    _add_data_arguments(fit)
    _add_model_arguments(fit)
    _add_tuning_arguments(fit)
    fit.add_argument('--se', action='store_true', help="Add sandwich standard errors and the bias correction to the report.")
    _add_run_arguments(fit)

    tune = sub.add_parser('tune', help="Grid search only: write the BIC table of every (v, omega).")
    _add_data_arguments(tune)
    _add_model_arguments(tune)
    _add_tuning_arguments(tune, fixed_levels=False)
    tune.add_argument('--score-candidates', type=float, nargs='+', default=None, help="Also choose the score constant among these values.")
    _add_run_arguments(tune)

    simulate = sub.add_parser('simulate', help="Run a Monte-Carlo scenario and write the metric tables.")
    simulate.add_argument('scenario', type=str, help="Scenario JSON file.")
    simulate.add_argument('--methods', type=str.upper, nargs='+', choices=list(METHODS), default=None,
                          help="Methods to compare (default: the scenario's 'methods', else all presets).")
    simulate.add_argument('--replicates', type=int, default=None, help="Override the number of replicates of the scenario.")
    simulate.add_argument('--grid', type=int, default=None, help="Number of grid points per level (default: the scenario's 'grid_points', else 10).")
    _add_run_arguments(simulate)

    diagnose = sub.add_parser('diagnose', help="Influence functions and sandwich estimates of a fitted report.")
    diagnose.add_argument('report', type=str, help="JSON report written by 'rpel fit'.")
    diagnose.add_argument('--magnitudes', type=float, nargs='+', default=list(DEFAULT_MAGNITUDES), help="Contamination magnitudes, applied with both signs.")
    diagnose.add_argument('--out', type=str, default='rpel_out', help="Output directory. (default: %(default)s)")

    compare = sub.add_parser('compare', help="Overlap of the variables selected by several reports.")
    compare.add_argument('reports', type=str, nargs='+', help="JSON reports written by 'rpel fit'.")
    compare.add_argument('--out', type=str, default='rpel_out', help="Output directory. (default: %(default)s)")
    return parser


## HELPERS
def _method(args) -> MethodConfig:
    method = get_method(args.method) if args.method else MethodConfig('RPEL', args.score or 'huber', leverage=args.leverage)
    if args.score is not None: method = replace(method, score=args.score)
    if args.score_const is not None: method = replace(method, score_constant=args.score_const)
    if not args.leverage: method = replace(method, leverage=False)
    return method

def _family(link: str, phi: float = 1.) -> ModelFamily:
    return ModelFamily.poisson(phi) if link == 'log' else ModelFamily.gaussian(phi)

def _source(args) -> dict:
    schema = CsvSchema(args.subject, args.time, args.response, args.covariates)
    return {'path': str(Path(args.data).resolve()), 'schema': schema.to_dict(), 'standardize': args.standardize,
            'add_intercept': args.intercept, 'add_time': args.add_time}

def _load_data(source: dict):
    schema = CsvSchema(**source['schema'])
    return ingest_csv(source['path'], schema, standardize=source['standardize'], add_intercept=source['add_intercept'], add_time=source['add_time'])

def _grid(args, p: int, r: int, n: int, penalize_lambda: bool) -> TuningGrid:
    grid = default_grid(p, r, n, points=args.grid, penalize_lambda=penalize_lambda)
    v = grid.v_values if args.v_values is None else tuple(sorted(args.v_values))
    omega = grid.omega_values if args.omega_values is None else tuple(sorted(args.omega_values))
    return TuningGrid(v, omega)

def _fit(args, data, out: Path):
    method = _method(args)
    levels = {'v': args.v, 'omega': args.omega} if getattr(args, 'v', None) is not None else {}
    l = BasisSet(args.corr).l
    grid = None if levels else _grid(args, data.p, l*data.p, data.n, method.penalize_lambda)
    try:
        return method, fit_method(data, method, _family(args.link), args.corr, grid, SolverOptions(), **levels, phi=args.phi, seed=args.seed,
                                  beta_family=args.penalty, lambda_family=args.lambda_penalty, n_jobs=args.threads)
    except ConvergenceError as e:
        if e.table is not None: write_table(e.table, out / 'bic_table.csv')
        raise

def _settings(args, method: MethodConfig, fit) -> dict:
    return {'method': method.name, 'score': method.score, 'score_constant': fit.context.score.constant, 'leverage': method.leverage,
            'phi_w': method.phi_w, 'penalize_lambda': method.penalize_lambda, 'structure': args.corr, 'link': args.link,
            'phi_mode': args.phi, 'phi': fit.context.family.phi, 'penalty': args.penalty, 'lambda_penalty': args.lambda_penalty, 'seed': args.seed}


## COMMANDS
def cmd_fit(args) -> int:
    out = Path(args.out)
    data = _load_data(source := _source(args))
    method, fit = _fit(args, data, out)
    estimate = None
    if args.se:
        try:
            estimate = sandwich(fit.context, fit.state)
        except (ValueError, DegenerateMatrixError) as e:
            warnings.warn(f"No standard errors: {e}", stacklevel=2)
    report = FitReport.from_fit(fit, _settings(args, method, fit), source, estimate)
    report.save(out / 'fit_report.json')
    (out / 'fit_report.txt').write_text(report.to_text(), encoding='utf-8')
    write_table(fit.selection.table, out / 'bic_table.csv')
    print(report.to_text(), end='')
    if not report.converged:
        log("The selected fit did not converge.", style='issue', show_device=False)
        return EXIT_CONVERGENCE
    log(f"Wrote {out / 'fit_report.json'}", style='success', show_device=False)
    return EXIT_OK

def cmd_tune(args) -> int:
    out = Path(args.out)
    data = _load_data(_source(args))
    method = _method(args)
    family = _family(args.link)
    if args.score_candidates:
        ctx = build_context(data, ModelSpec(family, BasisSet(args.corr), method.make_score()), leverage=method.leverage, phi_w=method.phi_w, seed=args.seed)
        grid = _grid(args, ctx.p, ctx.r, ctx.n, method.penalize_lambda)
        try:
            chosen = select_score_constant(ctx, args.score_candidates, grid, n_jobs=args.threads,
                                           penalties=Penalties(PenaltyConfig(args.lambda_penalty), PenaltyConfig(args.penalty)))
        except ConvergenceError as e:
            if e.table is not None: write_table(e.table, out / 'score_constants.csv')
            raise
        write_table(chosen.table, out / 'score_constants.csv')
        log(f"Score constant {chosen.constant:.6g} selected.", style='success', show_device=False)
        args.score_const = chosen.constant
    _, fit = _fit(args, data, out)
    write_table(fit.selection.table, out / 'bic_table.csv')
    log(f"Selected v={fit.selection.v:.6g}, omega={fit.selection.omega:.6g}: {fit.state.n_selected} coefficients, No.EE={fit.state.n_ee}.", style='success', show_device=False)
    return EXIT_OK

def cmd_simulate(args) -> int:
    out = Path(args.out)
    raw = load_json(args.scenario)
    if not isinstance(raw, dict): raise DataError(f"{args.scenario}: a scenario must be a JSON object.")
    spec = ScenarioSpec.load(args.scenario)
    if args.replicates is not None: spec = replace(spec, replicates=args.replicates)
    if args.seed: spec = replace(spec, base_seed=spec.base_seed + args.seed)
    methods = args.methods or raw.get('methods') or list(METHODS)
    points = args.grid or raw.get('grid_points', 10)
    grid = default_grid(spec.p, BasisSet(spec.working_structure).l*spec.p, spec.n, points=int(points))
    result = run_experiment(spec, methods, grid, SolverOptions(), n_jobs=args.threads)
    stem = Path(args.scenario).stem
    paths = result.save(out, prefix=stem)
    save_json({'scenario': spec.to_dict(), 'methods': [get_method(m).name for m in methods],
               'v_values': grid.v_values, 'omega_values': grid.omega_values, 'rpel_config': config.get_dict()}, out / f"{stem}_metadata.json")
    print(result.summary.to_string(index=False, float_format=lambda x: f"{x:.4g}"))
    log(f"Wrote {paths[0]} and {paths[1]}", style='success', show_device=False)
    return EXIT_OK

def cmd_diagnose(args) -> int:
    out = Path(args.out)
    report = FitReport.load(args.report)
    s = report.settings
    data = _load_data(report.source)
    if data.covariate_names != report.covariate_names: raise DataError("The data no longer matches the covariates of the report.")
    spec = ModelSpec(_family(s['link'], s['phi']), BasisSet(s['structure']), make_score(s['score'], s['score_constant']))
    ctx = build_context(data, spec, leverage=s['leverage'], phi_w=s['phi_w'], seed=s['seed'])
    state = ElState(np.array(report.beta), np.array(report.lam))
    penalties = Penalties(PenaltyConfig(s['lambda_penalty'], report.v), PenaltyConfig(s['penalty'], report.omega))

    influence = influence_sweep(ctx, state, penalties, magnitudes=args.magnitudes)
    result = {'method': report.method, 'influence': influence.to_dict()}
    try:
        result['sandwich'] = sandwich(ctx, state).to_dict()
    except (ValueError, DegenerateMatrixError) as e:
        result['sandwich'] = None
        warnings.warn(f"No sandwich estimate: {e}", stacklevel=2)
    save_json(result, out / 'diagnose_report.json')
    write_table(influence.points, out / 'influence.csv')
    print(influence.points.to_string(index=False, float_format=lambda x: f"{x:.4g}"))
    log(f"sup|IF_lambda| = {max(influence.sup_lambda.values()):.4g}, sup|IF_beta| = {max(influence.sup_beta.values()):.4g}", style='success', show_device=False)
    return EXIT_OK

def cmd_compare(args) -> int:
    out = Path(args.out)
    comparison = compare_reports([FitReport.load(path) for path in args.reports])
    write_table(comparison.table, out / 'compare.csv')
    print(comparison.table.to_string(index=False, float_format=lambda x: f"{x:.4g}"))
    log(f"{len(comparison.common)} variables selected by every report: {', '.join(comparison.common)}", style='success', show_device=False)
    return EXIT_OK

COMMANDS = {'fit': cmd_fit, 'tune': cmd_tune, 'simulate': cmd_simulate, 'diagnose': cmd_diagnose, 'compare': cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e: # --help, or a usage error
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE
    if hasattr(args, 'v') and (args.v is None) != (args.omega is None):
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: --v and --omega must be given together", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (DataError, FileNotFoundError, KeyError, ValueError) as e: # DataError is a ValueError, so bad scenario values land here too
        log(f"Data error: {e}", style='issue', show_device=False)
        return EXIT_DATA
    except ConvergenceError as e:
        log(f"No convergence: {e}", style='issue', show_device=False)
        return EXIT_CONVERGENCE
    except NumericalError as e:
        log(f"Numerical failure: {e}", style='issue', show_device=False)
        return EXIT_CONVERGENCE


def _console_main():
    sys.exit(main())
