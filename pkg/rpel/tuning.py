__all__ = ['TuningGrid', 'default_grid', 'bic_constant', 'bic_value', 'bic', 'Selection', 'select', 'ScoreSelection', 'select_score_constant']

import math
import warnings

import numpy as np
import pandas as pd

from dataclasses import dataclass
from joblib import Parallel, delayed
from textwrap import dedent
from typing import NamedTuple

from . import config
from .core import ConvergenceError, DegenerateMatrixError, NumericalError
from .estimating import EstimatingContext
from .optimizer import ElState, SolverOptions, initial_estimate, solve
from .penalties import Penalties
from .utils import is_significant, log, resolve_n_jobs


@dataclass(frozen=True)
class TuningGrid:
    """ Candidate regularization levels. `v_values` may be (0.,) to switch the multiplier penalty off.
        @param score_constants [tuple[float]] (None): candidate tuning constants for `select_score_constant()`.
    """
    v_values: tuple[float, ...]
    omega_values: tuple[float, ...]
    score_constants: tuple[float, ...] = None

    def __post_init__(self):
        for name in ('v_values', 'omega_values', 'score_constants'):
            values = getattr(self, name)
            if values is None: continue
            values = tuple(float(x) for x in np.atleast_1d(values))
            if len(values) == 0: raise ValueError(f"{name} can not be empty.")
            if any(x < 0 or not math.isfinite(x) for x in values): raise ValueError(f"{name} must be finite and nonnegative.")
            if any(b <= a for a, b in zip(values, values[1:])): raise ValueError(f"{name} must be strictly increasing.")
            object.__setattr__(self, name, values)

    @property
    def size(self) -> int: return len(self.v_values)*len(self.omega_values)


def default_grid(p: int, r: int, n: int, points: int = 10, penalize_lambda: bool = True) -> TuningGrid:
    """ `points` log-spaced values from 1e-3 to 1, scaled by sqrt(log(max(p, r))/n), for both v and omega. """
    scale = math.sqrt(math.log(max(p, r, 2))/n)
    values = tuple(np.logspace(-3, 0, points)*scale)
    return TuningGrid(values if penalize_lambda else (0.,), values)


## BIC
def bic_constant(p: int) -> float:
    """ C_p = max(1, log(log(p))). """
    return 1. if p <= math.e else max(1., math.log(math.log(p)))

def bic_value(loglik: float, n_active: int, p: int, n: int) -> float:
    return 2*loglik + n_active*bic_constant(p)*math.log(n)

def bic(ctx: EstimatingContext, state: ElState, p: int = None, n: int = None) -> float:
    """ BIC = 2*sum_i log*(1 + lam^T g_i(beta)) + |supp(beta)|*C_p*log(n). """
    return bic_value(state.loglik, state.n_selected, ctx.p if p is None else p, ctx.n if n is None else n)


## GRID SEARCH
class Selection(NamedTuple):
    v: float
    omega: float
    state: ElState
    table: pd.DataFrame


def _solve_path(ctx: EstimatingContext, v: float, omegas: tuple[float, ...], beta0: np.ndarray, penalties: Penalties, opts: SolverOptions, warm_start: bool):
    """ Solves along increasing omega for one v, each point starting from the previous solution if `warm_start`. """
    rows, states, start = [], [], beta0
    for omega in omegas:
        try:
            state = solve(ctx, start, penalties.with_levels(v, omega), opts)
        except NumericalError as e:
            rows.append({'v': v, 'omega': omega, 'bic': math.inf, 'loglik': math.nan, 'n_selected': 0, 'n_ee': 0, 'converged': False, 'outer_iters': 0, 'error': str(e)})
            states.append(None)
            continue
        rows.append({'v': v, 'omega': omega, 'bic': bic(ctx, state), 'loglik': state.loglik, 'n_selected': state.n_selected,
                     'n_ee': state.n_ee, 'converged': state.converged, 'outer_iters': state.outer_iters, 'error': ''})
        states.append(state)
        if warm_start and state.converged: start = state.beta
    return rows, states

def select(ctx: EstimatingContext, grid: TuningGrid = None, opts: SolverOptions = None, *, beta0: np.ndarray = None,
           penalties: Penalties = None, warm_start: bool = True, n_jobs: int = 1) -> Selection:
    """ Solves at every (v, omega) of `grid` and returns the BIC-minimizing point among the converged ones.
        Ties go to the larger omega, then the larger v.
        @param beta0 [np.ndarray] (None): starting coefficients, the robust initializer by default.
        @param penalties [Penalties] (None): penalty families, SCAD on both layers by default; their levels are replaced by the grid.
        @param warm_start [bool] (True): start each omega from the solution at the previous (smaller) omega.
        @param n_jobs [int] (1): number of v-paths solved concurrently, None uses `config.N_JOBS`.
        @raise ConvergenceError: if no grid point converged. The partial BIC table is attached as `.table`.
    """
    opts = SolverOptions() if opts is None else opts
    grid = default_grid(ctx.p, ctx.r, ctx.n) if grid is None else grid
    penalties = Penalties() if penalties is None else penalties
    if beta0 is None: beta0 = initial_estimate(ctx.data, ctx.family)

    jobs = (delayed(_solve_path)(ctx, v, grid.omega_values, beta0, penalties, opts, warm_start) for v in grid.v_values)
    n_jobs = resolve_n_jobs(n_jobs)
    paths = Parallel(n_jobs=n_jobs, backend='loky')(jobs) if n_jobs != 1 else [job[0](*job[1], **job[2]) for job in jobs]

    rows, states = [], []
    for i, (path_rows, path_states) in enumerate(paths): # Submission order, so the table does not depend on scheduling
        rows += path_rows
        states += path_states
        if config.VERBOSE and is_significant(i, len(paths)):
            log(f"[{i+1}/{len(paths)}] v={grid.v_values[i]:.4g}: best BIC {min(r['bic'] for r in path_rows):.4g}")
    table = pd.DataFrame(rows)

    candidates = [k for k, row in enumerate(rows) if row['converged'] and math.isfinite(row['bic'])]
    if not candidates:
        raise ConvergenceError(f"None of the {len(rows)} grid points converged.", table=table)
    best = min(candidates, key=lambda k: (rows[k]['bic'], -rows[k]['omega'], -rows[k]['v']))
    table['selected'] = [k == best for k in range(len(rows))]
    return Selection(rows[best]['v'], rows[best]['omega'], states[best], table)


## SCORE CONSTANT
class ScoreSelection(NamedTuple):
    constant: float
    selection: Selection
    table: pd.DataFrame


def select_score_constant(ctx: EstimatingContext, candidates, grid: TuningGrid = None, opts: SolverOptions = None, **select_kwargs) -> ScoreSelection:
    """ Picks the tuning constant of the score function whose BIC-optimal fit has the smallest
        determinant of the estimated covariance Ĵ^-1/n of the active coefficients.
        Fits with an empty active set or a singular Ĵ score +inf.
    """
    from .diagnostics import sandwich
    candidates = tuple(float(c) for c in np.atleast_1d(candidates))
    if len(candidates) == 0: raise ValueError("Need at least one candidate constant.")

    rows, selections = [], []
    for c in candidates:
        cctx = ctx.with_score(ctx.score.with_constant(c))
        logdet, error = math.inf, ''
        try:
            sel = select(cctx, grid, opts, **select_kwargs)
            est = sandwich(cctx, sel.state)
            sign, value = np.linalg.slogdet(np.atleast_2d(est.covariance))
            if sign > 0: logdet = float(value)
            else: error = 'non-positive determinant'
        except (ConvergenceError, DegenerateMatrixError, ValueError) as e:
            sel, error = None, str(e)
        rows.append({'constant': c, 'log_det_cov': logdet, 'error': error})
        selections.append(sel)
    table = pd.DataFrame(rows)

    finite = [k for k, row in enumerate(rows) if math.isfinite(row['log_det_cov'])]
    if not finite:
        raise ConvergenceError("No candidate constant gave a nonempty active set with a usable covariance.", table=table)
    best = min(finite, key=lambda k: rows[k]['log_det_cov'])
    if len(finite) < len(rows):
        warnings.warn(dedent(f"""
            {len(rows) - len(finite)} of {len(rows)} score constants gave no usable covariance and were skipped."""), stacklevel=2)
    return ScoreSelection(candidates[best], selections[best], table)
