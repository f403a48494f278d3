""" Empirical coverage of the bias-corrected sandwich intervals on clean Gaussian data. """
import math
import time

import numpy as np
import pandas as pd

from joblib import Parallel, delayed
from pathlib import Path

from context import rpel
from rpel.diagnostics import sandwich
from rpel.methods import HRPEL, fit_method
from rpel.simulation import ScenarioSpec, generate
from rpel.utils import is_significant, log


RESULTS = Path(__file__).parent / 'results'


def _coverage_replicate(spec: ScenarioSpec, k: int, level: float, grid_points: int) -> dict:
    seed = spec.base_seed + k
    data = generate(spec, np.random.SeedSequence(seed).spawn(2)[0])
    truth = spec.beta_true
    row = {'replicate': k, 'covered': 0, 'tested': 0, 'error': ''}
    try:
        grid = rpel.tuning.default_grid(spec.p, 2*spec.p, spec.n, points=grid_points)
        fit = fit_method(data, HRPEL, spec.model_family, spec.working_structure, grid, seed=seed)
        est = sandwich(fit.context, fit.state)
    except (rpel.ConvergenceError, rpel.NumericalError, ValueError) as e:
        row['error'] = f"{type(e).__name__}: {e}"
        return row
    intervals = est.intervals(level)
    for j, t in enumerate(est.active_beta):
        if truth[t] == 0: continue
        row['tested'] += 1
        row['covered'] += int(intervals[j, 0] <= truth[t] <= intervals[j, 1])
    row['missed_support'] = int(np.sum(fit.beta[spec.support] == 0))
    return row


def analysis_coverage(n: int = 100, p: int = 10, replicates: int = 200, level: float = 0.95, grid_points: int = 8, n_jobs: int = None, save: bool = True):
    """ Fits HRPEL to `replicates` clean Gaussian datasets with three nonzero coefficients and reports which fraction
        of the bias-corrected `level` intervals of the selected true coefficients contain the true value.
        @return [float]: the empirical coverage, expected to lie in roughly [0.90, 0.99] for level 0.95.
    """
    spec = ScenarioSpec(n=n, p=p, m=5, beta=(3., 1.5, 0., 0., 2.), replicates=replicates)
    n_jobs = rpel.utils.resolve_n_jobs(n_jobs)
    t = time.perf_counter()
    rows = Parallel(n_jobs=n_jobs, backend='loky')(delayed(_coverage_replicate)(spec, k, level, grid_points) for k in range(replicates))
    for k, row in enumerate(rows):
        if row['error'] and is_significant(k, replicates, order=0): log(f"Replicate {k} failed: {row['error']}", style='issue')
    table = pd.DataFrame(rows)
    tested = int(table['tested'].sum())
    coverage = table['covered'].sum()/tested if tested else math.nan
    log(f"Coverage of {level:.0%} intervals: {coverage:.3f} over {tested} intervals, "
        f"{(table['error'] != '').sum()} failed fits, {time.perf_counter() - t:.1f}s", style='success')
    if save: rpel.io.write_table(table, RESULTS / 'coverage.csv')
    return coverage


if __name__ == "__main__":
    analysis_coverage()
