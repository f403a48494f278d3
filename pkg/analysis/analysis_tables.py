""" Monte-Carlo comparison of the five method presets on the continuous and count scenarios,
    at a scale that runs in minutes on a laptop. Every function saves its tables in `analysis/results/`
    and returns the summary, so the orderings between the methods can be checked by hand or with `check_*()`.
"""
import time

import pandas as pd

from dataclasses import replace
from pathlib import Path

from context import rpel
from rpel.simulation import Contamination, ErrorLaw, ScenarioSpec, run_experiment
from rpel.tuning import default_grid
from rpel.utils import log


RESULTS = Path(__file__).parent / 'results'
METHODS = ['PEL', 'NPEL', 'ERPEL', 'HRPEL', 'TRPEL']

CONTINUOUS_CASES = {
    '1': Contamination('none'),
    '2': Contamination('y', y_rate=0.1),
    '3': Contamination('xy', y_rate=0.1, x_rate=0.05)
}
COUNT_CASES = {
    '1*': Contamination('none'),
    '2*': Contamination('count_y', y_rate=0.1),
    '3*': Contamination('count_xy', y_rate=0.1, x_rate=0.1, x_shift=1.)
}


def run_case(spec: ScenarioSpec, name: str, methods=METHODS, grid_points: int = 10, n_jobs: int = None, save: bool = True) -> pd.DataFrame:
    """ Runs `spec` for every method in `methods` and returns the summary table (one row per method).
        @param n_jobs [int] (None): replicates run concurrently, None uses `rpel.config.N_JOBS`.
    """
    grid = default_grid(spec.p, rpel.BasisSet(spec.working_structure).l*spec.p, spec.n, points=grid_points)
    t = time.perf_counter()
    result = run_experiment(spec, methods, grid, n_jobs=n_jobs)
    log(f"Case {name}: {spec.replicates} replicates in {time.perf_counter() - t:.1f}s", style='header')
    if save: result.save(RESULTS, prefix=f"case{name.replace('*', 'star')}_{spec.working_structure}")
    summary = result.summary.copy()
    summary.insert(0, 'Case', name)
    return summary


def table_continuous(errors: str = 't', n: int = 50, p: int = 50, replicates: int = 50, structure: str = 'CS', **kwargs) -> pd.DataFrame:
    """ Cases 1 to 3 of the continuous design.
        @param errors ['t'|'gaussian'] ('t'): multivariate t_3 errors, or multivariate normal errors.
    """
    base = ScenarioSpec(n=n, p=p, m=5, errors=ErrorLaw(errors, 3.), working_structure=structure, replicates=replicates)
    table = pd.concat([run_case(replace(base, contamination=c), name, **kwargs) for name, c in CONTINUOUS_CASES.items()], ignore_index=True)
    print(table.to_string(index=False, float_format=lambda x: f"{x:.3g}"))
    return table

def table_count(n: int = 50, p: int = 50, replicates: int = 50, structure: str = 'CS', **kwargs) -> pd.DataFrame:
    """ Cases 1* to 3* of the count design, on covariates scaled by `rpel.simulation.COUNT_COVARIATE_SCALE`. """
    base = ScenarioSpec(n=n, p=p, m=5, family='poisson', working_structure=structure, replicates=replicates)
    table = pd.concat([run_case(replace(base, contamination=c), name, **kwargs) for name, c in COUNT_CASES.items()], ignore_index=True)
    print(table.to_string(index=False, float_format=lambda x: f"{x:.3g}"))
    return table


## ORDERINGS
def _row(table: pd.DataFrame, case: str, method: str) -> pd.Series:
    return table[(table['Case'] == case) & (table['Method'] == method)].iloc[0]

def check_outlier_robustness(table: pd.DataFrame) -> bool:
    """ Case 2 of the t_3 design: TRPEL and ERPEL recover the true model at least 25 points more often than NPEL,
        and the y-outliers make NPEL keep more estimating equations than in Case 1.
    """
    npel = _row(table, '2', 'NPEL')
    ok = all(_row(table, '2', m)['CF'] >= npel['CF'] + 25 for m in ('TRPEL', 'ERPEL'))
    ok &= npel['No.EE'] > _row(table, '1', 'NPEL')['No.EE']
    log(f"Outlier robustness {'holds' if ok else 'FAILS'}", style='success' if ok else 'issue')
    return bool(ok)

def check_clean_gaussian(table: pd.DataFrame) -> bool:
    """ Case 1 with Gaussian errors: every method reaches CF >= 70 and AEE <= 0.2, and no robust method has more than twice the AEE of NPEL. """
    clean = table[table['Case'] == '1']
    ok = bool((clean['CF'] >= 70).all() and (clean['AEE'] <= 0.2).all())
    npel = _row(table, '1', 'NPEL')['AEE']
    ok &= all(_row(table, '1', m)['AEE'] <= 2*npel for m in ('ERPEL', 'HRPEL', 'TRPEL'))
    log(f"Clean Gaussian efficiency {'holds' if ok else 'FAILS'}", style='success' if ok else 'issue')
    return bool(ok)

def check_count_outliers(table: pd.DataFrame) -> bool:
    """ Case 2*: the robust presets have a smaller AEE and a larger CF than PEL. """
    pel = _row(table, '2*', 'PEL')
    ok = all(_row(table, '2*', m)['AEE'] < pel['AEE'] and _row(table, '2*', m)['CF'] > pel['CF'] for m in ('ERPEL', 'HRPEL', 'TRPEL'))
    log(f"Count outlier robustness {'holds' if ok else 'FAILS'}", style='success' if ok else 'issue')
    return bool(ok)


if __name__ == "__main__":
    heavy = table_continuous('t')
    check_outlier_robustness(heavy)
    clean = table_continuous('gaussian')
    check_clean_gaussian(clean)
    counts = table_count()
    check_count_outliers(counts)
