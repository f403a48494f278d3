""" Monte-Carlo scenarios: correlated longitudinal data generators, outlier injection,
    variable-selection metrics and the replicated experiment that compares several methods on identical data.
"""
__all__ = [
    'COUNT_COVARIATE_SCALE', 'Correlation', 'ErrorLaw', 'Contamination', 'ScenarioSpec',
    'correlation_matrix', 'covariate_covariance', 'gen_continuous', 'gen_count', 'generate', 'contaminate',
    'MetricSummary', 'metrics', 'ExperimentResult', 'run_experiment'
]

import math
import warnings

import numpy as np
import pandas as pd

from dataclasses import asdict, dataclass, field
from joblib import Parallel, delayed
from pathlib import Path
from scipy.stats import norm, poisson
from textwrap import dedent
from typing import Literal

from . import config
from .core import ConvergenceError, DataError, DegenerateMatrixError, LongitudinalDataset, ModelFamily, NumericalError
from .methods import MethodConfig, fit_method, get_method
from .optimizer import SolverOptions
from .tuning import TuningGrid, bic
from .utils import is_significant, load_json, log, resolve_n_jobs, save_json


COUNT_COVARIATE_SCALE = 0.2 # Keeps exp(x^T beta) in a safe range for the default beta
_MAX_LOG_MEAN = 30.


## SCENARIO
@dataclass(frozen=True)
class Correlation:
    """ True within-subject correlation R(alpha). """
    structure: Literal['CS', 'AR1'] = 'CS'
    alpha: float = 0.7

    def __post_init__(self):
        structure = str(self.structure).upper()
        if structure not in (allowed := ['CS', 'AR1']):
            raise ValueError(f"structure='{self.structure}' is invalid: allowed values are {allowed}.")
        object.__setattr__(self, 'structure', structure)
        if not -1 < self.alpha < 1: raise ValueError(f"alpha must lie in (-1, 1), got {self.alpha}.")


@dataclass(frozen=True)
class ErrorLaw:
    """ @param law ['gaussian'|'t'|'copula'] ('gaussian'): multivariate normal errors, multivariate Student t
            errors with `df` degrees of freedom, or (count data) a Gaussian copula of Poisson marginals.
    """
    law: Literal['gaussian', 't', 'copula'] = 'gaussian'
    df: float = 3.

    def __post_init__(self):
        law = str(self.law).lower()
        if law not in (allowed := ['gaussian', 't', 'copula']):
            raise ValueError(f"law='{self.law}' is invalid: allowed values are {allowed}.")
        object.__setattr__(self, 'law', law)
        if not self.df > 0: raise ValueError(f"df must be positive, got {self.df}.")


@dataclass(frozen=True)
class Contamination:
    """ Outlier injection applied after generation.
        @param kind ['none'|'y'|'xy'|'count_y'|'count_xy'] ('none'):
            'y': add N(`y_location`, `y_scale`) to a fraction `y_rate` of all responses.
            'xy': additionally replace x_1 by a t(`x_df`) draw in a fraction `x_rate` of the rows.
            'count_y': add round(chi2(`count_df`)), redrawn while 0, to a fraction `y_rate` of the counts.
            'count_xy': additionally add `x_shift` to x_1 in a fraction `x_rate` of the rows.
        The rows hit by y- and x-outliers are drawn independently.
    """
    kind: Literal['none', 'y', 'xy', 'count_y', 'count_xy'] = 'none'
    y_rate: float = 0.1
    x_rate: float = 0.
    y_location: float = 10.
    y_scale: float = 1.
    x_df: float = 3.
    count_df: float = 3.
    x_shift: float = 1.

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in (allowed := ['none', 'y', 'xy', 'count_y', 'count_xy']):
            raise ValueError(f"kind='{self.kind}' is invalid: allowed values are {allowed}.")
        object.__setattr__(self, 'kind', kind)
        for name in ('y_rate', 'x_rate'):
            if not 0 <= getattr(self, name) <= 1: raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}.")
        if min(self.x_df, self.count_df) <= 0 or self.y_scale < 0: raise ValueError("Contamination laws need positive df and nonnegative scale.")

    @property
    def touches_x(self) -> bool: return self.kind in ('xy', 'count_xy')

    @property
    def is_count(self) -> bool: return self.kind.startswith('count')


@dataclass(frozen=True)
class ScenarioSpec:
    """ A simulation design. Coefficients not listed in `beta` are zero, so `beta` may be shorter than `p`.
        @param covariate_scale [float] (None): standard deviation of every covariate.
            Defaults to 1 for continuous data and `COUNT_COVARIATE_SCALE` for counts.
        @param working_structure [str] ('CS'): working correlation of the estimating equations.
    """
    n: int = 50
    p: int = 100
    m: int = 5
    family: Literal['gaussian', 'poisson'] = 'gaussian'
    beta: tuple[float, ...] = (3., 1.5, 0., 0., 2.)
    correlation: Correlation = Correlation()
    errors: ErrorLaw = None
    contamination: Contamination = Contamination()
    covariate_rho: float = 0.5
    covariate_scale: float = None
    working_structure: Literal['CS', 'AR1', 'IND'] = 'CS'
    replicates: int = 100
    base_seed: int = 0

    def __post_init__(self):
        family = str(self.family).lower()
        if family not in (allowed := ['gaussian', 'poisson']):
            raise ValueError(f"family='{self.family}' is invalid: allowed values are {allowed}.")
        object.__setattr__(self, 'family', family)
        if min(self.n, self.p, self.m) < 1 or self.n < 2: raise ValueError("Need n >= 2, p >= 1 and m >= 1.")
        if self.replicates < 1: raise ValueError(f"replicates must be at least 1, got {self.replicates}.")
        beta = tuple(float(b) for b in self.beta)
        if len(beta) > self.p: raise ValueError(f"Got {len(beta)} coefficients for p={self.p}.")
        object.__setattr__(self, 'beta', beta + (0.,)*(self.p - len(beta)))

        # Nested parts may arrive as dicts (from JSON)
        for name, cls in (('correlation', Correlation), ('errors', ErrorLaw), ('contamination', Contamination)):
            value = getattr(self, name)
            if isinstance(value, dict): object.__setattr__(self, name, cls(**value))
        if self.errors is None: object.__setattr__(self, 'errors', ErrorLaw('copula' if family == 'poisson' else 'gaussian'))
        if (family == 'poisson') != (self.errors.law == 'copula'):
            raise ValueError(f"The '{self.errors.law}' error law does not fit the {family} family.")
        if (family == 'gaussian' and self.contamination.is_count) or (family == 'poisson' and self.contamination.kind in ('y', 'xy')):
            raise ValueError(f"Contamination '{self.contamination.kind}' does not fit the {family} family.")
        if self.covariate_scale is None:
            object.__setattr__(self, 'covariate_scale', COUNT_COVARIATE_SCALE if family == 'poisson' else 1.)
        if not self.covariate_scale > 0: raise ValueError(f"covariate_scale must be positive, got {self.covariate_scale}.")
        if not -1 < self.covariate_rho < 1: raise ValueError(f"covariate_rho must lie in (-1, 1), got {self.covariate_rho}.")

    @property
    def beta_true(self) -> np.ndarray: return np.array(self.beta)

    @property
    def support(self) -> np.ndarray: return np.flatnonzero(self.beta_true)

    @property
    def model_family(self) -> ModelFamily:
        return ModelFamily.poisson() if self.family == 'poisson' else ModelFamily.gaussian()

    def to_dict(self) -> dict:
        d = asdict(self)
        d['beta'] = list(self.beta[:self.support.max() + 1]) if self.support.size else []
        return d

    @classmethod
    def from_dict(cls, d: dict) -> 'ScenarioSpec':
        known = set(cls.__dataclass_fields__)
        if unknown := set(d) - known: raise DataError(f"Unknown scenario fields {sorted(unknown)}: allowed are {sorted(known)}.")
        return cls(**d)

    def save(self, path: str|Path) -> Path: return save_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: str|Path) -> 'ScenarioSpec':
        """ Reads a scenario JSON file. Extra top-level keys 'methods' and 'grid_points' are ignored here. """
        d = load_json(path)
        return cls.from_dict({k: v for k, v in d.items() if k not in ('methods', 'grid_points')})


def correlation_matrix(correlation: Correlation, m: int) -> np.ndarray:
    k = np.arange(m)
    if correlation.structure == 'AR1':
        return correlation.alpha**np.abs(k[:, None] - k[None, :])
    return np.where(k[:, None] == k[None, :], 1., correlation.alpha)

def covariate_covariance(spec: ScenarioSpec) -> np.ndarray:
    """ (Sigma_x)_kl = scale^2 * rho^|k-l|. """
    k = np.arange(spec.p)
    return spec.covariate_scale**2*spec.covariate_rho**np.abs(k[:, None] - k[None, :])


## GENERATORS
def _covariates(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    L = np.linalg.cholesky(covariate_covariance(spec))
    return rng.standard_normal((spec.n*spec.m, spec.p)) @ L.T

def _correlated_normals(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    L = np.linalg.cholesky(correlation_matrix(spec.correlation, spec.m))
    return rng.standard_normal((spec.n, spec.m)) @ L.T

def _as_dataset(spec: ScenarioSpec, y: np.ndarray, X: np.ndarray) -> LongitudinalDataset:
    m = spec.m
    return LongitudinalDataset.from_arrays([y[i*m:(i+1)*m] for i in range(spec.n)], [X[i*m:(i+1)*m] for i in range(spec.n)])

def gen_continuous(spec: ScenarioSpec, seed) -> LongitudinalDataset:
    """ y_ij = x_ij^T beta + e_ij with x_ij ~ N_p(0, Sigma_x) and e_i ~ N_m(0, R(alpha)) or multivariate t_df(0, R(alpha)).
        @param seed [int|np.random.SeedSequence]: anything `np.random.default_rng` accepts.
    """
    if spec.family != 'gaussian': raise ValueError("gen_continuous needs a gaussian scenario.")
    rng = np.random.default_rng(seed)
    X = _covariates(spec, rng)
    errors = _correlated_normals(spec, rng)
    if spec.errors.law == 't':
        q = rng.chisquare(spec.errors.df, size=spec.n)
        errors = errors/np.sqrt(q/spec.errors.df)[:, None]
    y = X @ spec.beta_true + errors.ravel()
    return _as_dataset(spec, y, X)

def gen_count(spec: ScenarioSpec, seed) -> LongitudinalDataset:
    """ Correlated Poisson counts with log(mu_ij) = x_ij^T beta through a Gaussian copula:
        y_ij = F^-1_Poisson(Phi(z_ij); mu_ij) with z_i ~ N_m(0, R(alpha)).
        The copula attenuates the within-subject correlation of the counts below alpha.
        @raise NumericalError: if some log-mean exceeds the safe range.
    """
    if spec.family != 'poisson': raise ValueError("gen_count needs a poisson scenario.")
    rng = np.random.default_rng(seed)
    X = _covariates(spec, rng)
    eta = X @ spec.beta_true
    if (worst := float(np.max(eta))) > _MAX_LOG_MEAN:
        raise NumericalError(f"Poisson mean overflow: log-mean {worst:.4g} exceeds {_MAX_LOG_MEAN:g} (reduce covariate_scale or beta).")
    mu = np.exp(eta)
    u = np.clip(norm.cdf(_correlated_normals(spec, rng).ravel()), 1e-15, 1 - 1e-15)
    y = poisson.ppf(u, mu)
    return _as_dataset(spec, y, X)

def generate(spec: ScenarioSpec, seed) -> LongitudinalDataset:
    return gen_count(spec, seed) if spec.family == 'poisson' else gen_continuous(spec, seed)


## CONTAMINATION
def _pick(rng: np.random.Generator, N: int, rate: float) -> np.ndarray:
    """ Exactly floor(rate*N) distinct row indices, sorted. """
    k = math.floor(rate*N + 1e-9)
    return np.sort(rng.choice(N, size=k, replace=False)) if k else np.zeros(0, dtype=int)

def contaminate(data: LongitudinalDataset, contamination: Contamination, seed) -> LongitudinalDataset:
    """ Returns a contaminated copy of `data` (see `Contamination` for the laws).
        Exactly floor(rate*N) entries are modified per contaminated quantity, all other entries stay bit-identical.
        Without anything to inject, `data` itself is returned.
    """
    c = contamination
    y_rate = c.y_rate if c.kind != 'none' else 0.
    x_rate = c.x_rate if c.touches_x else 0.
    if y_rate == 0 and x_rate == 0: return data

    rng = np.random.default_rng(seed)
    N = data.N
    y, X = data.y_stacked.copy(), data.X_stacked.copy()
    rows = _pick(rng, N, y_rate)
    if c.is_count:
        added = np.floor(rng.chisquare(c.count_df, size=rows.size) + 0.5)
        while np.any(zero := added == 0): # A zero increment would leave the count unchanged
            added[zero] = np.floor(rng.chisquare(c.count_df, size=int(zero.sum())) + 0.5)
        y[rows] += added
    else:
        y[rows] += rng.normal(c.y_location, c.y_scale, size=rows.size)
    if x_rate > 0:
        rows = _pick(rng, N, x_rate)
        if c.is_count: X[rows, 0] += c.x_shift
        else: X[rows, 0] = rng.standard_t(c.x_df, size=rows.size)
    return data.replace_stacked(y=y, X=X)


## METRICS
@dataclass
class MetricSummary:
    C: float # Mean number of true zeros estimated as zero
    IC: float # Mean number of true nonzeros estimated as zero
    CF: float # Percentage of exactly recovered supports
    n_ee: float # Mean |supp(lam)|
    bias: dict[int, float] = field(default_factory=dict) # Coordinate (0-based) -> mean(beta-hat - beta)
    mse: dict[int, float] = field(default_factory=dict)
    AEE: float = math.nan # Mean of ||beta-hat - beta||^2
    MME: float = math.nan # Median of (beta-hat - beta)^T Sigma_x (beta-hat - beta)
    count: int = 0 # Number of fits summarized

    def row(self, method: str = None) -> dict:
        """ A flat row with the column names of the results tables (coefficients numbered from 1). """
        row = {} if method is None else {'Method': method}
        for k in self.bias:
            row[f"Bias_b{k+1}"] = self.bias[k]
            row[f"MSE_b{k+1}"] = self.mse[k]
        row.update({'AEE': self.AEE, 'MME': self.MME, 'C': self.C, 'IC': self.IC, 'CF': self.CF, 'No.EE': self.n_ee})
        return row


def metrics(fits, truth, sigma_x: np.ndarray = None) -> MetricSummary:
    """ @param fits [list[tuple[np.ndarray, int]]]: (beta-hat, No.EE) per replicate.
        @param truth [np.ndarray]: the true coefficient vector.
        @param sigma_x [np.ndarray] (None): covariance of the covariates for the model error, identity by default.
    """
    truth = np.asarray(truth, dtype=float)
    support = np.flatnonzero(truth)
    zero = truth == 0
    if not fits:
        nan = {int(k): math.nan for k in support}
        return MetricSummary(math.nan, math.nan, math.nan, math.nan, nan, dict(nan))
    B = np.array([np.asarray(b, dtype=float) for b, _ in fits])
    if B.shape[1] != truth.size: raise ValueError(f"Estimates have {B.shape[1]} coefficients, the truth has {truth.size}.")
    n_ee = np.array([e for _, e in fits], dtype=float)
    sigma_x = np.eye(truth.size) if sigma_x is None else np.asarray(sigma_x, dtype=float)

    E = B - truth
    estimated_zero = B == 0
    return MetricSummary(
        C=float(np.mean(np.sum(estimated_zero & zero, axis=1))),
        IC=float(np.mean(np.sum(estimated_zero & ~zero, axis=1))),
        CF=100*float(np.mean(np.all(estimated_zero == zero, axis=1))),
        n_ee=float(np.mean(n_ee)),
        bias={int(k): float(np.mean(E[:, k])) for k in support},
        mse={int(k): float(np.mean(E[:, k]**2)) for k in support},
        AEE=float(np.mean(np.sum(E**2, axis=1))),
        MME=float(np.median(np.einsum('ij,jk,ik->i', E, sigma_x, E))),
        count=len(fits)
    )


## EXPERIMENT
@dataclass
class ExperimentResult:
    summary: pd.DataFrame # One row per method
    replicates: pd.DataFrame # One row per (replicate, method)

    def save(self, directory: str|Path, prefix: str = 'experiment') -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = (directory / f"{prefix}_summary.csv", directory / f"{prefix}_replicates.csv")
        self.summary.to_csv(paths[0], index=False, float_format='%.10g')
        self.replicates.to_csv(paths[1], index=False, float_format='%.10g')
        return paths


def _replicate(spec: ScenarioSpec, methods: tuple[MethodConfig, ...], k: int, grid: TuningGrid, opts: SolverOptions) -> list[dict]:
    """ Generates, contaminates and fits replicate `k`. Data and contamination use independent streams of seed `base_seed + k`. """
    seed = spec.base_seed + k
    data_stream, outlier_stream = np.random.SeedSequence(seed).spawn(2)
    data = contaminate(generate(spec, data_stream), spec.contamination, outlier_stream)
    family = spec.model_family

    rows = []
    for method in methods:
        row = {'replicate': k, 'method': method.name, 'seed': seed}
        try:
            fit = fit_method(data, method, family, spec.working_structure, grid, opts, seed=seed)
            state = fit.state
            row.update({'converged': state.converged, 'n_selected': state.n_selected, 'n_ee': state.n_ee,
                        'v': fit.selection.v, 'omega': fit.selection.omega, 'bic': bic(fit.context, state), 'error': ''})
            beta = state.beta
        except (ConvergenceError, NumericalError, DegenerateMatrixError) as e:
            row.update({'converged': False, 'n_selected': 0, 'n_ee': 0, 'v': math.nan, 'omega': math.nan, 'bic': math.nan, 'error': f"{type(e).__name__}: {e}"})
            beta = np.full(spec.p, np.nan)
        row.update({f"beta_{j+1}": float(b) for j, b in enumerate(beta)})
        rows.append(row)
    return rows


def run_experiment(spec: ScenarioSpec, methods, grid: TuningGrid = None, opts: SolverOptions = None, n_jobs: int = 1) -> ExperimentResult:
    """ Runs `spec.replicates` replicates, fitting every method to the same data of each replicate.
        @param methods [list[MethodConfig|str]]: method configurations or preset names.
        @param grid [TuningGrid] (None): tuning grid shared by all fits, the data-driven default grid if None.
        @param n_jobs [int] (1): number of replicates run concurrently, None uses `config.N_JOBS`.
            The result does not depend on this number.
        Failed fits (no converged grid point or a numerical error) are excluded from the metrics and counted.
    """
    methods = tuple(get_method(m) if isinstance(m, str) else m for m in methods)
    if not methods: raise ValueError("Need at least one method.")
    if len({m.name for m in methods}) != len(methods): raise ValueError("Method names must be unique.")
    opts = SolverOptions() if opts is None else opts

    n_jobs = resolve_n_jobs(n_jobs)
    R = spec.replicates
    if n_jobs == 1:
        results = []
        for k in range(R):
            results.append(_replicate(spec, methods, k, grid, opts))
            if config.VERBOSE and is_significant(k, R): log(f"Replicate {k+1}/{R} done.")
    else:
        results = Parallel(n_jobs=n_jobs, backend='loky')(delayed(_replicate)(spec, methods, k, grid, opts) for k in range(R))
    replicates = pd.DataFrame([row for rows in results for row in rows]) # Submission order

    sigma_x, truth = covariate_covariance(spec), spec.beta_true
    beta_cols = [f"beta_{j+1}" for j in range(spec.p)]
    summary = []
    for method in methods:
        table = replicates[replicates['method'] == method.name]
        ok = table[table['error'] == '']
        fits = list(zip(ok[beta_cols].to_numpy(), ok['n_ee'].to_numpy()))
        failures = len(table) - len(ok)
        if failures:
            warnings.warn(dedent(f"""
                {failures} of {len(table)} replicates failed for method {method.name} and are excluded from its metrics."""), stacklevel=2)
        summary.append(metrics(fits, truth, sigma_x).row(method.name) | {'failures': failures})
    return ExperimentResult(pd.DataFrame(summary), replicates)

