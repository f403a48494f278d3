""" Reading longitudinal CSV files into datasets, and the fit reports written by the command-line interface. """
__all__ = ['CsvSchema', 'ingest_csv', 'FitReport', 'Comparison', 'compare_reports', 'write_table']

import math
import warnings

import numpy as np
import pandas as pd

from dataclasses import asdict, dataclass, field
from pathlib import Path
from textwrap import dedent
from typing import NamedTuple

from .core import DataError, LongitudinalDataset, Subject
from .utils import load_json, save_json


INTERCEPT_NAME = '(Intercept)'
TIME_NAME = 'time'
_MAX_LISTED_CELLS = 20


## INPUT
@dataclass(frozen=True)
class CsvSchema:
    """ Column roles of a long-format CSV file (one row per measurement).
        @param covariates [tuple[str]] (None): covariate columns, None takes every column without another role.
    """
    subject: str = 'subject'
    time: str = 'time'
    response: str = 'y'
    covariates: tuple[str, ...] = None

    def __post_init__(self):
        if self.covariates is not None:
            object.__setattr__(self, 'covariates', tuple(str(c) for c in self.covariates))
        roles = (self.subject, self.time, self.response)
        if len(set(roles)) != 3: raise DataError(f"The subject, time and response columns must differ, got {roles}.")
        if self.covariates is not None and set(self.covariates) & set(roles):
            raise DataError("A covariate column can not also be the subject, time or response column.")

    def covariate_columns(self, columns) -> tuple[str, ...]:
        if self.covariates is not None: return self.covariates
        return tuple(c for c in columns if c not in (self.subject, self.time, self.response))

    def to_dict(self) -> dict: return asdict(self)


def ingest_csv(path: str|Path, schema: CsvSchema = None, standardize: bool = True, add_intercept: bool = False, add_time: bool = False) -> LongitudinalDataset:
    """ Reads a long-format CSV file. Subjects keep the order of their first appearance,
        the rows of a subject are ordered by time.
        @param standardize [bool] (True): center the covariates and scale them to unit variance (ddof=0).
            A constant covariate is only centered.
        @param add_intercept, add_time [bool] (False): prepend a column of ones and/or the raw measurement times,
            in the order (intercept, time, covariates).
        @raise DataError: on missing columns, missing cells or non-numeric values.
    """
    schema = CsvSchema() if schema is None else schema
    df = pd.read_csv(path)
    covariates = schema.covariate_columns(df.columns)
    needed = (schema.subject, schema.time, schema.response) + covariates
    if missing := [c for c in needed if c not in df.columns]:
        raise DataError(f"{Path(path).name}: missing columns {missing}.")
    if not covariates: raise DataError(f"{Path(path).name}: no covariate columns.")

    df = df[list(needed)]
    if df.isna().to_numpy().any():
        rows, cols = np.nonzero(df.isna().to_numpy())
        cells = [f"(row {r + 2}, '{df.columns[c]}')" for r, c in zip(rows, cols)] # Row numbers as in the file, header is row 1
        more = f" and {len(cells) - _MAX_LISTED_CELLS} more" if len(cells) > _MAX_LISTED_CELLS else ""
        raise DataError(f"{Path(path).name}: missing values at {', '.join(cells[:_MAX_LISTED_CELLS])}{more}.")
    numeric = list(covariates) + [schema.time, schema.response]
    if bad := [c for c in numeric if not pd.api.types.is_numeric_dtype(df[c])]:
        raise DataError(f"{Path(path).name}: non-numeric values in columns {bad}.")

    X = df[list(covariates)].to_numpy(dtype=float)
    names = list(covariates)
    if standardize:
        center, scale = X.mean(axis=0), X.std(axis=0) # ddof=0
        if constant := [names[k] for k in np.flatnonzero(scale == 0)]:
            warnings.warn(dedent(f"""
                Covariates {constant} are constant and were only centered."""), stacklevel=2)
        X = (X - center)/np.where(scale > 0, scale, 1.)
    times = df[schema.time].to_numpy(dtype=float)
    if add_time:
        X = np.column_stack([times, X])
        names.insert(0, TIME_NAME if TIME_NAME not in names else f"{TIME_NAME}_")
    if add_intercept:
        X = np.column_stack([np.ones(len(df)), X])
        names.insert(0, INTERCEPT_NAME)

    y = df[schema.response].to_numpy(dtype=float)
    subject_ids = df[schema.subject].to_numpy()
    order, subjects, singles = pd.unique(subject_ids), [], []
    for sid in order:
        rows = np.flatnonzero(subject_ids == sid)
        rows = rows[np.argsort(times[rows], kind='stable')]
        if rows.size == 1: singles.append(sid)
        subjects.append(Subject(y[rows], X[rows], times[rows]))
    if singles:
        warnings.warn(dedent(f"""
            {len(singles)} subject(s) have a single measurement (e.g. {singles[0]!r}),
            they only contribute to the diagonal part of the working correlation."""), stacklevel=2)
    return LongitudinalDataset(tuple(subjects), covariate_names=tuple(names))


## REPORTS
def _finite_or_none(x):
    if isinstance(x, (float, np.floating)): return float(x) if math.isfinite(x) else None
    if isinstance(x, (np.integer, np.bool_)): return x.item()
    return x

def _records(table: pd.DataFrame) -> list[dict]:
    """ DataFrame -> JSON-safe list of rows (non-finite numbers become None, so reports compare equal after a round trip). """
    if table is None: return []
    return [{str(k): _finite_or_none(v) for k, v in row.items()} for row in table.to_dict(orient='records')]


@dataclass
class FitReport:
    """ Everything `rpel fit` knows about its result. The JSON file written by `save()` is the machine-readable contract,
        `to_text()` gives the human-readable summary.
        @param settings [dict]: model and solver choices needed to rebuild the fit (score, constant, structure, link, phi, ...).
        @param source [dict]: path and schema of the data file, with the ingest options.
    """
    method: str
    covariate_names: tuple[str, ...]
    beta: tuple[float, ...]
    lam: tuple[float, ...]
    bic: float
    v: float
    omega: float
    converged: bool
    settings: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)
    standard_errors: tuple[float, ...] = None # On the selected coefficients, if computed
    psi: tuple[float, ...] = None # Bias correction on the selected coefficients, if computed
    tuning: list[dict] = field(default_factory=list) # The BIC table of the grid search

    def __post_init__(self):
        self.covariate_names = tuple(str(c) for c in self.covariate_names)
        self.beta = tuple(float(b) for b in self.beta)
        self.lam = tuple(float(l) for l in self.lam)
        if len(self.beta) != len(self.covariate_names): raise DataError(f"Report has {len(self.beta)} coefficients for {len(self.covariate_names)} names.")
        for name in ('standard_errors', 'psi'):
            value = getattr(self, name)
            if value is not None:
                value = tuple(float(x) for x in value)
                if len(value) != self.n_selected: raise DataError(f"{name} must have one entry per selected coefficient.")
                setattr(self, name, value)
        self.bic, self.v, self.omega, self.converged = float(self.bic), float(self.v), float(self.omega), bool(self.converged)

    @property
    def selected(self) -> tuple[str, ...]:
        return tuple(name for name, b in zip(self.covariate_names, self.beta) if b != 0)

    @property
    def estimates(self) -> tuple[float, ...]:
        return tuple(b for b in self.beta if b != 0)

    @property
    def n_selected(self) -> int: return len(self.estimates)

    @property
    def n_ee(self) -> int: return sum(1 for l in self.lam if l != 0)

    @classmethod
    def from_fit(cls, fit, settings: dict = None, source: dict = None, sandwich=None) -> 'FitReport':
        """ @param fit [methods.MethodFit]: the fitted method.
            @param sandwich [diagnostics.SandwichEstimate] (None): adds standard errors and the bias correction.
        """
        state = fit.state
        return cls(
            method=fit.method.name, covariate_names=fit.context.data.covariate_names, beta=state.beta, lam=state.lam,
            bic=float(fit.selection.table.loc[fit.selection.table['selected'], 'bic'].iloc[0]),
            v=fit.selection.v, omega=fit.selection.omega, converged=state.converged,
            settings={} if settings is None else dict(settings), source={} if source is None else dict(source),
            standard_errors=None if sandwich is None else sandwich.standard_errors,
            psi=None if sandwich is None else sandwich.psi,
            tuning=_records(fit.selection.table)
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d['summary'] = {'selected': list(self.selected), 'estimates': list(self.estimates), 'n_selected': self.n_selected, 'n_ee': self.n_ee}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> 'FitReport':
        d = {k: v for k, v in d.items() if k != 'summary'}
        try:
            return cls(**d)
        except TypeError as e:
            raise DataError(f"Not a fit report: {e}") from None

    def save(self, path: str|Path) -> Path: return save_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: str|Path) -> 'FitReport': return cls.from_dict(load_json(path))

    def to_text(self) -> str:
        lines = [f"Method: {self.method}",
                 f"Converged: {'yes' if self.converged else 'NO'}",
                 f"Tuning: v = {self.v:.6g}, omega = {self.omega:.6g}, BIC = {self.bic:.6g}",
                 f"Selected {self.n_selected} of {len(self.beta)} coefficients, No.EE = {self.n_ee} of {len(self.lam)}", ""]
        width = max((len(s) for s in self.selected), default=8)
        header = f"{'variable':<{width}}  {'estimate':>12}"
        if self.standard_errors is not None: header += f"  {'std.err':>12}  {'corrected':>12}"
        lines.append(header)
        for k, (name, b) in enumerate(zip(self.selected, self.estimates)):
            line = f"{name:<{width}}  {b:>12.6g}"
            if self.standard_errors is not None: line += f"  {self.standard_errors[k]:>12.6g}  {b - self.psi[k]:>12.6g}"
            lines.append(line)
        return "\n".join(lines) + "\n"


class Comparison(NamedTuple):
    common: tuple[str, ...] # Variables selected by every report
    table: pd.DataFrame # Per report: n_selected, n_ee, n_common and proportion = n_common/n_selected


def compare_reports(reports) -> Comparison:
    """ Overlap of the selections of several fits of the same data. """
    reports = list(reports)
    if not reports: raise ValueError("Need at least one report to compare.")
    common = set(reports[0].selected)
    for report in reports[1:]: common &= set(report.selected)
    common = tuple(name for name in reports[0].selected if name in common)
    table = pd.DataFrame([{
        'Method': r.method, 'n_selected': r.n_selected, 'No.EE': r.n_ee, 'n_common': len(common),
        'proportion': len(common)/r.n_selected if r.n_selected else math.nan
    } for r in reports])
    return Comparison(common, table)


def write_table(table: pd.DataFrame, path: str|Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format='%.10g')
    return path
