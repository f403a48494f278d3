__all__ = [
    'RPELError', 'DataError', 'NumericalError', 'DegenerateMatrixError', 'ConvergenceError',
    'Subject', 'LongitudinalDataset', 'ModelFamily', 'BasisSet',
    'mean_vector', 'variance_diagonal', 'variance_matrix', 'mean_jacobian', 'estimate_dispersion'
]

import warnings

import numpy as np

from dataclasses import dataclass
from functools import lru_cache
from statsmodels.robust.scale import mad
from textwrap import dedent
from typing import Iterable, Literal


## ERRORS
class RPELError(Exception):
    """ Base class of all errors raised deliberately by rpel. """

class DataError(RPELError, ValueError):
    """ The input data (or a quantity derived directly from it) is unusable. """

class NumericalError(RPELError, ArithmeticError):
    """ A computation left its numerically safe range (e.g. exp overflow). """

class DegenerateMatrixError(NumericalError):
    """ A matrix that must be inverted is (numerically) singular. """

class ConvergenceError(RPELError, RuntimeError):
    """ No usable solution was found. `table` holds whatever partial results exist. """
    def __init__(self, message: str, table=None):
        super().__init__(message)
        self.table = table


def _frozen_array(a, dtype=float, ndim: int = None, name: str = "array") -> np.ndarray:
    arr = np.array(a, dtype=dtype) # Always a copy, so the caller can not mutate it behind our back
    if ndim is not None and arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}.")
    arr.setflags(write=False)
    return arr


## DATA
@dataclass(frozen=True, eq=False)
class Subject:
    """ One cluster of repeated measurements: `y` (m,), `X` (m, p) and the measurement `times` (m,). """
    y: np.ndarray
    X: np.ndarray
    times: np.ndarray = None

    def __post_init__(self):
        y = _frozen_array(self.y, ndim=1, name="y")
        X = _frozen_array(self.X, name="X")
        if X.ndim == 1: X = _frozen_array(X.reshape(-1, 1), name="X")
        times = np.arange(y.size, dtype=float) if self.times is None else self.times
        times = _frozen_array(times, ndim=1, name="times")
        if X.ndim != 2: raise DataError(f"X must be 2-dimensional, got shape {X.shape}.")
        if X.shape[0] != y.size: raise DataError(f"X has {X.shape[0]} rows but y has {y.size} entries.")
        if times.size != y.size: raise DataError(f"times has {times.size} entries but y has {y.size}.")
        if y.size < 1: raise DataError("A subject needs at least one measurement.")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X)) and np.all(np.isfinite(times))):
            raise DataError("Subjects can not contain non-finite values.")
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'times', times)

    @property
    def m(self) -> int: return self.y.size


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """ Immutable container of `n` subjects, all sharing the same `p` covariates.
        @param subjects [Iterable[Subject]]: the clusters, in a fixed order (this order is the subject index `i`).
        @param covariate_names [tuple[str]] (None): names of the `p` columns, defaults to 'x1', ..., 'xp'.
    """
    subjects: tuple[Subject, ...]
    covariate_names: tuple[str, ...] = None

    def __post_init__(self):
        subjects = tuple(s if isinstance(s, Subject) else Subject(*s) for s in self.subjects)
        object.__setattr__(self, 'subjects', subjects)
        if len(subjects) < 2: raise DataError(f"At least 2 subjects are needed, got {len(subjects)}.")
        p = subjects[0].X.shape[1]
        for i, s in enumerate(subjects):
            if s.X.shape[1] != p: raise DataError(f"Subject {i} has {s.X.shape[1]} covariates instead of {p}.")
        names = tuple(f"x{k+1}" for k in range(p)) if self.covariate_names is None else tuple(str(c) for c in self.covariate_names)
        if len(names) != p: raise DataError(f"Got {len(names)} covariate names for {p} covariates.")
        object.__setattr__(self, 'covariate_names', names)

    @classmethod
    def from_arrays(cls, y: Iterable, X: Iterable, times: Iterable = None, covariate_names=None) -> 'LongitudinalDataset':
        """ Builds a dataset from per-subject lists `y[i]`, `X[i]` (and optionally `times[i]`). """
        if times is None: times = [None]*len(y)
        return cls(tuple(Subject(yi, Xi, ti) for yi, Xi, ti in zip(y, X, times)), covariate_names=covariate_names)

    @property
    def n(self) -> int: return len(self.subjects)

    @property
    def p(self) -> int: return self.subjects[0].X.shape[1]

    @property
    def cluster_sizes(self) -> np.ndarray: return np.array([s.m for s in self.subjects], dtype=int)

    @property
    def N(self) -> int:
        """ Total number of observations over all subjects. """
        return int(self.cluster_sizes.sum())

    @property
    def offsets(self) -> np.ndarray:
        """ Row index in the stacked arrays where each subject starts (length `n+1`). """
        return np.concatenate([[0], np.cumsum(self.cluster_sizes)])

    @property
    def y_stacked(self) -> np.ndarray: return np.concatenate([s.y for s in self.subjects])

    @property
    def X_stacked(self) -> np.ndarray: return np.vstack([s.X for s in self.subjects])

    @property
    def times_stacked(self) -> np.ndarray: return np.concatenate([s.times for s in self.subjects])

    def replace_stacked(self, y: np.ndarray = None, X: np.ndarray = None) -> 'LongitudinalDataset':
        """ Returns a new dataset with the same cluster structure, but with the stacked response
            and/or stacked covariate matrix replaced (used to inject contamination).
        """
        y = self.y_stacked if y is None else np.asarray(y, dtype=float)
        X = self.X_stacked if X is None else np.asarray(X, dtype=float)
        if y.shape != (self.N,) or X.shape != (self.N, self.p):
            raise DataError(f"Stacked arrays must have shapes ({self.N},) and ({self.N}, {self.p}).")
        o = self.offsets
        subjects = tuple(Subject(y[o[i]:o[i+1]], X[o[i]:o[i+1]], s.times) for i, s in enumerate(self.subjects))
        return LongitudinalDataset(subjects, covariate_names=self.covariate_names)


## MODEL
@dataclass(frozen=True)
class ModelFamily:
    """ Marginal mean/variance model.
        @param link ['identity'|'log'] ('identity'): the canonical link of the continuous or the count model.
        @param variance ['constant'|'mean'] (None): v(mu), determined by `link` if not given explicitly.
        @param phi [float] (1.): the dispersion, Var(y) = phi*v(mu).
    """
    link: Literal['identity', 'log'] = 'identity'
    variance: Literal['constant', 'mean'] = None
    phi: float = 1.

    def __post_init__(self):
        if self.link not in (allowed := ['identity', 'log']):
            raise ValueError(f"link='{self.link}' is invalid: allowed values are {allowed}.")
        variance = {'identity': 'constant', 'log': 'mean'}[self.link]
        if self.variance is None: object.__setattr__(self, 'variance', variance)
        elif self.variance != variance:
            raise ValueError(f"link='{self.link}' must be paired with variance='{variance}', not '{self.variance}'.")
        if not (np.isfinite(self.phi) and self.phi > 0): raise ValueError(f"Dispersion phi must be positive, got {self.phi}.")
        object.__setattr__(self, 'phi', float(self.phi))

    @classmethod
    def gaussian(cls, phi: float = 1.): return cls('identity', phi=phi)

    @classmethod
    def poisson(cls, phi: float = 1.): return cls('log', phi=phi)

    @property
    def is_count(self) -> bool: return self.link == 'log'

    def with_phi(self, phi: float) -> 'ModelFamily': return ModelFamily(self.link, self.variance, phi)

    def inverse_link(self, eta: np.ndarray) -> np.ndarray:
        if self.link == 'identity': return np.array(eta, dtype=float)
        with np.errstate(over='ignore'):
            return np.exp(eta)

    def mu_eta(self, mu: np.ndarray) -> np.ndarray:
        """ dmu/deta, expressed in terms of mu. """
        return np.ones_like(mu) if self.link == 'identity' else mu

    def mu_eta2(self, mu: np.ndarray) -> np.ndarray:
        """ d²mu/deta², expressed in terms of mu. """
        return np.zeros_like(mu) if self.link == 'identity' else mu

    def v(self, mu: np.ndarray) -> np.ndarray:
        return np.ones_like(mu) if self.variance == 'constant' else mu

    def dlogv(self, mu: np.ndarray) -> np.ndarray:
        """ v'(mu)/v(mu). """
        return np.zeros_like(mu) if self.variance == 'constant' else 1/mu


@lru_cache(maxsize=128)
def _basis_matrices(structure: str, m: int) -> tuple[np.ndarray, ...]:
    M1 = np.eye(m)
    if structure == 'IND':
        mats = (M1,)
    elif structure == 'CS':
        mats = (M1, np.ones((m, m)) - M1)
    else: # AR1
        mats = (M1, np.eye(m, k=1) + np.eye(m, k=-1))
    for M in mats: M.setflags(write=False) # Shared between all callers through the cache
    return mats


@dataclass(frozen=True)
class BasisSet:
    """ Basis matrices M_k of the inverse working correlation.
        'CS' and 'AR1' give [identity, off-diagonal structure], 'IND' gives only the identity.
    """
    structure: Literal['CS', 'AR1', 'IND'] = 'CS'

    def __post_init__(self):
        structure = str(self.structure).upper()
        if structure not in (allowed := ['CS', 'AR1', 'IND']):
            raise ValueError(f"structure='{self.structure}' is invalid: allowed values are {allowed}.")
        object.__setattr__(self, 'structure', structure)

    @property
    def l(self) -> int: return 1 if self.structure == 'IND' else 2

    def matrices(self, m: int) -> tuple[np.ndarray, ...]:
        if m < 1: raise ValueError(f"Cluster size must be at least 1, got {m}.")
        return _basis_matrices(self.structure, int(m))

    def stacked(self, m: int) -> np.ndarray:
        """ @return [np.ndarray]: shape (l, m, m). """
        return np.stack(self.matrices(m))


## MEAN AND VARIANCE
def _check_mean(mu: np.ndarray, subject: int = None):
    bad = np.flatnonzero(~np.isfinite(mu))
    if bad.size:
        where = f"subject {subject}, " if subject is not None else ""
        raise NumericalError(f"mean overflow in {where}row {int(bad[0])}")

def mean_vector(X: np.ndarray, beta: np.ndarray, family: ModelFamily, subject: int = None) -> np.ndarray:
    """ mu = g^{-1}(X @ beta). `subject` only serves to make the overflow message more informative. """
    X, beta = np.asarray(X, dtype=float), np.asarray(beta, dtype=float)
    if X.shape[-1] != beta.size: raise ValueError(f"X has {X.shape[-1]} columns but beta has {beta.size} entries.")
    mu = family.inverse_link(X @ beta)
    _check_mean(mu, subject)
    return mu

def variance_diagonal(mu: np.ndarray, family: ModelFamily) -> np.ndarray:
    """ Diagonal of A_i = phi*diag(v(mu_i)). """
    mu = np.asarray(mu, dtype=float)
    if family.variance == 'mean' and np.any(mu <= 0):
        raise DataError("invalid mean for Poisson variance: all means must be strictly positive")
    return family.phi*family.v(mu)

def variance_matrix(mu: np.ndarray, family: ModelFamily) -> np.ndarray:
    return np.diag(variance_diagonal(mu, family))

def mean_jacobian(X: np.ndarray, beta: np.ndarray, family: ModelFamily, subject: int = None) -> np.ndarray:
    """ D_i = dmu_i/dbeta, shape (m_i, p). """
    mu = mean_vector(X, beta, family, subject=subject)
    return family.mu_eta(mu)[:, None]*np.asarray(X, dtype=float)


def estimate_dispersion(data: LongitudinalDataset, beta: np.ndarray, family: ModelFamily) -> float:
    """ Robust plug-in for phi: the squared normalized MAD of the Pearson residuals (computed with phi=1).
        Falls back to 1 (with a warning) if the residuals are too concentrated to give a positive scale.
    """
    unit = family.with_phi(1.)
    X, y = data.X_stacked, data.y_stacked
    mu = mean_vector(X, beta, unit)
    r = (y - mu)/np.sqrt(variance_diagonal(mu, unit))
    phi = float(mad(r))**2 # mad() already divides by the normal consistency constant 0.6745
    if not (np.isfinite(phi) and phi > 0):
        warnings.warn(dedent(f"""
            The MAD of the initial Pearson residuals is {phi}, so the dispersion can not be estimated.
            Using phi=1 instead."""), stacklevel=2)
        return 1.
    return phi
