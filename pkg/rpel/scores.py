""" Bounded score functions, their Fisher-consistency corrections and covariate leverage weights.
    All score functions act on Pearson residuals r = (y - mu)/sqrt(phi*v(mu)).
"""
__all__ = [
    'ScoreFunction', 'HuberScore', 'ExponentialScore', 'TukeyScore', 'IdentityScore', 'make_score',
    'psi', 'psi_prime', 'correction_term', 'poisson_truncation',
    'LeverageWeights', 'leverage_weights', 'weights_from_distances', 'robust_location_scatter'
]

import math
import warnings

import numpy as np

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from scipy.stats import chi2, poisson
from statsmodels.robust.scale import mad
from textwrap import dedent
from typing import Literal

from .core import DataError, DegenerateMatrixError, ModelFamily, NumericalError


POISSON_TAIL = 1e-12 # Omitted Poisson mass in correction_term
Y_MAX_CAP = 20_000 # Above this, the truncated sum is considered non-convergent


## SCORE FUNCTIONS
@dataclass(frozen=True)
class ScoreFunction(ABC):
    constant: float = None

    def __post_init__(self):
        if self.constant is None: object.__setattr__(self, 'constant', self.default_constant)
        if not (np.isfinite(self.constant) and self.constant > 0):
            raise ValueError(f"The tuning constant of {type(self).__name__} must be positive, got {self.constant}.")
        object.__setattr__(self, 'constant', float(self.constant))

    @property
    @abstractmethod
    def name(self) -> str: pass

    @property
    @abstractmethod
    def default_constant(self) -> float: pass

    @property
    @abstractmethod
    def bound(self) -> float:
        """ sup_t |psi(t)|. """

    @abstractmethod
    def psi(self, t: np.ndarray) -> np.ndarray: pass

    @abstractmethod
    def psi_prime(self, t: np.ndarray) -> np.ndarray: pass

    @abstractmethod
    def psi_second(self, t: np.ndarray) -> np.ndarray:
        """ Second derivative, 0 almost everywhere for piecewise-linear scores. """

    @property
    def kinks(self) -> tuple[float, ...]:
        """ Points where psi is not differentiable. """
        return ()

    def with_constant(self, constant: float) -> 'ScoreFunction':
        return replace(self, constant=constant)


@dataclass(frozen=True)
class HuberScore(ScoreFunction):
    name = 'huber'
    default_constant = 1.345

    @property
    def bound(self): return self.constant

    @property
    def kinks(self): return (-self.constant, self.constant)

    def psi(self, t):
        return np.clip(t, -self.constant, self.constant)

    def psi_prime(self, t):
        return (np.abs(t) < self.constant).astype(float) # 0 exactly at |t| = c

    def psi_second(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class ExponentialScore(ScoreFunction):
    """ psi(t) = 2t/gamma*exp(-t²/gamma), the derivative of 1 - exp(-t²/gamma). """
    name = 'exponential'
    default_constant = 2.

    @property
    def bound(self): # Maximum at t² = gamma/2
        return math.sqrt(2/self.constant)*math.exp(-0.5)

    def psi(self, t):
        g = self.constant
        return 2*t/g*np.exp(-t**2/g)

    def psi_prime(self, t):
        g = self.constant
        return 2/g*np.exp(-t**2/g)*(1 - 2*t**2/g)

    def psi_second(self, t):
        g = self.constant
        return 4*t/g**2*np.exp(-t**2/g)*(2*t**2/g - 3)


@dataclass(frozen=True)
class TukeyScore(ScoreFunction):
    """ Tukey's biweight, psi(t) = t(1 - (t/b)²)² on |t| <= b and 0 elsewhere. """
    name = 'tukey'
    default_constant = 4.685

    @property
    def bound(self): # Maximum at t = b/sqrt(5)
        return 16*self.constant/(25*math.sqrt(5))

    @property
    def kinks(self): return (-self.constant, self.constant)

    def psi(self, t):
        t = np.asarray(t, dtype=float)
        u = (t/self.constant)**2
        return np.where(u <= 1, t*(1 - u)**2, 0.)

    def psi_prime(self, t):
        t = np.asarray(t, dtype=float)
        u = (t/self.constant)**2
        return np.where(u < 1, (1 - u)*(1 - 5*u), 0.)

    def psi_second(self, t):
        t = np.asarray(t, dtype=float)
        u = (t/self.constant)**2
        return np.where(u < 1, 2*t/self.constant**2*(10*u - 6), 0.)


@dataclass(frozen=True)
class IdentityScore(ScoreFunction):
    """ psi(t) = t, i.e. the classical (non-robust) estimating function. The constant is ignored. """
    name = 'identity'
    default_constant = 1.

    @property
    def bound(self): return math.inf

    def psi(self, t): return np.asarray(t, dtype=float).copy()

    def psi_prime(self, t): return np.ones_like(np.asarray(t, dtype=float))

    def psi_second(self, t): return np.zeros_like(np.asarray(t, dtype=float))


_SCORES = {cls.name: cls for cls in (HuberScore, ExponentialScore, TukeyScore, IdentityScore)}

def make_score(kind: Literal['huber', 'exponential', 'tukey', 'identity'], constant: float = None) -> ScoreFunction:
    """ @param constant [float] (None): tuning constant, None uses the default of `kind`
            (Huber c=1.345, Exponential gamma=2, Tukey b=4.685).
    """
    kind = str(kind).lower()
    if kind not in _SCORES: raise ValueError(f"Unknown score '{kind}': choose from {list(_SCORES)}.")
    return _SCORES[kind](constant)

def psi(t, score: ScoreFunction):
    return score.psi(t)

def psi_prime(t, score: ScoreFunction):
    return score.psi_prime(t)


## FISHER CONSISTENCY
def poisson_truncation(mu_max: float) -> int:
    """ Smallest y_max such that P(Y > y_max) < POISSON_TAIL for Y ~ Poisson(mu_max). """
    y_max = int(poisson.isf(POISSON_TAIL/10, mu_max)) + 1
    while poisson.sf(y_max, mu_max) >= POISSON_TAIL:
        y_max += 1
        if y_max > Y_MAX_CAP: break
    if y_max > Y_MAX_CAP:
        raise NumericalError(f"Poisson truncation did not converge below y={Y_MAX_CAP} (mean {mu_max:.4g} is too large).")
    return y_max

def correction_term(mu, score: ScoreFunction, family: ModelFamily, y_max: int = None) -> np.ndarray:
    """ C = E[psi(r)] under the model, elementwise for each mean in `mu`.
        All scores here are odd, so for the continuous family (symmetric residual law) this is exactly 0.
        For counts it is a truncated sum over y = 0..y_max.
        @param y_max [int] (None): truncation point, None picks it such that the omitted mass is below 1e-12.
    """
    mu = np.asarray(mu, dtype=float)
    if not family.is_count or isinstance(score, IdentityScore):
        return np.zeros_like(mu)
    if np.any(mu <= 0): raise DataError("invalid mean for Poisson variance: all means must be strictly positive")
    flat = mu.reshape(-1)
    if y_max is None: y_max = poisson_truncation(float(flat.max(initial=0)))
    y = np.arange(y_max + 1, dtype=float)
    pmf = poisson.pmf(y[None, :], flat[:, None])
    r = (y[None, :] - flat[:, None])/np.sqrt(family.phi*flat[:, None])
    return np.sum(pmf*score.psi(r), axis=1).reshape(mu.shape)


## LEVERAGE WEIGHTS
@dataclass(frozen=True, eq=False)
class LeverageWeights:
    """ Mallows-type weights w = min(1, (b0/d²)^(exponent/2)), with d² the squared robust
        Mahalanobis distance of a covariate row. Columns without any spread (e.g. an intercept)
        carry no leverage and are left out of d², listed by `active_columns`.
    """
    weights: np.ndarray # One per stacked observation
    center: np.ndarray
    scatter: np.ndarray
    exponent: float
    threshold: float # b0
    active_columns: np.ndarray
    diagonal: bool = False # True if the diagonal MAD² scatter was used instead of MCD

    def distances(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        a = self.active_columns
        if a.size == 0: return np.zeros(rows.shape[0])
        diff = rows[:, a] - self.center[a]
        return np.einsum('ij,ij->i', diff, np.linalg.solve(self.scatter[np.ix_(a, a)], diff.T).T)

    def weight_rows(self, rows: np.ndarray) -> np.ndarray:
        """ Weights of arbitrary (e.g. contaminated) covariate rows, using the fitted center and scatter. """
        return weights_from_distances(self.distances(rows), self.threshold, self.exponent)


def weights_from_distances(d2: np.ndarray, b0: float, exponent: float = 1.) -> np.ndarray:
    d2 = np.asarray(d2, dtype=float)
    with np.errstate(divide='ignore'):
        return np.where(d2 <= b0, 1., (b0/np.maximum(d2, b0))**(exponent/2))

def _mahalanobis2(X: np.ndarray, T: np.ndarray, S: np.ndarray) -> np.ndarray:
    diff = X - T
    return np.einsum('ij,ij->i', diff, np.linalg.solve(S, diff.T).T)

def _subset_estimate(X: np.ndarray, idx: np.ndarray):
    T = X[idx].mean(axis=0)
    S = np.atleast_2d(np.cov(X[idx], rowvar=False))
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0 or not np.isfinite(logdet) or np.linalg.cond(S) > 1e12:
        raise DegenerateMatrixError("degenerate covariate scatter")
    return T, S, logdet

def _c_steps(X: np.ndarray, idx: np.ndarray, h: int, max_iter: int = 100):
    """ Concentration steps: refit on the h rows closest to the current fit until the subset is stable. """
    idx = np.sort(idx)
    for _ in range(max_iter):
        T, S, logdet = _subset_estimate(X, idx)
        new = np.sort(np.argsort(_mahalanobis2(X, T, S), kind='stable')[:h])
        if np.array_equal(new, idx): break
        idx = new
    return T, S, logdet

def robust_location_scatter(X: np.ndarray, seed: int = 0, n_random_starts: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """ Reduced minimum covariance determinant estimate of (center, scatter).
        Starting subsets are the half of the rows nearest to the coordinatewise median,
        plus `n_random_starts` seeded random halves. Each is refined with C-steps, the
        smallest determinant wins, and the scatter is rescaled to be consistent at the normal.
        Rows are first put in a canonical (lexicographic) order, so the result does not depend on row order.
        @raise DegenerateMatrixError: if no starting subset gives a nonsingular scatter.
    """
    X = np.asarray(X, dtype=float)
    N, p = X.shape
    X = X[np.lexsort(X.T[::-1])]
    h = (N + p + 1)//2

    med = np.median(X, axis=0)
    spread = mad(X, axis=0)
    spread = np.where(spread > 0, spread, 1.)
    starts = [np.argsort(np.sum(((X - med)/spread)**2, axis=1), kind='stable')[:h]]
    rng = np.random.default_rng(seed)
    starts += [rng.choice(N, size=h, replace=False) for _ in range(n_random_starts)]

    best = None
    for idx in starts:
        try:
            T, S, logdet = _c_steps(X, idx, h)
        except (DegenerateMatrixError, np.linalg.LinAlgError):
            continue
        if best is None or logdet < best[2]: best = (T, S, logdet)
    if best is None: raise DegenerateMatrixError("degenerate covariate scatter")

    T, S, _ = best
    factor = np.median(_mahalanobis2(X, T, S))/chi2.ppf(0.5, p)
    if not (np.isfinite(factor) and factor > 0): raise DegenerateMatrixError("degenerate covariate scatter")
    return T, S*factor

def leverage_weights(X: np.ndarray, phi_w: float = 1., quantile: float = 0.95, seed: int = 0, fallback: bool = True) -> LeverageWeights:
    """ Computes the leverage weight of every row of the stacked covariate matrix `X` (N, p).
        @param phi_w [float] (1.): exponent of the weights, at least 1.
        @param quantile [float] (0.95): b0 is this chi² quantile with p degrees of freedom.
        @param seed [int] (0): seed for the random starting subsets of the MCD.
        @param fallback [bool] (True): if the MCD scatter is degenerate, use the diagonal MAD² scatter
            instead of raising DegenerateMatrixError. The diagonal scatter is always used when N < 2p.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2: raise ValueError(f"X must be 2-dimensional, got shape {X.shape}.")
    if not 0 < quantile < 1: raise ValueError(f"quantile must lie in (0, 1), got {quantile}.")
    if phi_w < 1: raise ValueError(f"The weight exponent must be at least 1, got {phi_w}.")
    N, p = X.shape
    b0 = float(chi2.ppf(quantile, p)) # p degrees of freedom, also when some columns are inactive
    active = np.flatnonzero(np.ptp(X, axis=0) > 0)
    center, scatter = np.median(X, axis=0), np.zeros((p, p))
    diagonal = N < 2*active.size

    if active.size:
        Xa = X[:, active]
        if not diagonal:
            try:
                center_a, scatter_a = robust_location_scatter(Xa, seed=seed)
            except DegenerateMatrixError:
                if not fallback: raise
                warnings.warn(dedent("""
                    The MCD scatter of the covariates is degenerate, falling back to a diagonal
                    MAD² scatter around the coordinatewise median."""), stacklevel=2)
                diagonal = True
        if diagonal:
            center_a = np.median(Xa, axis=0)
            s = mad(Xa, axis=0)
            s = np.where(s > 0, s, Xa.std(axis=0))
            scatter_a = np.diag(s**2)
        center[active] = center_a
        scatter[np.ix_(active, active)] = scatter_a

    lw = LeverageWeights(np.ones(N), center, scatter, float(phi_w), b0, active, diagonal)
    object.__setattr__(lw, 'weights', lw.weight_rows(X))
    return lw
