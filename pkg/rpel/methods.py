""" Named estimator configurations and the fitting pipeline they share:
    initializer -> context (score, leverage weights, dispersion) -> BIC tuning -> final state.
"""
__all__ = ['MethodConfig', 'PEL', 'NPEL', 'ERPEL', 'HRPEL', 'TRPEL', 'METHODS', 'get_method', 'MethodFit', 'fit_method']

import numpy as np

from dataclasses import dataclass
from typing import Literal

from .core import BasisSet, LongitudinalDataset, ModelFamily
from .estimating import EstimatingContext, ModelSpec, build_context
from .optimizer import ElState, SolverOptions, initial_estimate
from .penalties import Penalties, PenaltyConfig
from .scores import ScoreFunction, make_score
from .tuning import Selection, TuningGrid, default_grid, select


@dataclass(frozen=True)
class MethodConfig:
    """ @param penalize_lambda [bool] (True): False fixes v = 0, i.e. classical (unpenalized) multipliers. """
    name: str
    score: Literal['huber', 'exponential', 'tukey', 'identity'] = 'huber'
    score_constant: float = None
    leverage: bool = True
    penalize_lambda: bool = True
    phi_w: float = 1.

    def make_score(self) -> ScoreFunction:
        return make_score(self.score, self.score_constant)


PEL = MethodConfig('PEL', 'identity', leverage=False, penalize_lambda=False)
NPEL = MethodConfig('NPEL', 'identity', leverage=False)
ERPEL = MethodConfig('ERPEL', 'exponential')
HRPEL = MethodConfig('HRPEL', 'huber')
TRPEL = MethodConfig('TRPEL', 'tukey')
METHODS = {m.name: m for m in (PEL, NPEL, ERPEL, HRPEL, TRPEL)}

def get_method(name: str) -> MethodConfig:
    try:
        return METHODS[name.upper()]
    except KeyError:
        raise ValueError(f"Unknown method '{name}': choose from {list(METHODS)}.") from None


@dataclass
class MethodFit:
    method: MethodConfig
    context: EstimatingContext
    penalties: Penalties # With the selected levels
    selection: Selection
    beta_init: np.ndarray

    @property
    def state(self) -> ElState: return self.selection.state

    @property
    def beta(self) -> np.ndarray: return self.selection.state.beta


def fit_method(data: LongitudinalDataset, method: MethodConfig, family: ModelFamily = None, structure: str = 'CS',
               grid: TuningGrid = None, opts: SolverOptions = None, *, v: float = None, omega: float = None,
               phi: Literal['fixed', 'mad'] = 'fixed', seed: int = 0, beta_family: str = 'SCAD', lambda_family: str = 'SCAD',
               n_jobs: int = 1) -> MethodFit:
    """ Fits `method` to `data`.
        @param v, omega [float] (None): if both are given, no grid search is done.
        @param beta_family, lambda_family [str] ('SCAD'): penalty families of the coefficients and the multipliers.
        @param seed [int] (0): seed of the random MCD starts of the leverage weights.
    """
    family = ModelFamily() if family is None else family
    beta0 = initial_estimate(data, family)
    spec = ModelSpec(family, BasisSet(structure), method.make_score())
    ctx = build_context(data, spec, leverage=method.leverage, phi_w=method.phi_w, phi=phi, beta_init=beta0, seed=seed)

    if v is not None or omega is not None:
        if v is None or omega is None: raise ValueError("Give both v and omega, or neither.")
        grid = TuningGrid((float(v),), (float(omega),))
    elif grid is None:
        grid = default_grid(ctx.p, ctx.r, ctx.n, penalize_lambda=method.penalize_lambda)
    if not method.penalize_lambda: grid = TuningGrid((0.,), grid.omega_values, grid.score_constants)

    base = Penalties(PenaltyConfig(lambda_family), PenaltyConfig(beta_family))
    selection = select(ctx, grid, opts, beta0=beta0, penalties=base, n_jobs=n_jobs)
    return MethodFit(method, ctx, base.with_levels(selection.v, selection.omega), selection, beta0)
