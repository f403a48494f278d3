__all__ = ['PenaltyConfig', 'Penalties', 'penalty', 'penalty_d1', 'penalty_d2', 'scad', 'l1', 'mcp']

import numpy as np

from dataclasses import dataclass, replace
from typing import Literal


_DEFAULT_SHAPE = {'SCAD': 3.7, 'MCP': 3., 'L1': None}


@dataclass(frozen=True)
class PenaltyConfig:
    """ A folded penalty P(theta; eta) for theta = |coefficient| >= 0.
        @param family ['SCAD'|'L1'|'MCP'] ('SCAD'): the penalty family.
        @param eta [float] (0.): regularization level, 0 switches the penalty off.
        @param a [float] (None): shape parameter, defaults to 3.7 for SCAD and 3 for MCP. Unused for L1.
    """
    family: Literal['SCAD', 'L1', 'MCP'] = 'SCAD'
    eta: float = 0.
    a: float = None

    def __post_init__(self):
        family = str(self.family).upper()
        if family not in (allowed := list(_DEFAULT_SHAPE)):
            raise ValueError(f"family='{self.family}' is invalid: allowed values are {allowed}.")
        object.__setattr__(self, 'family', family)
        a = _DEFAULT_SHAPE[family] if self.a is None else float(self.a)
        object.__setattr__(self, 'a', a)
        if not (np.isfinite(self.eta) and self.eta >= 0): raise ValueError(f"eta must be nonnegative, got {self.eta}.")
        object.__setattr__(self, 'eta', float(self.eta))
        if family == 'SCAD' and not a > 2: raise ValueError(f"SCAD needs a > 2, got a={a}.")
        if family == 'MCP' and not a > 1: raise ValueError(f"MCP needs a > 1, got a={a}.")

    def with_eta(self, eta: float) -> 'PenaltyConfig':
        return replace(self, eta=eta)

    @property
    def slope_at_zero(self) -> float:
        """ P'(0+), the soft-threshold level of the coordinate updates. """
        return self.eta


def scad(eta: float, a: float = 3.7) -> PenaltyConfig: return PenaltyConfig('SCAD', eta, a)
def l1(eta: float) -> PenaltyConfig: return PenaltyConfig('L1', eta)
def mcp(eta: float, a: float = 3.) -> PenaltyConfig: return PenaltyConfig('MCP', eta, a)


def _theta(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0): raise ValueError("The penalty is only defined for theta >= 0 (pass absolute values).")
    return theta

def penalty(theta, cfg: PenaltyConfig):
    theta, eta, a = _theta(theta), cfg.eta, cfg.a
    if cfg.family == 'L1':
        return eta*theta
    if cfg.family == 'MCP':
        return np.where(theta <= a*eta, eta*theta - theta**2/(2*a), a*eta**2/2)
    return np.where(theta <= eta, eta*theta,
                    np.where(theta <= a*eta, (2*a*eta*theta - theta**2 - eta**2)/(2*(a - 1)), eta**2*(a + 1)/2))

def penalty_d1(theta, cfg: PenaltyConfig):
    """ P'(theta), taken as the right limit at theta = 0. """
    theta, eta, a = _theta(theta), cfg.eta, cfg.a
    if cfg.family == 'L1':
        return np.full_like(theta, eta)
    if cfg.family == 'MCP':
        return np.maximum(eta - theta/a, 0.)
    return np.where(theta <= eta, eta, np.maximum(a*eta - theta, 0.)/(a - 1))

def penalty_d2(theta, cfg: PenaltyConfig):
    """ P''(theta), taking the right limit at the kinks. """
    theta, eta, a = _theta(theta), cfg.eta, cfg.a
    if cfg.family == 'L1' or eta == 0:
        return np.zeros_like(theta)
    if cfg.family == 'MCP':
        return np.where(theta < a*eta, -1/a, 0.)
    return np.where((theta >= eta) & (theta < a*eta), -1/(a - 1), 0.)


@dataclass(frozen=True)
class Penalties:
    """ The two penalties of the doubly-penalized objective:
        `lam` (P_1, level v) on the Lagrange multipliers and `beta` (P_2, level omega) on the coefficients.
    """
    lam: PenaltyConfig = PenaltyConfig()
    beta: PenaltyConfig = PenaltyConfig()

    @classmethod
    def scad(cls, v: float, omega: float, a: float = 3.7) -> 'Penalties':
        return cls(scad(v, a), scad(omega, a))

    @property
    def v(self) -> float: return self.lam.eta

    @property
    def omega(self) -> float: return self.beta.eta

    def with_levels(self, v: float = None, omega: float = None) -> 'Penalties':
        return Penalties(self.lam if v is None else self.lam.with_eta(v), self.beta if omega is None else self.beta.with_eta(omega))
