""" Influence functions of lam-hat and beta-hat under point contamination, and the plug-in
    sandwich quantities (information Ĵ, bias correction psi-hat, standard errors) of a converged fit.
    Population expectations are replaced by averages over the fitted dataset.
"""
__all__ = [
    'score_lambda', 'score_beta', 'if_lambda', 'if_beta', 'contamination_point',
    'InfluenceReport', 'influence_sweep', 'SandwichEstimate', 'sandwich', 'DEFAULT_MAGNITUDES'
]

import warnings

import numpy as np
import pandas as pd

from dataclasses import dataclass, field
from scipy.stats import norm
from textwrap import dedent

from .core import DegenerateMatrixError, Subject, mean_vector
from .estimating import EstimatingContext, g_all, g_jacobian_all, g_point, g_point_jacobian, FD_STEP
from .optimizer import ElState, log_star_d1, log_star_d2
from .penalties import Penalties, PenaltyConfig, penalty_d1, penalty_d2


DEFAULT_MAGNITUDES = (1., 10., 1e2, 1e4, 1e6) # Applied with both signs


def _solve_active(S: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e12:
        raise DegenerateMatrixError(f"degenerate {what} curvature")
    return np.linalg.solve(S, rhs)


## SCORES OF THE TWO LAYERS
def score_lambda(g_z: np.ndarray, lam: np.ndarray, eps: float) -> np.ndarray:
    """ U(z, lam) = -log*'(1 + lam^T g(z))*g(z): -g/(1 + lam^T g) on the log branch,
        (t/eps² - 2/eps)*g with t = 1 + lam^T g on the quadratic branch.
    """
    return -log_star_d1(1 + g_z @ lam, eps)*g_z

def score_beta(g_z: np.ndarray, J_z: np.ndarray, lam: np.ndarray, eps: float) -> np.ndarray:
    """ U(z, beta) = -log*'(1 + lam^T g(z))*lam^T dg(z)/dbeta, a p-vector. """
    return -log_star_d1(1 + g_z @ lam, eps)*(lam @ J_z)


def _lambda_curvature(ctx: EstimatingContext, beta: np.ndarray, lam: np.ndarray, pen: PenaltyConfig, eps: float) -> np.ndarray:
    """ Average derivative of U(., lam) over the data plus P_1'', on supp(lam). """
    A = np.flatnonzero(lam)
    G = g_all(ctx, beta)[:, A]
    d2 = log_star_d2(1 + G @ lam[A], eps)
    return -(G.T*d2) @ G/ctx.n + np.diag(penalty_d2(np.abs(lam[A]), pen))

def _mean_score_beta(ctx: EstimatingContext, beta: np.ndarray, lam: np.ndarray, eps: float) -> np.ndarray:
    G, J = g_all(ctx, beta), g_jacobian_all(ctx, beta)
    return np.mean(-log_star_d1(1 + G @ lam, eps)[:, None]*np.einsum('nrp,r->np', J, lam), axis=0)

def _beta_curvature(ctx: EstimatingContext, beta: np.ndarray, lam: np.ndarray, pen: PenaltyConfig, eps: float) -> np.ndarray:
    """ Average derivative of U(., beta) over the data (central differences) plus P_2'', on supp(beta). """
    A = np.flatnonzero(beta)
    B = np.empty((A.size, A.size))
    for col, t in enumerate(A):
        step = FD_STEP*max(1., abs(beta[t]))
        e = np.zeros_like(beta)
        e[t] = step
        B[:, col] = (_mean_score_beta(ctx, beta + e, lam, eps) - _mean_score_beta(ctx, beta - e, lam, eps))[A]/(2*step)
    return B + np.diag(penalty_d2(np.abs(beta[A]), pen))


## INFLUENCE FUNCTIONS
def if_lambda(ctx: EstimatingContext, z: Subject, lam: np.ndarray, beta: np.ndarray, penalty_v: PenaltyConfig,
              eps: float = None, curvature: np.ndarray = None) -> np.ndarray:
    """ Influence of a contaminating subject `z` on lam-hat: -S^-1 [U(z, lam) + grad P_1(lam)] on supp(lam), 0 elsewhere.
        @param curvature [np.ndarray] (None): precomputed S on the active block, to reuse across many `z`.
        @raise DegenerateMatrixError: if S is singular.
    """
    lam, beta = np.asarray(lam, dtype=float), np.asarray(beta, dtype=float)
    eps = 1/ctx.n if eps is None else eps
    out = np.zeros(ctx.r)
    A = np.flatnonzero(lam)
    if A.size == 0: return out
    S = _lambda_curvature(ctx, beta, lam, penalty_v, eps) if curvature is None else curvature
    U = score_lambda(g_point(ctx, z, beta), lam, eps)[A]
    out[A] = -_solve_active(S, U + penalty_d1(np.abs(lam[A]), penalty_v)*np.sign(lam[A]), "multiplier")
    return out

def if_beta(ctx: EstimatingContext, z: Subject, beta: np.ndarray, lam: np.ndarray, penalty_omega: PenaltyConfig,
            eps: float = None, curvature: np.ndarray = None) -> np.ndarray:
    """ Influence of a contaminating subject `z` on beta-hat: -S^-1 [U(z, beta) + grad P_2(beta)] on supp(beta), 0 elsewhere. """
    lam, beta = np.asarray(lam, dtype=float), np.asarray(beta, dtype=float)
    eps = 1/ctx.n if eps is None else eps
    out = np.zeros(ctx.p)
    A = np.flatnonzero(beta)
    if A.size == 0: return out
    S = _beta_curvature(ctx, beta, lam, penalty_omega, eps) if curvature is None else curvature
    U = score_beta(g_point(ctx, z, beta), g_point_jacobian(ctx, z, beta), lam, eps)[A]
    out[A] = -_solve_active(S, U + penalty_d1(np.abs(beta[A]), penalty_omega)*np.sign(beta[A]), "coefficient")
    return out


def contamination_point(ctx: EstimatingContext, beta: np.ndarray, y_shift: float = 0., x_shift: float = 0., coordinate: int = None) -> Subject:
    """ A subject of the most common cluster size whose rows all equal the coordinatewise median
        covariate row, with response at the fitted mean. `y_shift` is added to every response and
        `x_shift` to covariate `coordinate` (default: the first covariate that is not constant).
    """
    X_all = ctx.data.X_stacked
    sizes, counts = np.unique(ctx.data.cluster_sizes, return_counts=True)
    m = int(sizes[np.argmax(counts)])
    X = np.tile(np.median(X_all, axis=0), (m, 1))
    y = mean_vector(X, beta, ctx.family) + y_shift
    if x_shift:
        if coordinate is None:
            varying = np.flatnonzero(np.ptp(X_all, axis=0) > 0)
            coordinate = int(varying[0]) if varying.size else 0
        X[:, coordinate] += x_shift
    return Subject(y, X)


@dataclass
class InfluenceReport:
    points: pd.DataFrame # direction, shift, sup-norms per point
    if_lambda: np.ndarray # (K, r)
    if_beta: np.ndarray # (K, p)
    sup_lambda: dict = field(default_factory=dict) # direction -> sup-norm over the grid
    sup_beta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'points': self.points.to_dict(orient='list'),
            'sup_lambda': self.sup_lambda,
            'sup_beta': self.sup_beta,
            'if_lambda': self.if_lambda,
            'if_beta': self.if_beta
        }


def influence_sweep(ctx: EstimatingContext, state: ElState, penalties: Penalties, magnitudes=DEFAULT_MAGNITUDES, eps: float = None) -> InfluenceReport:
    """ Evaluates IF_lambda and IF_beta at y-shifted and x-shifted contamination points
        (see `contamination_point()`) for every magnitude, with both signs.
    """
    eps = 1/ctx.n if eps is None else eps
    beta, lam = state.beta, state.lam
    S_lam = _lambda_curvature(ctx, beta, lam, penalties.lam, eps) if state.n_ee else None
    S_beta = _beta_curvature(ctx, beta, lam, penalties.beta, eps) if state.n_selected else None
    shifts = sorted([-float(m) for m in magnitudes] + [float(m) for m in magnitudes])

    rows, IF_lam, IF_beta = [], [], []
    for direction in ('y', 'x'):
        for shift in shifts:
            z = contamination_point(ctx, beta, **{f"{direction}_shift": shift})
            il = if_lambda(ctx, z, lam, beta, penalties.lam, eps, curvature=S_lam)
            ib = if_beta(ctx, z, beta, lam, penalties.beta, eps, curvature=S_beta)
            rows.append({'direction': direction, 'shift': shift, 'lam_sup': float(np.max(np.abs(il), initial=0)), 'beta_sup': float(np.max(np.abs(ib), initial=0))})
            IF_lam.append(il)
            IF_beta.append(ib)
    points = pd.DataFrame(rows)
    sup_lambda = {d: float(points.loc[points['direction'] == d, 'lam_sup'].max()) for d in ('y', 'x')}
    sup_beta = {d: float(points.loc[points['direction'] == d, 'beta_sup'].max()) for d in ('y', 'x')}
    return InfluenceReport(points, np.array(IF_lam), np.array(IF_beta), sup_lambda, sup_beta)


## SANDWICH
@dataclass
class SandwichEstimate:
    active_beta: np.ndarray # Indices of the coefficients the estimate refers to
    active_lam: np.ndarray
    J: np.ndarray
    psi: np.ndarray # Bias correction, subtract from beta-hat
    covariance: np.ndarray # J^-1/n
    standard_errors: np.ndarray
    estimates: np.ndarray # beta-hat on the active set
    regularized: bool = False # True if V-hat needed a ridge to be invertible

    @property
    def corrected(self) -> np.ndarray:
        return self.estimates - self.psi

    def intervals(self, level: float = 0.95) -> np.ndarray:
        """ @return [np.ndarray]: (s, 2) bias-corrected confidence intervals. """
        q = norm.ppf(0.5 + level/2)
        return np.column_stack([self.corrected - q*self.standard_errors, self.corrected + q*self.standard_errors])

    def to_dict(self) -> dict:
        return {
            'active_beta': self.active_beta, 'active_lam': self.active_lam,
            'estimates': self.estimates, 'psi': self.psi, 'standard_errors': self.standard_errors,
            'J': self.J, 'regularized': self.regularized
        }


def sandwich(ctx: EstimatingContext, state: ElState, active_lam: np.ndarray = None, eps: float = None) -> SandwichEstimate:
    """ Plug-in information Ĵ = grad^T V^-1 grad and bias correction psi = Ĵ^-1 grad^T V^-1 avg_i[g_i*log*'(1 + lam^T g_i)],
        restricted to A = supp(beta-hat) and to the equations in supp(lam-hat) (or `active_lam`).
        @raise ValueError: if either active set is empty.
        @raise DegenerateMatrixError: if Ĵ is singular.
    """
    eps = 1/ctx.n if eps is None else eps
    A = state.active_beta
    E = state.active_lam if active_lam is None else np.asarray(active_lam, dtype=int)
    if A.size == 0 or E.size == 0: raise ValueError("The sandwich needs nonempty active sets of coefficients and multipliers.")
    n = ctx.n

    G = g_all(ctx, state.beta)
    grad = g_jacobian_all(ctx, state.beta)[:, E][:, :, A].mean(axis=0) # (|E|, |A|)
    GE = G[:, E]
    V = GE.T @ GE/n
    regularized = False
    if np.linalg.cond(V) > 1e12:
        V = V + 1e-8*np.trace(V)/E.size*np.eye(E.size)
        regularized = True
        warnings.warn(dedent(f"""
            The second-moment matrix of the {E.size} active estimating equations is singular,
            a ridge of 1e-8*trace/{E.size} was added."""), stacklevel=2)
    Vinv_grad = np.linalg.solve(V, grad)
    J = grad.T @ Vinv_grad
    J = (J + J.T)/2
    if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e12:
        raise DegenerateMatrixError("degenerate information matrix")
    J_inv = np.linalg.inv(J)
    J_inv = (J_inv + J_inv.T)/2

    avg = np.mean(GE*log_star_d1(1 + G @ state.lam, eps)[:, None], axis=0)
    psi = J_inv @ (Vinv_grad.T @ avg)
    cov = J_inv/n
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    return SandwichEstimate(A, E, J, psi, cov, se, state.beta[A].copy(), regularized)
