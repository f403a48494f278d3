""" The doubly-penalized empirical likelihood objective
        S(beta) = max_lam { n^-1 sum_i log*(1 + lam^T g_i(beta)) - sum_j P_1(|lam_j|) } + sum_t P_2(|beta_t|)
    and the two-layer coordinate Newton solver for its min-max (beta-hat, lam-hat).
"""
__all__ = [
    'SolverOptions', 'ElState', 'log_star', 'log_star_d1', 'log_star_d2',
    'inner_objective', 'inner_solve', 'outer_step', 'profile_objective', 'solve', 'initial_estimate'
]

import math

import numpy as np

from dataclasses import dataclass, field
from statsmodels.robust.norms import HuberT
from statsmodels.robust.scale import mad

from .core import LongitudinalDataset, ModelFamily, NumericalError
from .estimating import EstimatingContext, g_all, g_and_column, g_second_column
from .penalties import Penalties, PenaltyConfig, penalty, penalty_d1, penalty_d2


@dataclass(slots=True)
class SolverOptions:
    epsilon: float = None # Knot of log*, None means 1/n
    hard_threshold: float = 1e-3 # Coordinates of lam and beta smaller than this (in absolute value) are set to 0 after every sweep
    tol: float = 1e-6 # Convergence: maximal coordinate change over a sweep
    max_inner: int = 200 # Sweeps over lam per inner solve
    max_outer: int = 100 # Outer sweeps over beta
    max_halvings: int = 20 # Step halvings before a coordinate (or outer sweep) gives up
    min_denominator: float = 1e-6 # Newton denominators are clamped to at least this times n in magnitude
    skip_denominator: float = 1e-10 # Coordinates with a smaller raw denominator are skipped in that sweep
    track_multipliers: bool = True # Move lam along with each beta_t through the implicit-function derivative

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0: raise ValueError(f"epsilon must be positive, got {self.epsilon}.")
        if not self.hard_threshold >= 0: raise ValueError(f"hard_threshold must be nonnegative, got {self.hard_threshold}.")
        if not self.tol > 0: raise ValueError(f"tol must be positive, got {self.tol}.")
        self.max_inner, self.max_outer, self.max_halvings = int(self.max_inner), int(self.max_outer), int(self.max_halvings)
        if min(self.max_inner, self.max_outer) < 1: raise ValueError("Iteration caps must be at least 1.")

    def eps(self, n: int) -> float:
        return 1/n if self.epsilon is None else self.epsilon


@dataclass
class ElState:
    """ Result of `solve()`. `objective` is the profile S at (beta, lam) and
        `loglik` is sum_i log*(1 + lam^T g_i(beta)), the quantity that enters the BIC.
    """
    beta: np.ndarray
    lam: np.ndarray
    objective: float = math.nan
    loglik: float = math.nan
    inner_iters: int = 0
    outer_iters: int = 0
    converged: bool = False
    trace: list[dict] = field(default_factory=list)

    @property
    def active_beta(self) -> np.ndarray: return np.flatnonzero(self.beta)

    @property
    def active_lam(self) -> np.ndarray: return np.flatnonzero(self.lam)

    @property
    def n_selected(self) -> int: return int(self.active_beta.size)

    @property
    def n_ee(self) -> int:
        """ Number of estimating equations kept, i.e. |supp(lam)|. """
        return int(self.active_lam.size)


## PSEUDO-LOGARITHM
def log_star(z, eps: float):
    """ log(z) for z >= eps, continued below eps by the quadratic that matches value, slope and curvature. """
    z = np.asarray(z, dtype=float)
    zc = np.maximum(z, eps)
    return np.where(z >= eps, np.log(zc), math.log(eps) - 1.5 + 2*z/eps - z**2/(2*eps**2))

def log_star_d1(z, eps: float):
    z = np.asarray(z, dtype=float)
    return np.where(z >= eps, 1/np.maximum(z, eps), 2/eps - z/eps**2)

def log_star_d2(z, eps: float):
    z = np.asarray(z, dtype=float)
    return np.where(z >= eps, -1/np.maximum(z, eps)**2, -1/eps**2)


## INNER LAYER
def _threshold(x: np.ndarray, level: float) -> np.ndarray:
    x = x.copy()
    x[np.abs(x) < level] = 0.
    return x

def _inner_value(G: np.ndarray, lam: np.ndarray, pen: PenaltyConfig, eps: float) -> float:
    return float(np.mean(log_star(1 + G @ lam, eps)) - np.sum(penalty(np.abs(lam), pen)))

def inner_objective(ctx: EstimatingContext, beta: np.ndarray, lam: np.ndarray, penalty_v: PenaltyConfig, eps: float = None) -> float:
    """ f(lam; beta) = n^-1 sum_i log*(1 + lam^T g_i(beta)) - sum_j P_1(|lam_j|). """
    return _inner_value(g_all(ctx, beta), np.asarray(lam, dtype=float), penalty_v, 1/ctx.n if eps is None else eps)

def _inner_solve_g(G: np.ndarray, lam0: np.ndarray, pen: PenaltyConfig, opts: SolverOptions, eps: float) -> tuple[np.ndarray, int, bool]:
    """ Coordinate Newton ascent of f(lam) for a fixed matrix G of g-values (n, r).
        @return [tuple]: (lam-hat, number of sweeps, converged).
    """
    n, r = G.shape
    lam = np.array(lam0, dtype=float)
    if lam.shape != (r,): raise ValueError(f"lam must have shape ({r},), got {lam.shape}.")
    t = 1 + G @ lam
    slope = n*pen.slope_at_zero
    converged, sweep = False, 0
    for sweep in range(1, opts.max_inner + 1):
        lam_start = lam.copy()
        for j in range(r):
            gj, lj = G[:, j], lam[j]
            grad = log_star_d1(t, eps) @ gj
            curv = log_star_d2(t, eps) @ (gj*gj)
            if lj == 0:
                if abs(grad) <= slope: continue # Soft-threshold test: stays at 0
                num = grad - math.copysign(slope, grad)
                den = curv - n*float(penalty_d2(0., pen))
            else:
                num = grad - n*float(penalty_d1(abs(lj), pen))*math.copysign(1., lj)
                den = curv - n*float(penalty_d2(abs(lj), pen))
            if abs(den) < opts.skip_denominator: continue
            den = -max(abs(den), opts.min_denominator*n) # Ascent step
            new = lj - num/den
            if lj != 0 and new*lj < 0: new = 0. # Do not jump over the kink at 0

            F_old = np.sum(log_star(t, eps)) - n*float(penalty(abs(lj), pen))
            for _ in range(opts.max_halvings + 1):
                t_new = t + (new - lj)*gj
                F_new = np.sum(log_star(t_new, eps)) - n*float(penalty(abs(new), pen))
                if np.isfinite(F_new) and F_new >= F_old - 1e-12*max(1., abs(F_old)): break
                new = lj + (new - lj)/2
            else: continue # Still no ascent: skip this coordinate
            lam[j], t = new, t_new

        small = (lam != 0) & (np.abs(lam) < opts.hard_threshold)
        if np.any(small):
            lam[small] = 0.
            t = 1 + G @ lam
        if np.max(np.abs(lam - lam_start), initial=0) < opts.tol:
            converged = True
            break

    lam0 = np.asarray(lam0, dtype=float)
    if _inner_value(G, lam, pen, eps) < _inner_value(G, lam0, pen, eps) - opts.tol: # Thresholding cost more than the sweeps gained
        lam = lam0.copy()
    return lam, sweep, converged

def inner_solve(ctx: EstimatingContext, beta: np.ndarray, lam0: np.ndarray, penalty_v: PenaltyConfig, opts: SolverOptions = None) -> np.ndarray:
    """ Maximizes f(lam; beta) over lam by cyclic coordinate Newton steps, starting from `lam0`.
        The returned lam-hat is hard-thresholded and satisfies f(lam-hat) >= f(lam0) - tol.
    """
    opts = SolverOptions() if opts is None else opts
    return _inner_solve_g(g_all(ctx, beta), lam0, penalty_v, opts, opts.eps(ctx.n))[0]


## OUTER LAYER
def _mean_is_safe(ctx: EstimatingContext, X: np.ndarray, beta: np.ndarray) -> bool:
    if ctx.family.link == 'identity': return bool(np.all(np.isfinite(beta)))
    with np.errstate(over='ignore'):
        mu = ctx.family.inverse_link(X @ beta)
    return bool(np.all(np.isfinite(mu)) and np.all(mu > 0))

def outer_step(ctx: EstimatingContext, beta: np.ndarray, lam: np.ndarray, penalties: Penalties, opts: SolverOptions = None) -> tuple[np.ndarray, np.ndarray]:
    """ One cyclic sweep of coordinate Newton steps over beta for the current multipliers `lam`.
        The numerator of each step is the gradient of the profile objective in beta_t; the denominator
        is its second derivative, i.e. the fixed-lam curvature corrected by -c^T H^-1 c on the active
        multipliers (H the lam-Hessian, c the mixed derivative). With `opts.track_multipliers`, the
        active multipliers follow each beta_t step to first order, which keeps the sweep a Gauss-Seidel
        sweep on the profile instead of a Jacobi sweep.
        @return [tuple]: (beta after the sweep and hard-thresholding, lam moved along).
    """
    opts = SolverOptions() if opts is None else opts
    n, p = ctx.n, ctx.p
    eps = opts.eps(n)
    beta, lam = np.array(beta, dtype=float), np.array(lam, dtype=float)
    pen_v, pen_w = penalties.lam, penalties.beta
    slope = n*pen_w.slope_at_zero
    A = np.flatnonzero(lam)
    X = ctx.data.X_stacked if ctx.family.link == 'log' else None

    for t in range(p):
        G, J = g_and_column(ctx, beta, t)
        s = 1 + G @ lam
        d1, d2 = log_star_d1(s, eps), log_star_d2(s, eps)
        varpi = J @ lam
        z = g_second_column(ctx, beta, t) @ lam
        grad = d1 @ varpi
        curv = d2 @ varpi**2 + d1 @ z

        dlam = None
        if A.size and opts.track_multipliers:
            GA = G[:, A]
            H = (GA.T*d2) @ GA - n*np.diag(penalty_d2(np.abs(lam[A]), pen_v))
            c = GA.T @ (d2*varpi) + J[:, A].T @ d1
            if np.all(np.isfinite(H)) and np.linalg.cond(H) < 1e12:
                sol = np.linalg.solve(H, c)
                curv -= c @ sol
                dlam = -sol

        bt = beta[t]
        if bt == 0:
            if abs(grad) <= slope: continue
            num = grad - math.copysign(slope, grad)
            den = curv + n*float(penalty_d2(0., pen_w))
        else:
            num = grad + n*float(penalty_d1(abs(bt), pen_w))*math.copysign(1., bt)
            den = curv + n*float(penalty_d2(abs(bt), pen_w))
        if not (np.isfinite(num) and np.isfinite(den)): continue
        den = max(abs(den), opts.min_denominator*n) # Descent step
        new = bt - num/den
        if bt != 0 and new*bt < 0: new = 0.

        trial = beta.copy()
        for _ in range(opts.max_halvings + 1):
            trial[t] = new
            if np.isfinite(new) and (X is None or _mean_is_safe(ctx, X, trial)): break
            new = bt + (new - bt)/2
        else: continue
        beta[t] = new
        if dlam is not None: lam[A] += dlam*(new - bt)

    return _threshold(beta, opts.hard_threshold), lam

def profile_objective(ctx: EstimatingContext, beta: np.ndarray, lam: np.ndarray, penalties: Penalties, eps: float = None) -> tuple[float, float]:
    """ @return [tuple]: (S at (beta, lam), sum_i log*(1 + lam^T g_i(beta))). """
    eps = 1/ctx.n if eps is None else eps
    loglik = float(np.sum(log_star(1 + g_all(ctx, beta) @ lam, eps)))
    value = loglik/ctx.n - float(np.sum(penalty(np.abs(lam), penalties.lam))) + float(np.sum(penalty(np.abs(beta), penalties.beta)))
    return value, loglik


## FULL SOLVER
def solve(ctx: EstimatingContext, beta0: np.ndarray, penalties: Penalties, opts: SolverOptions = None, lam0: np.ndarray = None) -> ElState:
    """ Alternates a full inner solve over lam with an outer sweep over beta until no coordinate of beta
        moves more than `opts.tol` in a sweep. An outer sweep that increases the profile objective is
        halved (up to `opts.max_halvings` times); if that still gives no descent, or if the iteration cap
        is hit, the best iterate is returned with `converged=False`.
        @param lam0 [np.ndarray] (None): starting multipliers, zero by default.
    """
    opts = SolverOptions() if opts is None else opts
    n, eps = ctx.n, opts.eps(ctx.n)
    beta = _threshold(np.asarray(beta0, dtype=float), opts.hard_threshold)
    if beta.shape != (ctx.p,): raise ValueError(f"beta0 must have shape ({ctx.p},), got {beta.shape}.")
    lam = np.zeros(ctx.r) if lam0 is None else np.asarray(lam0, dtype=float)

    def inner(b, l0):
        lam_hat, sweeps, _ = _inner_solve_g(g_all(ctx, b), l0, penalties.lam, opts, eps)
        value, loglik = profile_objective(ctx, b, lam_hat, penalties, eps)
        return lam_hat, sweeps, value, loglik

    lam, inner_iters, obj, loglik = inner(beta, lam)
    best = (obj, beta, lam, loglik)
    trace, converged, outer = [], False, 0
    for outer in range(1, opts.max_outer + 1):
        beta_new, lam_guess = outer_step(ctx, beta, lam, penalties, opts)
        try:
            lam_new, sweeps, obj_new, loglik_new = inner(beta_new, lam_guess)
        except NumericalError:
            lam_new, sweeps, obj_new, loglik_new = lam, 0, math.inf, math.inf
        inner_iters += sweeps
        halvings = 0
        while not obj_new <= obj + opts.tol and halvings < opts.max_halvings:
            beta_new = _threshold(beta + (beta_new - beta)/2, opts.hard_threshold)
            try:
                lam_new, sweeps, obj_new, loglik_new = inner(beta_new, lam)
            except NumericalError:
                obj_new = math.inf
            inner_iters += sweeps
            halvings += 1
        if not obj_new <= obj + opts.tol: break # Halvings exhausted without descent: keep the best iterate

        step = float(np.max(np.abs(beta_new - beta), initial=0))
        beta, lam, obj, loglik = beta_new, lam_new, obj_new, loglik_new
        if obj < best[0]: best = (obj, beta, lam, loglik)
        trace.append({'outer': outer, 'objective': obj, 'max_step': step, 'halvings': halvings, 'n_selected': int(np.count_nonzero(beta)), 'n_ee': int(np.count_nonzero(lam))})
        if step < opts.tol:
            converged = True
            break

    if not converged: obj, beta, lam, loglik = best
    return ElState(beta, lam, obj, loglik, inner_iters, outer, converged, trace)


## INITIALIZATION
def initial_estimate(data: LongitudinalDataset, family: ModelFamily, c: float = 1.345, ridge: float = 1e-2, max_iter: int = 50, tol: float = 1e-8) -> np.ndarray:
    """ Ridge-regularized iteratively reweighted Huber regression on the pooled observations,
        ignoring the within-subject correlation. For the log link the IRLS runs on the working response.
        @param c [float] (1.345): Huber constant applied to the MAD-standardized Pearson residuals.
        @param ridge [float] (1e-2): ridge level relative to the mean diagonal of X^T W X.
    """
    X, y = data.X_stacked, data.y_stacked
    N, p = X.shape
    norm = HuberT(t=c)
    if family.link == 'identity':
        eta = np.zeros(N)
        beta = np.zeros(p)
    else:
        eta = np.log(y + 0.5) # Start from the data, not from mu = 1
        beta = None

    for _ in range(max_iter):
        if beta is not None: eta = np.clip(X @ beta, -30, 30) if family.link == 'log' else X @ beta
        mu = family.inverse_link(eta)
        dmu, v = family.mu_eta(mu), family.v(mu)
        pearson = (y - mu)/np.sqrt(v)
        scale = float(mad(pearson)) if beta is not None else 1.
        robust = norm.weights(pearson/scale) if scale > 0 else np.ones(N)
        w = robust*dmu**2/v
        z = eta + (y - mu)/dmu
        XtW = X.T*w
        A = XtW @ X
        A[np.diag_indices(p)] += ridge*np.trace(A)/p
        new = np.linalg.solve(A, XtW @ z)
        done = beta is not None and np.max(np.abs(new - beta)) < tol*(1 + np.max(np.abs(beta)))
        beta = new
        if done: break
    return beta
