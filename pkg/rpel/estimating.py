""" Robust quadratic-inference estimating functions
        g(X_i; beta) = [D_i^T A_i^{-1/2} M_k W_i (psi(r_i) - C_i)]_{k=1..l}
    with their first derivatives in beta and the diagonal second derivatives needed by the outer solver.
    Subjects with equal cluster size are evaluated together as one stacked block.
"""
__all__ = [
    'ModelSpec', 'EstimatingContext', 'build_context',
    'g_subject', 'g_all', 'g_mean', 'g_jacobian', 'g_jacobian_all', 'g_jacobian_column',
    'g_second_diag', 'g_second_column', 'g_and_column', 'g_point', 'g_point_jacobian'
]

import numpy as np

from dataclasses import dataclass, field, replace
from typing import Literal

from .core import BasisSet, LongitudinalDataset, ModelFamily, NumericalError, Subject, estimate_dispersion, variance_diagonal
from .scores import HuberScore, LeverageWeights, ScoreFunction, correction_term, leverage_weights


FD_STEP = 1e-5 # Relative step of the central differences used for the log link


@dataclass(frozen=True)
class ModelSpec:
    """ Everything that defines the estimating function apart from the data. """
    family: ModelFamily = field(default_factory=ModelFamily)
    basis: BasisSet = field(default_factory=BasisSet)
    score: ScoreFunction = field(default_factory=HuberScore)


@dataclass(frozen=True, eq=False)
class _ClusterBlock:
    index: np.ndarray # Subject indices, shape (G,)
    X: np.ndarray # (G, m, p)
    y: np.ndarray # (G, m)
    w: np.ndarray # (G, m)
    M: np.ndarray # (l, m, m)


def _make_blocks(subjects: tuple[Subject, ...], weights: np.ndarray, basis: BasisSet) -> tuple[_ClusterBlock, ...]:
    sizes = np.array([s.m for s in subjects])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    blocks = []
    for m in np.unique(sizes):
        index = np.flatnonzero(sizes == m)
        X = np.stack([subjects[i].X for i in index])
        y = np.stack([subjects[i].y for i in index])
        w = np.stack([weights[offsets[i]:offsets[i+1]] for i in index])
        blocks.append(_ClusterBlock(index, X, y, w, basis.stacked(int(m))))
    return tuple(blocks)


@dataclass(frozen=True, eq=False)
class EstimatingContext:
    """ Data plus model: the fixed ingredients of g(X_i; beta).
        @param leverage [LeverageWeights] (None): None means W_i = I for every subject.
    """
    data: LongitudinalDataset
    family: ModelFamily
    basis: BasisSet
    score: ScoreFunction
    leverage: LeverageWeights = None

    def __post_init__(self):
        if self.weights.shape != (self.data.N,):
            raise ValueError(f"Need {self.data.N} leverage weights (one per observation), got {self.weights.shape}.")
        object.__setattr__(self, '_blocks', _make_blocks(self.data.subjects, self.weights, self.basis))

    @property
    def weights(self) -> np.ndarray:
        return np.ones(self.data.N) if self.leverage is None else self.leverage.weights

    @property
    def n(self) -> int: return self.data.n

    @property
    def p(self) -> int: return self.data.p

    @property
    def l(self) -> int: return self.basis.l

    @property
    def r(self) -> int:
        """ Number of estimating equations. """
        return self.l*self.p

    @property
    def spec(self) -> ModelSpec: return ModelSpec(self.family, self.basis, self.score)

    def with_score(self, score: ScoreFunction) -> 'EstimatingContext':
        return replace(self, score=score)


def build_context(data: LongitudinalDataset, spec: ModelSpec = None, *, leverage: bool = True, phi_w: float = 1.,
                  phi: Literal['fixed', 'mad'] = 'fixed', beta_init: np.ndarray = None, seed: int = 0) -> EstimatingContext:
    """ Assembles an EstimatingContext for `data`.
        @param leverage [bool] (True): whether to downweight leverage points (W_i from robust Mahalanobis distances).
        @param phi_w [float] (1.): exponent of the leverage weights.
        @param phi ['fixed'|'mad'] ('fixed'): 'fixed' keeps `spec.family.phi`, 'mad' re-estimates it
            from the Pearson residuals at `beta_init`, which is then required.
        @param seed [int] (0): seed of the random MCD starts.
    """
    spec = ModelSpec() if spec is None else spec
    family = spec.family
    if phi == 'mad':
        if beta_init is None: raise ValueError("phi='mad' needs an initial estimate beta_init.")
        family = family.with_phi(estimate_dispersion(data, beta_init, family))
    elif phi != 'fixed':
        raise ValueError(f"phi='{phi}' is invalid: allowed values are ['fixed', 'mad'].")
    lw = leverage_weights(data.X_stacked, phi_w=phi_w, seed=seed) if leverage else None
    return EstimatingContext(data, family, spec.basis, spec.score, lw)


## EVALUATION
class _Evaluation:
    """ Everything about one block at one beta that the estimating function and its derivatives share. """
    def __init__(self, ctx: EstimatingContext, block: _ClusterBlock, beta: np.ndarray):
        family, score = ctx.family, ctx.score
        self.block, self.l, self.p = block, block.M.shape[0], block.X.shape[2]
        with np.errstate(over='ignore', invalid='ignore'):
            mu = family.inverse_link(block.X @ beta)
        if not np.all(np.isfinite(mu)):
            g, row = np.argwhere(~np.isfinite(mu))[0]
            raise NumericalError(f"mean overflow in subject {int(block.index[g])}, row {int(row)}")
        self.mu = mu
        self.dmu = family.mu_eta(mu)
        self.d2mu = family.mu_eta2(mu)
        self.dlogv = family.dlogv(mu)
        self.D = self.dmu[..., None]*block.X
        self.a = 1/np.sqrt(variance_diagonal(mu, family)) # A^{-1/2}
        self.r = (block.y - mu)*self.a
        self.h = block.w*(score.psi(self.r) - correction_term(mu, score, family))
        self.q = np.einsum('kab,gb->gka', block.M, self.h) # M_k h
        self.Da = self.D*self.a[..., None] # A^{-1/2} D

    def g(self) -> np.ndarray:
        G = self.h.shape[0]
        return np.einsum('gmp,gkm->gkp', self.Da, self.q).reshape(G, self.l*self.p)

    def _derivative_factors(self, ctx: EstimatingContext):
        alpha = -0.5*self.a*self.dlogv*self.dmu # da/dbeta = alpha*x
        c1 = self.d2mu*self.a + self.dmu*alpha # From differentiating D^T A^{-1/2}
        rho = -self.a*self.dmu - 0.5*self.r*self.dlogv*self.dmu # dr/dbeta = rho*x
        u = self.block.w*ctx.score.psi_prime(self.r)*rho
        return c1, rho, u

    def jacobian(self, ctx: EstimatingContext) -> np.ndarray:
        """ @return [np.ndarray]: shape (G, r, p). """
        X, M = self.block.X, self.block.M
        c1, _, u = self._derivative_factors(ctx)
        term1 = np.einsum('gmt,gm,gkm,gms->gkts', X, c1, self.q, X, optimize=True)
        Mu = np.einsum('kab,gb,gbs->gkas', M, u, X, optimize=True)
        term2 = np.einsum('gat,gkas->gkts', self.Da, Mu, optimize=True)
        return (term1 + term2).reshape(X.shape[0], self.l*self.p, self.p)

    def jacobian_column(self, ctx: EstimatingContext, t: int) -> np.ndarray:
        """ @return [np.ndarray]: dg/dbeta_t for every subject in the block, shape (G, r). """
        X, M = self.block.X, self.block.M
        xt = X[:, :, t]
        c1, _, u = self._derivative_factors(ctx)
        term1 = np.einsum('gmp,gm,gkm->gkp', X, c1*xt, self.q)
        term2 = np.einsum('gap,gka->gkp', self.Da, np.einsum('kab,gb->gka', M, u*xt))
        return (term1 + term2).reshape(X.shape[0], self.l*self.p)

    def second_column_identity(self, ctx: EstimatingContext, t: int) -> np.ndarray:
        """ d²g/dbeta_t² for the identity link, where only psi'' contributes: dr/dbeta_t = -a*x_t is constant. """
        X, M = self.block.X, self.block.M
        drt = -self.a*X[:, :, t]
        v = self.block.w*ctx.score.psi_second(self.r)*drt**2
        return np.einsum('gap,gka->gkp', self.Da, np.einsum('kab,gb->gka', M, v)).reshape(X.shape[0], self.l*self.p)


def _collect(ctx: EstimatingContext, beta: np.ndarray, shape: tuple, fun, blocks=None) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (ctx.p,): raise ValueError(f"beta must have shape ({ctx.p},), got {beta.shape}.")
    blocks = ctx._blocks if blocks is None else blocks
    out = np.empty((sum(b.index.size for b in blocks),) + shape)
    for block in blocks: # Deterministic order, each subject is written exactly once
        out[block.index] = fun(_Evaluation(ctx, block, beta))
    return out

def _subject_blocks(ctx: EstimatingContext, i: int) -> tuple[_ClusterBlock, ...]:
    if not 0 <= i < ctx.n: raise IndexError(f"Subject index {i} out of range for {ctx.n} subjects.")
    o = ctx.data.offsets
    subject = ctx.data.subjects[i]
    block = _ClusterBlock(np.array([0]), subject.X[None], subject.y[None], ctx.weights[None, o[i]:o[i+1]], ctx.basis.stacked(subject.m))
    return (block,)


def g_all(ctx: EstimatingContext, beta: np.ndarray) -> np.ndarray:
    """ @return [np.ndarray]: g(X_i; beta) for all subjects, shape (n, r). """
    return _collect(ctx, beta, (ctx.r,), lambda ev: ev.g())

def g_subject(ctx: EstimatingContext, i: int, beta: np.ndarray) -> np.ndarray:
    return _collect(ctx, beta, (ctx.r,), lambda ev: ev.g(), _subject_blocks(ctx, i))[0]

def g_mean(ctx: EstimatingContext, beta: np.ndarray) -> np.ndarray:
    return g_all(ctx, beta).mean(axis=0)

def g_jacobian_all(ctx: EstimatingContext, beta: np.ndarray) -> np.ndarray:
    """ @return [np.ndarray]: dg(X_i; beta)/dbeta for all subjects, shape (n, r, p). C_i is held fixed. """
    return _collect(ctx, beta, (ctx.r, ctx.p), lambda ev: ev.jacobian(ctx))

def g_jacobian(ctx: EstimatingContext, i: int, beta: np.ndarray) -> np.ndarray:
    return _collect(ctx, beta, (ctx.r, ctx.p), lambda ev: ev.jacobian(ctx), _subject_blocks(ctx, i))[0]

def g_jacobian_column(ctx: EstimatingContext, beta: np.ndarray, t: int, blocks=None) -> np.ndarray:
    """ @return [np.ndarray]: dg(X_i; beta)/dbeta_t for all subjects, shape (n, r). """
    return _collect(ctx, beta, (ctx.r,), lambda ev: ev.jacobian_column(ctx, t), blocks)

def g_second_column(ctx: EstimatingContext, beta: np.ndarray, t: int, blocks=None) -> np.ndarray:
    """ @return [np.ndarray]: d²g(X_i; beta)/dbeta_t² for all subjects, shape (n, r).
        Analytic for the identity link, central differences of the Jacobian column for the log link.
    """
    if ctx.family.link == 'identity':
        return _collect(ctx, beta, (ctx.r,), lambda ev: ev.second_column_identity(ctx, t), blocks)
    beta = np.asarray(beta, dtype=float)
    step = FD_STEP*max(1., abs(beta[t]))
    e = np.zeros_like(beta)
    e[t] = step
    return (g_jacobian_column(ctx, beta + e, t, blocks) - g_jacobian_column(ctx, beta - e, t, blocks))/(2*step)

def g_second_diag(ctx: EstimatingContext, i: int, beta: np.ndarray, t: int) -> np.ndarray:
    return g_second_column(ctx, beta, t, _subject_blocks(ctx, i))[0]


## NEW POINTS
def _point_block(ctx: EstimatingContext, subject: Subject, weights: np.ndarray = None) -> tuple[_ClusterBlock, ...]:
    if subject.X.shape[1] != ctx.p: raise ValueError(f"The point has {subject.X.shape[1]} covariates instead of {ctx.p}.")
    if weights is None:
        weights = np.ones(subject.m) if ctx.leverage is None else ctx.leverage.weight_rows(subject.X)
    return (_ClusterBlock(np.array([0]), subject.X[None], subject.y[None], np.asarray(weights, dtype=float)[None], ctx.basis.stacked(subject.m)),)

def g_point(ctx: EstimatingContext, subject: Subject, beta: np.ndarray, weights: np.ndarray = None) -> np.ndarray:
    """ g(z; beta) at a subject `z` outside the dataset. Its leverage weights are computed
        from the fitted center and scatter of the context, unless given explicitly.
    """
    return _collect(ctx, beta, (ctx.r,), lambda ev: ev.g(), _point_block(ctx, subject, weights))[0]

def g_point_jacobian(ctx: EstimatingContext, subject: Subject, beta: np.ndarray, weights: np.ndarray = None) -> np.ndarray:
    return _collect(ctx, beta, (ctx.r, ctx.p), lambda ev: ev.jacobian(ctx), _point_block(ctx, subject, weights))[0]


def g_and_column(ctx: EstimatingContext, beta: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    """ g_all() and g_jacobian_column() from a single evaluation of the model, both of shape (n, r). """
    beta = np.asarray(beta, dtype=float)
    G, J = np.empty((ctx.n, ctx.r)), np.empty((ctx.n, ctx.r))
    for block in ctx._blocks:
        ev = _Evaluation(ctx, block, beta)
        G[block.index], J[block.index] = ev.g(), ev.jacobian_column(ctx, t)
    return G, J
