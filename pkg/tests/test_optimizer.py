""" Tests of the pseudo-logarithm and of the two-layer solver, including closed-form oracles. """

import math

import numpy as np
import pytest

from numpy.testing import assert_allclose
from scipy.optimize import minimize, minimize_scalar

from context import rpel
from rpel import BasisSet, LongitudinalDataset, ModelFamily
from rpel.estimating import ModelSpec, build_context, g_all, g_jacobian_all
from rpel.optimizer import (ElState, SolverOptions, initial_estimate, inner_objective, inner_solve, log_star, log_star_d1,
                            log_star_d2, outer_step, profile_objective, solve)
from rpel.penalties import Penalties, PenaltyConfig, penalty_d1, scad
from rpel.scores import HuberScore, IdentityScore


def scalar_context(values):
    """ n subjects with one measurement each and x = 1, so that g_i(0) = y_i. """
    data = LongitudinalDataset.from_arrays([[v] for v in values], [[[1.]] for _ in values])
    return build_context(data, ModelSpec(ModelFamily(), BasisSet('IND'), IdentityScore()), leverage=False)


def linear_data(n=150, m=3, beta=(4., 0., 0., 3.5, 0.), sd=1., seed=0):
    rng = np.random.default_rng(seed)
    beta = np.array(beta)
    X = [rng.normal(size=(m, beta.size)) for _ in range(n)]
    shared = rng.normal(size=n)
    y = [x @ beta + sd*(0.6*shared[i] + 0.8*rng.normal(size=m)) for i, x in enumerate(X)]
    return LongitudinalDataset.from_arrays(y, X), beta


class TestLogStar:
    def test_branches(self):
        eps = 0.1
        assert log_star(2., eps) == pytest.approx(math.log(2.))
        assert log_star(eps, eps) == pytest.approx(math.log(eps))
        assert np.isfinite(log_star(-5., eps))

    @pytest.mark.parametrize('eps', [1e-3, 0.02, 0.5])
    def test_smooth_at_knot(self, eps):
        below, above = eps*(1 - 1e-12), eps*(1 + 1e-12)
        assert log_star(below, eps) == pytest.approx(log_star(above, eps), abs=1e-9)
        assert log_star_d1(below, eps) == pytest.approx(log_star_d1(above, eps), rel=1e-9)
        assert log_star_d2(below, eps) == pytest.approx(log_star_d2(above, eps), rel=1e-9)

    def test_derivatives(self):
        eps, h = 0.2, 1e-6
        z = np.array([-3., -0.5, 0.1, 0.19, 0.25, 1., 4.])
        assert_allclose(log_star_d1(z, eps), (log_star(z + h, eps) - log_star(z - h, eps))/(2*h), rtol=1e-6)
        assert_allclose(log_star_d2(z, eps), (log_star_d1(z + h, eps) - log_star_d1(z - h, eps))/(2*h), rtol=1e-5)


class TestInner:
    def test_closed_form(self):
        ctx = scalar_context([0.5, 0.5, -0.5])
        lam = inner_solve(ctx, np.zeros(1), np.zeros(1), PenaltyConfig('SCAD', 0.), SolverOptions(hard_threshold=1e-8))
        assert lam[0] == pytest.approx(2/3, abs=1e-6)

    def test_never_worse_than_start(self):
        ctx = scalar_context([0.3, -0.1, 0.8, 0.2])
        pen = scad(0.05)
        lam0 = np.array([0.4])
        lam = inner_solve(ctx, np.zeros(1), lam0, pen)
        assert inner_objective(ctx, np.zeros(1), lam, pen) >= inner_objective(ctx, np.zeros(1), lam0, pen) - 1e-6

    def test_large_penalty_keeps_zero(self):
        ctx = scalar_context([0.5, 0.5, -0.5])
        lam = inner_solve(ctx, np.zeros(1), np.zeros(1), scad(10.))
        assert lam[0] == 0.

    def test_moderate_penalty_shrinks(self):
        ctx = scalar_context([0.5, 0.5, -0.5])
        free = inner_solve(ctx, np.zeros(1), np.zeros(1), scad(0.), SolverOptions(hard_threshold=1e-8))[0]
        shrunk = inner_solve(ctx, np.zeros(1), np.zeros(1), PenaltyConfig('L1', 0.05), SolverOptions(hard_threshold=1e-8))[0]
        assert 0 < shrunk < free


class TestOuter:
    def test_huge_penalty_zeroes(self):
        data, _ = linear_data(n=30)
        ctx = build_context(data, leverage=False)
        beta, lam = outer_step(ctx, np.ones(data.p), np.zeros(ctx.r), Penalties.scad(0., 1e3))
        assert np.all(beta == 0.)
        assert np.all(lam == 0.)

    def test_profile_objective_at_zero_multipliers(self):
        data, beta = linear_data(n=30)
        ctx = build_context(data, leverage=False)
        pen = Penalties.scad(0.1, 0.2)
        value, loglik = profile_objective(ctx, beta, np.zeros(ctx.r), pen)
        assert loglik == 0.
        assert value == pytest.approx(float(np.sum(rpel.penalties.penalty(np.abs(beta), pen.beta))))


class TestSolve:
    def test_oracle_one_coefficient(self):
        """ Just-identified, unpenalized: beta-hat solves mean g = 0, which is least squares here. """
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 2))
        y = 1.3*x + rng.normal(size=(40, 2))
        data = LongitudinalDataset.from_arrays(list(y), [xi[:, None] for xi in x])
        ctx = build_context(data, ModelSpec(ModelFamily(), BasisSet('IND'), IdentityScore()), leverage=False)
        state = solve(ctx, np.zeros(1), Penalties(), SolverOptions(hard_threshold=1e-8))
        assert state.converged
        assert state.beta[0] == pytest.approx(np.sum(x*y)/np.sum(x*x), abs=1e-4)
        assert np.all(np.abs(state.lam) < 1e-4)

    def test_oracle_two_coefficients(self):
        rng = np.random.default_rng(2)
        n, m = 60, 3
        X = [rng.normal(size=(m, 2)) for _ in range(n)]
        y = [x @ np.array([1., -0.7]) + rng.normal(size=m) for x in X]
        data = LongitudinalDataset.from_arrays(y, X)
        ctx = build_context(data, ModelSpec(ModelFamily(), BasisSet('IND'), IdentityScore()), leverage=False)
        state = solve(ctx, np.zeros(2), Penalties(), SolverOptions(hard_threshold=1e-8))
        Xs, ys = data.X_stacked, data.y_stacked
        ols = np.linalg.solve(Xs.T @ Xs, Xs.T @ ys)
        assert_allclose(state.beta, ols, atol=1e-4)
        assert_allclose(np.mean(g_all(ctx, state.beta), axis=0), 0., atol=1e-4)

    def test_sparse_recovery(self):
        data, beta = linear_data()
        ctx = build_context(data, ModelSpec(ModelFamily(), BasisSet('CS'), HuberScore()))
        state = solve(ctx, initial_estimate(data, ModelFamily()), Penalties.scad(0.01, 0.8))
        assert isinstance(state, ElState)
        assert list(state.active_beta) == [0, 3]
        assert_allclose(state.beta[[0, 3]], beta[[0, 3]], atol=0.3)
        assert state.n_ee <= ctx.r
        assert state.outer_iters >= 1 and len(state.trace) == state.outer_iters

    def test_deterministic(self):
        data, _ = linear_data(n=40, seed=3)
        ctx = build_context(data)
        a = solve(ctx, np.zeros(data.p), Penalties.scad(0.05, 0.1))
        b = solve(ctx, np.zeros(data.p), Penalties.scad(0.05, 0.1))
        assert np.array_equal(a.beta, b.beta) and np.array_equal(a.lam, b.lam)

    def test_over_identified_oracle(self):
        """ One coefficient, two equations (CS), no penalties: compare with a direct min-max over (beta, lam). """
        rng = np.random.default_rng(7)
        n, m = 80, 3
        x = rng.normal(size=(n, m))
        y = 1.3*x + 0.7*rng.normal(size=(n, 1)) + 0.7*rng.normal(size=(n, m))
        data = LongitudinalDataset.from_arrays(list(y), [xi[:, None] for xi in x])
        ctx = build_context(data, ModelSpec(ModelFamily(), BasisSet('CS'), IdentityScore()), leverage=False)
        assert ctx.r == 2
        state = solve(ctx, initial_estimate(data, ModelFamily()), Penalties(), SolverOptions(hard_threshold=1e-8))
        assert state.converged

        eps = 1/n
        def profile(b):
            G = g_all(ctx, np.array([b]))
            res = minimize(lambda l: -np.mean(log_star(1 + G @ l, eps)), np.zeros(2), method='BFGS',
                           jac=lambda l: -np.mean(log_star_d1(1 + G @ l, eps)[:, None]*G, axis=0), options={'gtol': 1e-10})
            return -res.fun
        ols = np.sum(x*y)/np.sum(x*x)
        direct = minimize_scalar(profile, bounds=(ols - 0.5, ols + 0.5), method='bounded', options={'xatol': 1e-9}).x
        assert state.beta[0] == pytest.approx(direct, abs=1e-4)

    def test_stationary_at_solution(self):
        data, _ = linear_data()
        ctx = build_context(data, ModelSpec(ModelFamily(), BasisSet('CS'), HuberScore()))
        pen = Penalties.scad(0.01, 0.8)
        state = solve(ctx, initial_estimate(data, ModelFamily()), pen)
        assert state.converged and state.n_selected > 0
        eps = 1/ctx.n
        G = g_all(ctx, state.beta)
        d1 = log_star_d1(1 + G @ state.lam, eps)
        A, E = state.active_beta, state.active_lam
        grad_beta = np.mean(d1[:, None]*np.einsum('nrp,r->np', g_jacobian_all(ctx, state.beta), state.lam), axis=0)[A]
        grad_beta += penalty_d1(np.abs(state.beta[A]), pen.beta)*np.sign(state.beta[A])
        assert_allclose(grad_beta, 0., atol=1e-3)
        grad_lam = np.mean(d1[:, None]*G, axis=0)[E] - penalty_d1(np.abs(state.lam[E]), pen.lam)*np.sign(state.lam[E])
        assert_allclose(grad_lam, 0., atol=1e-3)

    def test_restart_from_solution(self):
        data, _ = linear_data(seed=8)
        ctx = build_context(data, ModelSpec(ModelFamily(), BasisSet('CS'), HuberScore()))
        pen = Penalties.scad(0.01, 0.8)
        first = solve(ctx, initial_estimate(data, ModelFamily()), pen)
        again = solve(ctx, first.beta, pen, lam0=first.lam)
        assert np.array_equal(first.active_beta, again.active_beta)
        assert np.array_equal(first.active_lam, again.active_lam) and first.n_ee == again.n_ee
        assert_allclose(again.beta, first.beta, atol=1e-4)

    def test_column_permutation(self):
        data, _ = linear_data(n=100, seed=9)
        perm = np.array([3, 0, 4, 2, 1])
        permuted = LongitudinalDataset.from_arrays([s.y for s in data.subjects], [s.X[:, perm] for s in data.subjects])
        pen = Penalties.scad(0.01, 0.5)
        fits = []
        for d in (data, permuted):
            ctx = build_context(d, ModelSpec(ModelFamily(), BasisSet('CS'), HuberScore()), leverage=False)
            fits.append(solve(ctx, initial_estimate(d, ModelFamily()), pen))
        assert_allclose(fits[1].beta, fits[0].beta[perm], atol=1e-4)
        assert fits[0].n_ee == fits[1].n_ee

    def test_huge_penalty_zero_model(self):
        data, _ = linear_data(n=40)
        ctx = build_context(data)
        state = solve(ctx, initial_estimate(data, ModelFamily()), Penalties.scad(0.01, 1e3))
        assert state.converged
        assert np.all(state.beta == 0.)

    def test_no_descent_is_not_convergence(self, monkeypatch):
        """ Every trial scores worse than the start, so the halvings run out: the start comes back unconverged. """
        data, _ = linear_data(n=30)
        ctx = build_context(data, leverage=False)
        calls = iter(range(10**6))
        monkeypatch.setattr(rpel.optimizer, 'profile_objective', lambda *args, **kwargs: (float(next(calls)), 0.))
        monkeypatch.setattr(rpel.optimizer, 'outer_step', lambda ctx, beta, lam, penalties, opts: (beta + 1e-9, lam))
        beta0 = np.ones(data.p)
        state = solve(ctx, beta0, Penalties.scad(0.01, 0.1))
        assert not state.converged
        assert np.array_equal(state.beta, beta0)
        assert state.objective == 0. and state.trace == []

    def test_bad_start(self):
        data, _ = linear_data(n=20)
        with pytest.raises(ValueError):
            solve(build_context(data), np.zeros(2), Penalties())


class TestInitialEstimate:
    def test_gaussian_with_outliers(self):
        data, beta = linear_data(n=100, seed=4)
        y = data.y_stacked.copy()
        y[::10] += 30.
        est = initial_estimate(data.replace_stacked(y=y), ModelFamily())
        assert_allclose(est, beta, atol=0.2)

    def test_poisson(self):
        rng = np.random.default_rng(5)
        n, m = 200, 3
        beta = np.array([0.5, 0.8, 0.])
        X = [np.column_stack([np.ones(m), rng.normal(scale=0.5, size=(m, 2))]) for _ in range(n)]
        y = [rng.poisson(np.exp(x @ beta)).astype(float) for x in X]
        est = initial_estimate(LongitudinalDataset.from_arrays(y, X), ModelFamily.poisson())
        assert_allclose(est, beta, atol=0.25)
