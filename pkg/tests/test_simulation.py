""" Tests of the scenario generators, the outlier injection, the metrics and the replicated experiment. """

import numpy as np
import pytest

from numpy.testing import assert_allclose

from context import rpel
from rpel import DataError
from rpel.simulation import (Contamination, Correlation, ErrorLaw, ScenarioSpec, contaminate, correlation_matrix,
                             covariate_covariance, gen_continuous, gen_count, metrics, run_experiment)
from rpel.tuning import TuningGrid


def residual_correlation(data, beta):
    E = np.array([s.y - s.X @ beta for s in data.subjects])
    return np.corrcoef(E, rowvar=False)


class TestScenario:
    def test_padding_and_defaults(self):
        spec = ScenarioSpec(n=10, p=6, beta=(1., 0., 2.))
        assert spec.beta == (1., 0., 2., 0., 0., 0.)
        assert list(spec.support) == [0, 2]
        assert spec.errors.law == 'gaussian' and spec.covariate_scale == 1.
        count = ScenarioSpec(n=10, p=6, family='poisson', beta=(0.5,))
        assert count.errors.law == 'copula' and count.covariate_scale == rpel.simulation.COUNT_COVARIATE_SCALE

    def test_invalid(self):
        with pytest.raises(ValueError):
            ScenarioSpec(p=2, beta=(1., 2., 3.))
        with pytest.raises(ValueError):
            ScenarioSpec(family='poisson', errors=ErrorLaw('t'))
        with pytest.raises(ValueError):
            ScenarioSpec(family='poisson', contamination=Contamination('y'))
        with pytest.raises(ValueError):
            Correlation('exchangeable')
        with pytest.raises(DataError):
            ScenarioSpec.from_dict({'n': 10, 'sigma': 2.})

    def test_json_round_trip(self, tmp_path):
        spec = ScenarioSpec(n=30, p=8, errors=ErrorLaw('t', 3.), correlation=Correlation('AR1', 0.5),
                            contamination=Contamination('xy', 0.1, 0.1), replicates=7, base_seed=11)
        assert ScenarioSpec.load(spec.save(tmp_path / 'scenario.json')) == spec

    def test_matrices(self):
        assert_allclose(correlation_matrix(Correlation('AR1', 0.5), 3)[0], [1., 0.5, 0.25])
        assert_allclose(correlation_matrix(Correlation('CS', 0.3), 3)[2], [0.3, 0.3, 1.])
        cov = covariate_covariance(ScenarioSpec(p=3, beta=(1.,), covariate_scale=2.))
        assert_allclose(cov[0], [4., 2., 1.])


class TestGenerators:
    def test_continuous_correlation(self):
        spec = ScenarioSpec(n=4000, p=2, m=3, beta=(1., -1.), correlation=Correlation('CS', 0.7))
        data = gen_continuous(spec, 0)
        assert data.n == 4000 and data.p == 2 and np.all(data.cluster_sizes == 3)
        R = residual_correlation(data, spec.beta_true)
        assert_allclose(R[np.triu_indices(3, 1)], 0.7, atol=0.05)

    def test_ar1_t_errors(self):
        spec = ScenarioSpec(n=4000, p=2, m=3, beta=(1.,), correlation=Correlation('AR1', 0.6), errors=ErrorLaw('t', 5.))
        R = residual_correlation(gen_continuous(spec, 1), spec.beta_true)
        assert R[0, 1] == pytest.approx(0.6, abs=0.06)
        assert R[0, 2] == pytest.approx(0.36, abs=0.06)

    def test_reproducible(self):
        spec = ScenarioSpec(n=20, p=4, beta=(1.,))
        a, b = gen_continuous(spec, 5), gen_continuous(spec, 5)
        assert np.array_equal(a.y_stacked, b.y_stacked) and np.array_equal(a.X_stacked, b.X_stacked)
        assert not np.array_equal(a.y_stacked, gen_continuous(spec, 6).y_stacked)

    def test_count_marginals(self):
        spec = ScenarioSpec(n=3000, p=2, m=2, family='poisson', beta=(2., 0.), covariate_scale=0.3)
        data = gen_count(spec, 2)
        y, X = data.y_stacked, data.X_stacked
        assert np.all(y >= 0) and np.all(y == np.round(y))
        mu = np.exp(X @ spec.beta_true)
        assert np.mean(y) == pytest.approx(np.mean(mu), rel=0.05)
        assert np.mean((y - mu)**2/mu) == pytest.approx(1., abs=0.1) # Poisson marginals
        E = np.array([s.y - np.exp(s.X @ spec.beta_true) for s in data.subjects])
        assert 0.3 < np.corrcoef(E, rowvar=False)[0, 1] < 0.73 # Positive but attenuated by the copula

    def test_count_overflow(self):
        with pytest.raises(rpel.NumericalError):
            gen_count(ScenarioSpec(n=10, p=2, family='poisson', beta=(100.,), covariate_scale=1.), 0)


class TestContamination:
    def setup_method(self):
        self.data = gen_continuous(ScenarioSpec(n=50, p=3, m=5, beta=(1.,)), 0)

    def test_nothing_to_inject(self):
        assert contaminate(self.data, Contamination('none'), 1) is self.data
        assert contaminate(self.data, Contamination('y', y_rate=0.), 1) is self.data

    def test_response_outliers(self):
        out = contaminate(self.data, Contamination('y', y_rate=0.1), 1)
        changed = out.y_stacked != self.data.y_stacked
        assert np.sum(changed) == 25
        assert np.array_equal(out.X_stacked, self.data.X_stacked)
        assert np.mean(out.y_stacked[changed] - self.data.y_stacked[changed]) > 5

    def test_covariate_outliers(self):
        out = contaminate(self.data, Contamination('xy', y_rate=0.1, x_rate=0.2), 2)
        assert np.sum(out.y_stacked != self.data.y_stacked) == 25
        assert np.sum(out.X_stacked[:, 0] != self.data.X_stacked[:, 0]) == 50
        assert np.array_equal(out.X_stacked[:, 1:], self.data.X_stacked[:, 1:])

    def test_count_outliers(self):
        data = gen_count(ScenarioSpec(n=50, p=3, m=5, family='poisson', beta=(0.5,)), 0)
        out = contaminate(data, Contamination('count_xy', y_rate=0.1, x_rate=0.1, x_shift=1.), 3)
        added = out.y_stacked - data.y_stacked
        assert np.all(added >= 0) and np.all(added == np.round(added)) and np.sum(added > 0) == 25
        shifted = out.X_stacked[:, 0] - data.X_stacked[:, 0]
        assert np.sum(shifted != 0) == 25
        assert_allclose(shifted[shifted != 0], 1.)

    @pytest.mark.parametrize("df", [0.3, 1.])
    def test_count_outliers_always_change(self, df):
        """ chi2 draws below 0.5 round to 0, they are redrawn so every selected count moves. """
        data = gen_count(ScenarioSpec(n=50, p=3, m=5, family='poisson', beta=(0.5,)), 0)
        out = contaminate(data, Contamination('count_y', y_rate=0.2, count_df=df), 4)
        added = out.y_stacked - data.y_stacked
        assert np.sum(added != 0) == 50
        assert np.all(added[added != 0] >= 1)


class TestMetrics:
    def test_perfect_fits(self):
        truth = np.zeros(100)
        truth[[0, 1, 4]] = (3., 1.5, 2.)
        s = metrics([(truth.copy(), 10)]*100, truth)
        assert (s.C, s.IC, s.CF, s.AEE, s.MME, s.n_ee) == (97., 0., 100., 0., 0., 10.)

    def test_one_empty_fit(self):
        truth = np.zeros(100)
        truth[[0, 1, 4]] = (3., 1.5, 2.)
        fits = [(truth.copy(), 5)]*99 + [(np.zeros(100), 5)]
        s = metrics(fits, truth)
        assert s.IC == pytest.approx(0.03)
        assert s.CF == pytest.approx(99.)
        assert s.C == 97.
        assert s.bias[0] == pytest.approx(-0.03)

    def test_errors(self):
        truth = np.array([1., 0., 0.])
        s = metrics([(np.array([1.1, 0., 0.]), 2)], truth, sigma_x=np.diag([2., 1., 1.]))
        assert s.AEE == pytest.approx(0.01)
        assert s.MME == pytest.approx(0.02)
        assert s.mse[0] == pytest.approx(0.01)
        row = s.row('X')
        assert row['Method'] == 'X' and row['Bias_b1'] == pytest.approx(0.1) and row['No.EE'] == 2.

    def test_no_fits(self):
        s = metrics([], np.array([1., 0.]))
        assert np.isnan(s.CF) and np.isnan(s.bias[0])


class TestExperiment:
    spec = ScenarioSpec(n=20, p=5, m=3, beta=(3., 1.5, 0., 0., 2.), contamination=Contamination('y', 0.1), replicates=2, base_seed=4)
    grid = TuningGrid((0.01,), (0.1, 0.3))

    def test_tables(self, tmp_path):
        result = run_experiment(self.spec, ['HRPEL', 'NPEL'], self.grid)
        assert list(result.summary['Method']) == ['HRPEL', 'NPEL']
        for col in ('Bias_b1', 'MSE_b5', 'AEE', 'MME', 'C', 'IC', 'CF', 'No.EE', 'failures'):
            assert col in result.summary.columns
        assert len(result.replicates) == 4
        assert list(result.replicates['method']) == ['HRPEL', 'NPEL', 'HRPEL', 'NPEL']
        assert {f"beta_{j}" for j in range(1, 6)} <= set(result.replicates.columns)
        summary_path, replicates_path = result.save(tmp_path)
        assert summary_path.exists() and replicates_path.exists()

    def test_deterministic_and_parallel(self):
        serial = run_experiment(self.spec, ['HRPEL'], self.grid)
        again = run_experiment(self.spec, ['HRPEL'], self.grid)
        parallel = run_experiment(self.spec, ['HRPEL'], self.grid, n_jobs=2)
        assert serial.replicates.equals(again.replicates)
        assert serial.replicates.equals(parallel.replicates)

    def test_method_validation(self):
        with pytest.raises(ValueError):
            run_experiment(self.spec, [], self.grid)
        with pytest.raises(ValueError):
            run_experiment(self.spec, ['HRPEL', 'hrpel'], self.grid)
