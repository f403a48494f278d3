""" Tests of CSV ingestion, fit reports and the command-line interface. """

import json

import numpy as np
import pandas as pd
import pytest

from numpy.testing import assert_allclose

from context import rpel
from rpel import DataError
from rpel.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from rpel.io import CsvSchema, FitReport, compare_reports, ingest_csv


def write_toy_csv(path, n=40, m=3, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        x = rng.normal(size=(m, 4))
        y = 3*x[:, 0] - 2*x[:, 2] + rng.normal(size=m)
        for j in reversed(range(m)): # Rows of a subject out of time order
            rows.append({'subject': f"s{i}", 'time': float(j), 'y': y[j], 'a': x[j, 0], 'b': x[j, 1], 'c': x[j, 2], 'd': 5 + 2*x[j, 3]})
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def make_report(method='A', beta=(1., 0., -2.), names=('a', 'b', 'c')):
    return FitReport(method, names, beta, lam=(0.1, 0., 0.2, 0.), bic=-3.5, v=0.01, omega=0.2, converged=True,
                     settings={'score': 'huber'}, tuning=[{'v': 0.01, 'omega': 0.2, 'bic': -3.5, 'loglik': None}])


class TestIngest:
    def test_layout(self, tmp_path):
        path = write_toy_csv(tmp_path / 'toy.csv')
        data = ingest_csv(path, standardize=False)
        assert data.n == 40 and data.p == 4
        assert data.covariate_names == ('a', 'b', 'c', 'd')
        assert_allclose(data.subjects[0].times, [0., 1., 2.])
        raw = pd.read_csv(path)
        first = raw[raw['subject'] == 's0'].sort_values('time')
        assert_allclose(data.subjects[0].y, first['y'])

    def test_standardize(self, tmp_path):
        data = ingest_csv(write_toy_csv(tmp_path / 'toy.csv'))
        X = data.X_stacked
        assert_allclose(X.mean(axis=0), 0., atol=1e-12)
        assert_allclose(X.std(axis=0), 1.)

    def test_intercept_and_time(self, tmp_path):
        data = ingest_csv(write_toy_csv(tmp_path / 'toy.csv'), add_intercept=True, add_time=True)
        assert data.p == 6
        assert data.covariate_names[:2] == ('(Intercept)', 'time')
        assert np.all(data.X_stacked[:, 0] == 1.)
        assert_allclose(data.X_stacked[:3, 1], [0., 1., 2.])

    def test_schema(self, tmp_path):
        path = write_toy_csv(tmp_path / 'toy.csv')
        data = ingest_csv(path, CsvSchema(covariates=('c', 'a')))
        assert data.covariate_names == ('c', 'a')
        with pytest.raises(DataError):
            CsvSchema(subject='y')
        with pytest.raises(DataError):
            ingest_csv(path, CsvSchema(covariates=('z',)))

    def test_missing_cells(self, tmp_path):
        df = pd.read_csv(write_toy_csv(tmp_path / 'toy.csv'))
        df.loc[4, 'b'] = np.nan
        df.to_csv(tmp_path / 'holes.csv', index=False)
        with pytest.raises(DataError, match=r"row 6, 'b'"):
            ingest_csv(tmp_path / 'holes.csv')

    def test_non_numeric(self, tmp_path):
        df = pd.read_csv(write_toy_csv(tmp_path / 'toy.csv'))
        df['b'] = df['b'].astype(str)
        df.loc[0, 'b'] = 'high'
        df.to_csv(tmp_path / 'text.csv', index=False)
        with pytest.raises(DataError, match="non-numeric"):
            ingest_csv(tmp_path / 'text.csv')

    def test_single_measurement_warns(self, tmp_path):
        df = pd.read_csv(write_toy_csv(tmp_path / 'toy.csv'))
        df = df.drop(index=[0, 1]) # Subject s0 keeps one row
        df.to_csv(tmp_path / 'single.csv', index=False)
        with pytest.warns(UserWarning, match="single measurement"):
            data = ingest_csv(tmp_path / 'single.csv')
        assert data.subjects[0].m == 1


class TestReports:
    def test_summary(self):
        report = make_report()
        assert report.selected == ('a', 'c')
        assert report.estimates == (1., -2.)
        assert report.n_selected == 2 and report.n_ee == 2
        assert "Selected 2 of 3 coefficients" in report.to_text()

    def test_round_trip(self, tmp_path):
        report = make_report()
        path = report.save(tmp_path / 'report.json')
        assert FitReport.load(path) == report
        assert json.loads(path.read_text())['summary']['selected'] == ['a', 'c']

    def test_validation(self):
        with pytest.raises(DataError):
            make_report(beta=(1., 2.))
        with pytest.raises(DataError):
            FitReport.from_dict({'method': 'A'})
        with pytest.raises(DataError):
            FitReport('A', ('a',), (1.,), (0.,), 0., 0., 0., True, standard_errors=(0.1, 0.2))

    def test_compare(self):
        a = make_report('A', (1., 0.5, 0.))
        b = make_report('B', (0., 0.7, 2.))
        comparison = compare_reports([a, b])
        assert comparison.common == ('b',)
        assert list(comparison.table['proportion']) == [0.5, 0.5]
        assert list(comparison.table['Method']) == ['A', 'B']
        with pytest.raises(ValueError):
            compare_reports([])


class TestCommandLine:
    def fit_args(self, csv, out):
        return ['fit', str(csv), '--v', '0.01', '--omega', '0.2', '--out', str(out)]

    def test_usage_errors(self, tmp_path):
        csv = write_toy_csv(tmp_path / 'toy.csv')
        assert main(['fit', str(csv), '--bogus']) == EXIT_USAGE
        assert main(['fit', str(csv), '--v', '0.1', '--out', str(tmp_path)]) == EXIT_USAGE
        assert main(['frobnicate']) == EXIT_USAGE
        assert main(['--help']) == EXIT_OK

    def test_missing_file(self, tmp_path):
        assert main(self.fit_args(tmp_path / 'nope.csv', tmp_path / 'out')) == EXIT_DATA

    def test_fit_deterministic(self, tmp_path):
        csv = write_toy_csv(tmp_path / 'toy.csv')
        assert main(self.fit_args(csv, tmp_path / 'one')) == EXIT_OK
        assert main(self.fit_args(csv, tmp_path / 'two')) == EXIT_OK
        first = (tmp_path / 'one' / 'fit_report.json').read_text()
        assert first == (tmp_path / 'two' / 'fit_report.json').read_text()
        report = FitReport.load(tmp_path / 'one' / 'fit_report.json')
        assert set(report.selected) >= {'a', 'c'}
        assert (report.v, report.omega) == (0.01, 0.2)
        assert (tmp_path / 'one' / 'bic_table.csv').exists()

    def test_diagnose_and_compare(self, tmp_path):
        csv = write_toy_csv(tmp_path / 'toy.csv')
        assert main(self.fit_args(csv, tmp_path / 'fit') + ['--se']) == EXIT_OK
        report = tmp_path / 'fit' / 'fit_report.json'
        assert main(['diagnose', str(report), '--magnitudes', '1', '100', '--out', str(tmp_path / 'diag')]) == EXIT_OK
        points = pd.read_csv(tmp_path / 'diag' / 'influence.csv')
        assert len(points) == 8 and set(points['direction']) == {'y', 'x'}
        assert main(['compare', str(report), str(report), '--out', str(tmp_path / 'cmp')]) == EXIT_OK
        assert pd.read_csv(tmp_path / 'cmp' / 'compare.csv')['proportion'].tolist() == [1., 1.]

    def test_simulate(self, tmp_path):
        scenario = {'n': 20, 'p': 5, 'm': 3, 'beta': [3., 1.5, 0., 0., 2.], 'replicates': 1, 'methods': ['HRPEL'], 'grid_points': 3}
        path = tmp_path / 'tiny.json'
        path.write_text(json.dumps(scenario))
        assert main(['simulate', str(path), '--out', str(tmp_path / 'sim')]) == EXIT_OK
        summary = pd.read_csv(tmp_path / 'sim' / 'tiny_summary.csv')
        assert list(summary['Method']) == ['HRPEL']
        assert {'AEE', 'MME', 'C', 'IC', 'CF', 'No.EE', 'failures'} <= set(summary.columns)
        metadata = json.loads((tmp_path / 'sim' / 'tiny_metadata.json').read_text())
        assert metadata['methods'] == ['HRPEL'] and set(metadata['rpel_config']) == {'N_JOBS', 'VERBOSE', 'DEVICE_ID'}

    def test_simulate_bad_scenario(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text(json.dumps({'n': 20, 'sigma': 1.}))
        assert main(['simulate', str(path), '--out', str(tmp_path / 'sim')]) == EXIT_DATA

    def test_tune(self, tmp_path):
        csv = write_toy_csv(tmp_path / 'toy.csv')
        out = tmp_path / 'tune'
        args = ['tune', str(csv), '--v-values', '0.01', '--omega-values', '0.1', '0.2', '--score-candidates', '1.0', '1.345', '--out', str(out)]
        assert main(args) == EXIT_OK
        table = pd.read_csv(out / 'bic_table.csv')
        assert len(table) == 2 and table['selected'].sum() == 1
        assert sorted(table['omega']) == [0.1, 0.2]
        constants = pd.read_csv(out / 'score_constants.csv')
        assert sorted(constants['constant']) == [1.0, 1.345]

    def test_threads_do_not_change_reports(self, tmp_path):
        csv = write_toy_csv(tmp_path / 'toy.csv')
        grid = ['--v-values', '0.005', '0.05', '--omega-values', '0.1', '0.3']
        for threads in (1, 2):
            assert main(['fit', str(csv), *grid, '--threads', str(threads), '--out', str(tmp_path / f"t{threads}")]) == EXIT_OK
        for name in ('fit_report.json', 'bic_table.csv'):
            assert (tmp_path / 't1' / name).read_bytes() == (tmp_path / 't2' / name).read_bytes()
