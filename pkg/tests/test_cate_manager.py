import os
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
import yaml
from numpy.testing import assert_allclose, assert_array_equal

import NestedCATE.cate_manager as cate_manager
from NestedCATE.cate_manager import CateManager, RunConfig, ValidationReport
from NestedCATE.errors       import ConfigError

from conftest import make_config, make_run_config, write_config

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
_run_replicate = cate_manager.run_replicate


def _sections(tmp_path, out='out', **updates):
    sections = {'Run':        {'seed': '123', 'replicates': '100', 'out': str(tmp_path / out)},
                'Input':      {'file': str(tmp_path / 'sim' / 'cohort.csv')},
                'Schema':     {'modifier': 'xt'},
                'Treatment':  {'covariates': 'none'},
                'Grid':       {'min': '0.1', 'max': '0.9', 'points': '21'},
                'Simulation': {'n': '1500', 'covariates': 'xt: uniform(0,1); z: bernoulli(0.5)', 'modifier': 'xt',
                               'participation': '-0.5 + 0.8*z', 'mu1': '0.2 + 0.3*xt', 'mu0': '0.35', 'sigma': '0.5'},
                'Validate':   {'runs': '3'}}
    for name, values in updates.items():
        sections.setdefault(name, {}).update(values)
    return sections


def _run(tmp_path, command, name='cate_config.ini', overrides=None, **updates):
    path = write_config(tmp_path / name, _sections(tmp_path, **updates))
    return CateManager(path, overrides).runCommand(command)


@pytest.fixture
def simulated(tmp_path):
    assert _run(tmp_path, 'simulate', Run={'out': str(tmp_path / 'sim')}) == 0
    return tmp_path


def test_run_config_defaults():
    rc = RunConfig.from_config(make_config({'Schema': {'modifier': 'xt'}}), 'simulate')
    assert rc.replicates == 200
    assert rc.alpha == 0.05
    assert rc.variant == 'aipw'
    assert rc.se_method == 'sandwich'
    assert rc.basis.kind == 'bspline' and rc.basis.order == 3 and rc.basis.n_knots == 1
    assert RunConfig.from_config(make_config({'Schema': {'modifier': 'xt'}}), 'validate').replicates == 2000


def test_run_config_validate_replicates_take_precedence():
    rc = make_run_config('validate', Validate={'replicates': '150'})
    assert rc.replicates == 150


def test_run_config_grid():
    rc = make_run_config('simulate')
    assert_allclose(rc.grid(), np.linspace(0.1, 0.9, 21))
    rc = make_run_config('simulate', Grid={'min': '', 'max': '', 'step': '0.25'})
    assert_allclose(rc.grid(0.0, 1.0), [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ConfigError):
        rc.grid()


@pytest.mark.parametrize("sections", [
    {'Run': {'alpha': '1.5'}},
    {'Run': {'replicates': '50'}},
    {'Run': {'se_method': 'jackknife'}},
    {'Run': {'seed': 'abc'}},
    {'SecondStage': {'basis': 'wavelet'}},
    {'SecondStage': {'variant': 'tmle'}},
    {'SecondStage': {'folds': '1'}},
    {'SecondStage': {'basis': 'subgroup'}},
    {'Grid': {'min': '0.9', 'max': '0.1'}},
])
def test_run_config_rejects(sections):
    with pytest.raises(ConfigError):
        make_run_config('validate', **sections)


def test_analyze_needs_input(tmp_path):
    with pytest.raises(ConfigError, match="no input file"):
        RunConfig.from_config(make_config({'Schema': {'modifier': 'xt'}}), 'analyze')
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig.from_config(make_config({'Schema': {'modifier': 'xt'}, 'Input': {'file': str(tmp_path / 'x.csv')}}), 'analyze')


def test_simulate_writes_cohort_truth_and_manifest(simulated):
    sim = simulated / 'sim'
    cohort = pd.read_csv(sim / 'cohort.csv')
    assert list(cohort.columns) == ['xt', 'z', 's', 'a', 'y']
    assert len(cohort) == 1500
    truth = pd.read_csv(sim / 'truth.csv')
    assert list(truth.columns) == ['grid', 'truth', 'truth_trial']
    assert_allclose(truth['grid'], np.linspace(0.1, 0.9, 21))
    assert_allclose(truth['truth'], 0.3 * truth['grid'] - 0.15, atol=1e-9)
    assert_allclose(truth['truth_trial'], truth['truth'], atol=1e-9)
    manifest = yaml.safe_load((sim / 'manifest.yaml').read_text())
    assert manifest['command'] == 'simulate'
    assert manifest['seed'] == 123
    assert manifest['counts']['n'] == 1500


def test_simulate_deterministic(tmp_path):
    assert _run(tmp_path, 'simulate', Run={'out': str(tmp_path / 'a')}) == 0
    assert _run(tmp_path, 'simulate', Run={'out': str(tmp_path / 'b')}) == 0
    assert (tmp_path / 'a' / 'cohort.csv').read_bytes() == (tmp_path / 'b' / 'cohort.csv').read_bytes()


def test_analyze(simulated):
    tmp_path = simulated
    assert _run(tmp_path, 'analyze') == 0
    out = tmp_path / 'out'
    band = pd.read_csv(out / 'band.csv')
    assert list(band.columns) == ['grid', 'estimate', 'se', 'pw_low', 'pw_high', 'band_low', 'band_high']
    assert len(band) == 21
    assert (band['band_low'] <= band['pw_low']).all()
    manifest = yaml.safe_load((out / 'manifest.yaml').read_text())
    assert manifest['tool'] == 'NestedCATE'
    assert manifest['replicates'] == 100
    assert manifest['files'] == ['band.csv', 'manifest.yaml', 'summary.txt']
    stratum = manifest['strata'][0]
    assert stratum['stratum'] == 'all'
    assert stratum['columns'] == list(band.columns)
    assert stratum['counts']['n'] == 1500
    assert stratum['band']['critical_value'] >= stratum['band']['z']
    assert {d['model'] for d in stratum['nuisance']['fits']} == {'participation', 'treatment', 'outcome_a1', 'outcome_a0'}
    summary = (out / 'summary.txt').read_text()
    assert 'critical value C' in summary


def test_analyze_deterministic(simulated):
    tmp_path = simulated
    assert _run(tmp_path, 'analyze', Run={'out': str(tmp_path / 'a')}) == 0
    assert _run(tmp_path, 'analyze', Run={'out': str(tmp_path / 'b')}) == 0
    for name in ('band.csv', 'summary.txt'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def test_analyze_invalid_alpha_writes_nothing(simulated):
    tmp_path = simulated
    assert _run(tmp_path, 'analyze', overrides={('Run', 'alpha'): 1.5}) == 2
    assert not (tmp_path / 'out').exists()


def test_analyze_missing_input(tmp_path):
    assert _run(tmp_path, 'analyze') == 2


def test_analyze_data_error(tmp_path):
    path = tmp_path / 'trial_only.csv'
    path.write_text("xt,s,a,y\n0.1,1,1,1\n0.2,1,0,0\n0.3,1,1,0\n")
    assert _run(tmp_path, 'analyze', Input={'file': str(path)}) == 3


def test_analyze_separation_is_numeric_error(tmp_path, capsys):
    x = np.linspace(0, 1, 40)
    s = (x > 0.5).astype(int)
    rows = ["xt,s,a,y"]
    for i, (xi, si) in enumerate(zip(x, s)):
        rows.append('%g,%d,%s,%s' % (xi, si, str(i % 2) if si else '', str((i // 2) % 2) if si else ''))
    path = tmp_path / 'separated.csv'
    path.write_text('\n'.join(rows) + '\n')
    assert _run(tmp_path, 'analyze', Input={'file': str(path)}) == 4
    assert "Error - numeric: participation model" in capsys.readouterr().out


def test_analyze_stratified(simulated):
    tmp_path = simulated
    assert _run(tmp_path, 'analyze', overrides={('Schema', 'stratify'): 'z'}) == 0
    out = tmp_path / 'out'
    assert (out / 'band_z_0.csv').exists() and (out / 'band_z_1.csv').exists()
    manifest = yaml.safe_load((out / 'manifest.yaml').read_text())
    assert [s['stratum'] for s in manifest['strata']] == ['z=0', 'z=1']
    assert sum(s['counts']['n'] for s in manifest['strata']) == 1500
    for stratum in manifest['strata']:
        assert all('z' not in d['design'] for d in stratum['nuisance']['fits'])


def test_analyze_subgroup(simulated):
    tmp_path = simulated
    assert _run(tmp_path, 'analyze', Schema={'modifier': 'z'}, SecondStage={'basis': 'subgroup'}) == 0
    table = pd.read_csv(tmp_path / 'out' / 'subgroup.csv')
    assert list(table.columns) == ['level', 'estimate', 'se', 'n']
    assert_array_equal(table['level'], [0, 1])
    assert table['n'].sum() == 1500
    assert_allclose(table['estimate'], -0.0, atol=0.25)


def test_analyze_dump_and_resampling_options(simulated):
    tmp_path = simulated
    assert _run(tmp_path, 'analyze', Run={'dump_pseudo': '1', 'se_method': 'bootstrap'},
                SecondStage={'crossfit': '1', 'variant': 'trial_only'}) == 0
    out = tmp_path / 'out'
    pseudo = pd.read_csv(out / 'pseudo.csv')
    assert list(pseudo.columns) == ['row_id', 's', 'value', 'variant']
    assert (pseudo['s'] == 1).all()
    manifest = yaml.safe_load((out / 'manifest.yaml').read_text())
    assert manifest['crossfit'] is True
    assert manifest['se_method'] == 'bootstrap'
    assert 'pseudo.csv' in manifest['files']
    assert all('fold' in d for d in manifest['strata'][0]['nuisance']['fits'])


def test_analyze_full_bootstrap(simulated):
    tmp_path = simulated
    assert _run(tmp_path, 'analyze', Run={'se_method': 'full_bootstrap'}) == 0
    assert (pd.read_csv(tmp_path / 'out' / 'band.csv')['se'] > 0).all()


def test_validate(tmp_path):
    status = _run(tmp_path, 'validate', Simulation={'n': '800'},
                  Validate={'max_abs_bias': '1.0', 'min_uniform_coverage': '0.0'})
    assert status == 0
    report = pd.read_csv(tmp_path / 'out' / 'validation.csv')
    assert list(report.columns) == ['grid', 'truth', 'mean_estimate', 'bias', 'rmse', 'empirical_sd', 'mean_se',
                                    'pointwise_coverage']
    assert len(report) == 21
    summary = yaml.safe_load((tmp_path / 'out' / 'validation.yaml').read_text())
    assert summary['passed'] is True
    assert summary['summary']['runs'] == 3
    assert summary['columns'] == list(report.columns)
    assert summary['checks'] == {'max_failed': True, 'max_abs_bias': True, 'min_uniform_coverage': True}
    assert summary['summary']['failed'] == 0
    assert summary['summary']['uniform_coverage_all_runs'] == summary['summary']['uniform_coverage']


def test_validate_threshold_failure(tmp_path, capsys):
    assert _run(tmp_path, 'validate', Simulation={'n': '800'}, Validate={'max_abs_bias': '0'}) == 1
    assert "threshold(s) failed: max_abs_bias" in capsys.readouterr().out


def _replicate_one_fails(rc, spec, grid, truth, r):
    if r == 1:
        return {'replicate': r, 'seed': 0, 'error': 'numeric: design rank deficient'}
    return _run_replicate(rc, spec, grid, truth, r)


def test_validate_failed_replicate_fails_run(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cate_manager, 'run_replicate', _replicate_one_fails)
    assert _run(tmp_path, 'validate', Simulation={'n': '800'}) == 1
    out = capsys.readouterr().out
    assert "replicate 1 failed" in out
    assert "threshold(s) failed: max_failed" in out
    result = yaml.safe_load((tmp_path / 'out' / 'validation.yaml').read_text())
    assert result['passed'] is False
    assert result['summary']['failed'] == 1
    assert result['summary']['runs'] == 2
    assert result['summary']['uniform_coverage_all_runs'] <= 2 / 3
    assert _run(tmp_path, 'validate', Simulation={'n': '800'}, Validate={'max_failed': '1'}) == 0


def test_validate_with_truth_file(simulated):
    tmp_path = simulated
    truth = str(tmp_path / 'sim' / 'truth.csv')
    assert _run(tmp_path, 'validate', Simulation={'n': '800'}, Validate={'runs': '2', 'truth': truth}) == 0
    assert _run(tmp_path, 'validate', Simulation={'n': '800'}, Validate={'runs': '2', 'truth': truth},
                Grid={'points': '11'}) == 3


def test_validate_parallel_equals_serial(tmp_path):
    assert _run(tmp_path, 'validate', Run={'out': str(tmp_path / 'serial')}, Simulation={'n': '600'}) == 0
    assert _run(tmp_path, 'validate', Run={'out': str(tmp_path / 'parallel'), 'workers': '2'}, Simulation={'n': '600'}) == 0
    assert (tmp_path / 'serial' / 'validation.csv').read_bytes() == (tmp_path / 'parallel' / 'validation.csv').read_bytes()


def test_validation_report():
    grid, truth = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    reps = [{'estimate': np.array([0.1, 1.0]), 'se': np.array([0.1, 0.2]), 'pointwise': np.array([True, True]), 'uniform': True},
            {'estimate': np.array([-0.3, 1.2]), 'se': np.array([0.3, 0.2]), 'pointwise': np.array([False, True]), 'uniform': False}]
    report = ValidationReport(grid, truth, reps)
    t = report.DataTable
    assert_allclose(t['mean_estimate'], [-0.1, 1.1])
    assert_allclose(t['bias'], [-0.1, 0.1])
    assert_allclose(t['rmse'], [np.sqrt(0.05), np.sqrt(0.02)])
    assert_allclose(t['mean_se'], [0.2, 0.2])
    assert_allclose(t['pointwise_coverage'], [0.5, 1.0])
    summary = report.summary()
    assert summary['uniform_coverage'] == 0.5
    assert summary['max_abs_bias'] == pytest.approx(0.1)
    assert summary['mean_abs_error'] == pytest.approx((0.1 + 0.0 + 0.3 + 0.2) / 4)


def test_missing_config_file(tmp_path):
    with pytest.raises(SystemExit) as e:
        CateManager(str(tmp_path / 'missing.ini'))
    assert e.value.code == 2


def test_unknown_command(tmp_path):
    path = write_config(tmp_path / 'c.ini', _sections(tmp_path))
    assert CateManager(path).runCommand('plot') == 2


def test_command_line(tmp_path):
    path = write_config(tmp_path / 'c.ini', _sections(tmp_path))
    script = os.path.join(ROOT, 'NestedCATEs.py')
    done = subprocess.run([sys.executable, script, 'simulate', '-c', path, '--out', str(tmp_path / 'cli')],
                          capture_output=True, text=True, cwd=ROOT)
    assert done.returncode == 0
    assert (tmp_path / 'cli' / 'cohort.csv').exists()
    done = subprocess.run([sys.executable, script, 'simulate', '-c', path, '--alpha', '1.5'],
                          capture_output=True, text=True, cwd=ROOT)
    assert done.returncode == 2
    assert "Error - config: alpha must be in (0,1)" in done.stdout
