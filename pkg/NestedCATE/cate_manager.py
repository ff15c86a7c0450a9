"""
Copyright (C) 2026    NestedCATE contributors

This program is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see <https://www.gnu.org/licenses/>.
"""

import configparser
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses        import dataclass
from typing             import Optional

import numpy  as np
import pandas as pd
import yaml

from .                 import __version__
from .basis            import BasisSpec
from .dataset          import CohortSchema, load_cohort, split_strata, assign_folds
from .errors           import CateError, ConfigError, DataError
from .inference        import band_from_fit, pipeline_bootstrap_se, MIN_REPLICATES
from .nuisance         import NuisanceSpec, fit_nuisances, fit_nuisances_crossfit, EPSILON
from .pseudo           import compute_pseudo, dump_csv, VARIANTS
from .results          import CateResult
from .second_stage     import fit_cate, evaluate_grid, subgroup_cate, make_grid, check_grid_support, bootstrap_se
from .simulate         import DgpSpec, generate, true_cate, Uniform, Normal, Discrete
from .streams          import derive_seed, STREAM_REPLICATE

SE_METHODS = ('sandwich', 'bootstrap', 'full_bootstrap')
COMMANDS   = ('analyze', 'simulate', 'validate')

@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; built completely before anything is written"""
    command:       str
    seed:          int
    alpha:         float
    replicates:    int
    out:           str
    verbose:       int
    workers:       int
    se_method:     str
    epsilon:       float
    dump_pseudo:   bool
    input:         Optional[str]
    schema:        CohortSchema
    participation: NuisanceSpec
    treatment:     NuisanceSpec
    outcome:       NuisanceSpec
    second_stage:  str
    basis:         Optional[BasisSpec]
    variant:       str
    crossfit:      bool
    folds:         int
    grid_min:      Optional[float]
    grid_max:      Optional[float]
    grid_step:     Optional[float]
    grid_points:   int

    @classmethod
    def from_config(cls, config, command):
        if command not in COMMANDS:
            raise ConfigError("unknown command '" + str(command) + "', use one of " + ', '.join(COMMANDS))
        def _section(name):
            return config[name] if config.has_section(name) else None
        def _opt_float(section, key):
            if section is None or section.get(key, '').strip() == '':
                return None
            return section.getfloat(key)

        try:
            run        = _section('Run') or {}
            seed       = int(run.get('seed', '0'))
            alpha      = float(run.get('alpha', '0.05'))
            default_B  = '2000' if command == 'validate' else '200'
            replicates = int(run.get('replicates', default_B))
            if command == 'validate' and _section('Validate') is not None and config['Validate'].get('replicates', '').strip() != '':
                replicates = config['Validate'].getint('replicates')
            out        = run.get('out', 'results')
            verbose    = int(run.get('verbose', '0'))
            workers    = int(run.get('workers', '1'))
            se_method  = run.get('se_method', 'sandwich').strip().lower()
            epsilon    = float(run.get('epsilon', str(EPSILON)))
            dump       = str(run.get('dump_pseudo', '0')).strip().lower() in ('1', 'yes', 'true', 'on')

            schema     = CohortSchema.from_config(_section('Schema') or {})
            stage      = _section('SecondStage')
            get        = (lambda key, default: stage.get(key, default)) if stage is not None else (lambda key, default: default)
            kind       = get('basis', 'bspline').strip().lower()
            variant    = get('variant', 'aipw').strip().lower()
            crossfit   = str(get('crossfit', '0')).strip().lower() in ('1', 'yes', 'true', 'on')
            folds      = int(get('folds', '2'))
            grid       = _section('Grid')
            grid_min   = _opt_float(grid, 'min')
            grid_max   = _opt_float(grid, 'max')
            grid_step  = _opt_float(grid, 'step')
            points     = int(grid.get('points', '100')) if grid is not None else 100

            if kind == 'bspline':
                basis = BasisSpec(kind = 'bspline', order = int(get('order', '3')), n_knots = int(get('knots', '1')))
            elif kind == 'polynomial':
                basis = BasisSpec(kind = 'polynomial', degree = int(get('degree', '3')))
            elif kind == 'subgroup':
                basis = None
            else:
                raise ConfigError("[SecondStage] basis must be bspline, polynomial or subgroup, got '" + kind + "'")
            participation = NuisanceSpec.from_config(_section('Participation'), 'logistic')
            treatment     = NuisanceSpec.from_config(_section('Treatment'),     'logistic')
            outcome       = NuisanceSpec.from_config(_section('Outcome'),       'auto')
        except ValueError as e:
            raise ConfigError("invalid configuration value: " + str(e))

        if not 0 < alpha < 1:
            raise ConfigError("alpha must be in (0,1), got " + ('%g' % alpha))
        if replicates < MIN_REPLICATES:
            raise ConfigError("replicates must be >= " + str(MIN_REPLICATES) + ", got " + str(replicates))
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        if se_method not in SE_METHODS:
            raise ConfigError("se_method must be one of " + ', '.join(SE_METHODS) + ", got '" + se_method + "'")
        if not 0 <= epsilon < 0.5:
            raise ConfigError("epsilon must be in [0, 0.5)")
        if variant not in VARIANTS:
            raise ConfigError("variant must be one of " + ', '.join(VARIANTS) + ", got '" + variant + "'")
        if folds < 2:
            raise ConfigError("folds must be >= 2, got " + str(folds))
        if grid_step is not None and grid_step <= 0:
            raise ConfigError("grid step must be > 0")
        if points < 1:
            raise ConfigError("grid points must be >= 1")
        if grid_min is not None and grid_max is not None:
            if grid_min > grid_max or (grid_min == grid_max and (points > 1 or grid_step is not None)):
                raise ConfigError("grid min must be below grid max")
        if basis is not None and len(schema.modifiers) > 1:
            raise ConfigError("series second stage takes exactly one effect modifier, got " + ', '.join(schema.modifiers))

        inputFile = None
        if command == 'analyze':
            inputFile = (_section('Input') or {}).get('file', None)
            if inputFile is None or inputFile.strip() == '':
                raise ConfigError("no input file ([Input] file or --input)")
            if not os.path.isfile(inputFile):
                raise ConfigError("input file '" + inputFile + "' does not exist")
            if len(schema.modifiers) == 0:
                raise ConfigError("[Schema] names no effect modifier")
        if command == 'validate' and basis is None:
            raise ConfigError("validate needs a bspline or polynomial second stage")

        return cls(command = command, seed = seed, alpha = alpha, replicates = replicates, out = out, verbose = verbose,
                   workers = workers, se_method = se_method, epsilon = epsilon, dump_pseudo = dump, input = inputFile,
                   schema = schema, participation = participation, treatment = treatment, outcome = outcome,
                   second_stage = kind, basis = basis, variant = variant, crossfit = crossfit, folds = folds,
                   grid_min = grid_min, grid_max = grid_max, grid_step = grid_step, grid_points = points)

    def grid(self, lo=None, hi=None):
        """configured grid; missing bounds are taken from lo/hi"""
        gmin = self.grid_min if self.grid_min is not None else lo
        gmax = self.grid_max if self.grid_max is not None else hi
        if gmin is None or gmax is None:
            raise ConfigError("grid bounds missing ([Grid] min, max)")
        return make_grid(gmin, gmax, self.grid_step, self.grid_points)

def _file_label(label):
    return re.sub(r'[^A-Za-z0-9.\-]+', '_', label)

def analyze_dataset(ds, rc: RunConfig, label=None, seed=None, grid=None, workers=None):
    """Both estimation steps and inference on one dataset (one stratum). Returns dict with
    'table' (UniformBand or SubgroupTable), 'pseudo', 'nuisance' summary and 'counts'"""
    seed    = rc.seed if seed is None else seed
    workers = rc.workers if workers is None else workers
    exclude = (rc.schema.stratify,) if rc.schema.stratify else ()
    specs   = dict(participation = rc.participation, outcome = rc.outcome, treatment = rc.treatment, epsilon = rc.epsilon, exclude = exclude)

    def _nuisances(d, verbose):
        if rc.crossfit:
            folds = assign_folds(d, rc.folds, seed)
            return fit_nuisances_crossfit(d, folds, workers = workers, verbose = verbose, **specs)
        return fit_nuisances(d, verbose = verbose, **specs)

    modifier = rc.schema.modifiers[0] if rc.schema.modifiers else ds.modifiers[0]
    nuis     = _nuisances(ds, rc.verbose)
    pseudo   = compute_pseudo(ds, nuis, rc.variant)
    x        = ds.column(modifier)[pseudo.rows]
    result   = { 'pseudo': pseudo, 'nuisance': nuis.summary(), 'counts': ds.counts() }
    if rc.basis is None:
        result['table'] = subgroup_cate(pseudo, x, label)
        return result

    fit  = fit_cate(pseudo, x, rc.basis, stratum_label = label)
    if grid is None:
        trialX = ds.column(modifier)[ds.trial]
        grid   = rc.grid(float(np.min(trialX)), float(np.max(trialX)))
    result['sparse'] = check_grid_support(ds.column(modifier)[ds.trial], grid)
    se = None
    if rc.se_method == 'bootstrap':
        se = bootstrap_se(fit, grid, rc.replicates, seed)
    elif rc.se_method == 'full_bootstrap':
        def _estimate(d):
            n = _nuisances(d, 0)
            p = compute_pseudo(d, n, rc.variant)
            f = fit_cate(p, d.column(modifier)[p.rows], fit.basis_spec)
            return evaluate_grid(f, grid).estimate
        se = pipeline_bootstrap_se(ds, grid, _estimate, rc.replicates, seed, rc.verbose)
    result['table'] = band_from_fit(fit, grid, rc.alpha, rc.replicates, seed, se = se, workers = workers, verbose = rc.verbose)
    result['fit']   = fit
    return result

def run_replicate(rc: RunConfig, spec: DgpSpec, grid, truth, r):
    """one validation replicate: simulate, analyze, compare with the truth"""
    seed = derive_seed(rc.seed, STREAM_REPLICATE, r)
    try:
        ds   = generate(spec, seed)
        band = analyze_dataset(ds, rc, seed = seed, grid = grid, workers = 1)['table']
    except CateError as e:
        return { 'replicate': r, 'seed': seed, 'error': e.category + ': ' + str(e) }
    uniform, pointwise = band.covers(truth)
    return { 'replicate': r, 'seed': seed, 'error': None, 'estimate': band.estimate, 'se': band.se,
             'pointwise': pointwise, 'uniform': uniform, 'critical_value': band.critical_value }

class ValidationReport(CateResult):
    """per grid point: truth, mean estimate, bias, RMSE, empirical SD, mean SE, pointwise coverage"""

    def __init__(self, grid, truth, replicates):
        super().__init__()
        est  = np.array([r['estimate']  for r in replicates])
        se   = np.array([r['se']        for r in replicates])
        pw   = np.array([r['pointwise'] for r in replicates], dtype=float)
        self.runs             = len(replicates)
        self.uniform_coverage = float(np.mean([r['uniform'] for r in replicates]))
        self.mean_abs_error   = float(np.mean(np.abs(est - truth)))
        self.DataTable = pd.DataFrame({ 'grid':                grid,
                                        'truth':               truth,
                                        'mean_estimate':       est.mean(axis=0),
                                        'bias':                est.mean(axis=0) - truth,
                                        'rmse':                np.sqrt(np.mean((est - truth)**2, axis=0)),
                                        'empirical_sd':        est.std(axis=0, ddof=1) if self.runs > 1 else np.full(len(grid), np.nan),
                                        'mean_se':             se.mean(axis=0),
                                        'pointwise_coverage':  pw.mean(axis=0) })
        self.csvName   = 'validation.csv'

    def summary(self):
        t = self.DataTable
        return { 'runs':                    self.runs,
                 'uniform_coverage':        self.uniform_coverage,
                 'mean_pointwise_coverage': float(t['pointwise_coverage'].mean()),
                 'min_pointwise_coverage':  float(t['pointwise_coverage'].min()),
                 'max_abs_bias':            float(t['bias'].abs().max()),
                 'mean_abs_error':          self.mean_abs_error }

class CateManager:
    def __init__(self, configFile, overrides=None):
        """overrides: {(section, key): value} from command line flags; they replace file values"""
        try:
            config = configparser.ConfigParser(inline_comment_prefixes='#', empty_lines_in_values=False)
            if not os.path.isfile(configFile):
                raise ConfigError("File does not exist")
            config.read(configFile)
        except (ConfigError, configparser.Error) as e:
            print("Error - config: reading config file '" + configFile + "': " + str(e))
            sys.exit(ConfigError.exit_code)
        for (section, key), value in (overrides or {}).items():
            if value is None:
                continue
            if not config.has_section(section):
                config.add_section(section)
            config[section][key] = str(value)
        self.config     = config
        self.configFile = configFile

    def runCommand(self, command):
        """run one subcommand; returns exit status (errors are printed, not raised)"""
        try:
            if command == 'analyze':
                return self.cmd_analyze()
            if command == 'simulate':
                return self.cmd_simulate()
            if command == 'validate':
                return self.cmd_validate()
            raise ConfigError("unknown command '" + str(command) + "'")
        except CateError as e:
            print("Error - " + e.category + ": " + str(e))
            return e.exit_code
        except Exception as e:
            print("Error - unexpected: " + type(e).__name__ + ": " + str(e))
            return 1

    def _resolved_config(self):
        return { section: dict(self.config[section]) for section in self.config.sections() }

    def _write_yaml(self, rc, name, content):
        os.makedirs(rc.out, exist_ok=True)
        path = os.path.join(rc.out, name)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            yaml.safe_dump(content, f, sort_keys=False, default_flow_style=False)
        return path

    def _simulation_spec(self, rc):
        section = self.config['Simulation'] if self.config.has_section('Simulation') else None
        return DgpSpec.from_config(section, seed = rc.seed)

    @staticmethod
    def _support(spec):
        """default grid bounds from the law of the effect modifier"""
        law = spec.law(spec.modifier)
        if isinstance(law, Uniform):
            return law.a, law.b
        if isinstance(law, Normal):
            return law.m - 2 * law.s, law.m + 2 * law.s
        if isinstance(law, Discrete):
            return float(law.values[0]), float(law.values[-1])
        raise ConfigError("no default grid for the effect modifier law")

    def _simulation_grid(self, rc, spec):
        law = spec.law(spec.modifier)
        if isinstance(law, Discrete) and rc.grid_min is None and rc.grid_max is None:
            return law.values.copy()
        return rc.grid(*self._support(spec))

    #----------------------------------------------------------------------------------- analyze
    def cmd_analyze(self):
        rc     = RunConfig.from_config(self.config, 'analyze')
        ds     = load_cohort(rc.input, rc.schema, rc.verbose)
        strata = split_strata(ds, rc.schema.stratify)
        results = []
        for label, part in strata:
            if rc.verbose > 0:
                print("Message - cmd_analyze: stratum " + label + " (" + str(part.n_rows) + " rows)")
            results.append((label, analyze_dataset(part, rc, label = None if label == 'all' else label)))

        files    = []
        manifest = { 'tool':       'NestedCATE',
                     'version':    __version__,
                     'command':    'analyze',
                     'seed':       rc.seed,
                     'replicates': rc.replicates,
                     'alpha':      rc.alpha,
                     'variant':    rc.variant,
                     'se_method':  rc.se_method,
                     'crossfit':   rc.crossfit,
                     'load':       ds.report,
                     'strata':     [] }
        lines = [ 'NestedCATE ' + __version__ + ' - analyze ' + rc.input,
                  'variant ' + rc.variant + ', second stage ' + rc.second_stage + ', se ' + rc.se_method +
                  ', alpha ' + ('%g' % rc.alpha) + ', B ' + str(rc.replicates) + ', seed ' + str(rc.seed), '' ]
        for label, res in results:
            table           = res['table']
            table.storePath = rc.out
            kind            = 'subgroup' if rc.basis is None else 'band'
            table.csvName   = kind + ('.csv' if label == 'all' else '_' + _file_label(label) + '.csv')
            files.append(os.path.basename(table.writeCSV()))
            entry = { 'stratum':  label,
                      'counts':   res['counts'],
                      'file':     table.csvName,
                      'columns':  table.get_ParaNames(),
                      'nuisance': res['nuisance'] }
            c = res['counts']
            lines.append('stratum ' + label + ': ' + str(c['n']) + ' rows, ' + str(c['trial']) + ' randomized (' + str(c['arm1']) + ' treated, ' +
                         str(c['arm0']) + ' control), ' + str(c['nontrial']) + ' non-randomized; ' +
                         str(res['nuisance']['truncation_count']) + ' truncated probabilities')
            if kind == 'band':
                entry['band'] = table.summary()
                entry['grid'] = { 'min': float(table.grid[0]), 'max': float(table.grid[-1]), 'points': int(len(table.grid)) }
                entry['sparse_bounds'] = res['sparse']
                lines.append('    critical value C = ' + ('%.4f' % table.critical_value) + ' (z = ' + ('%.4f' % table.z) + ')')
                lines.append('    %12s %12s %12s %12s %12s' % ('grid', 'estimate', 'se', 'band_low', 'band_high'))
                for i in sorted(set([0, len(table.grid) // 2, len(table.grid) - 1])):
                    lines.append('    %12.4g %12.4g %12.4g %12.4g %12.4g' % (table.grid[i], table.estimate[i], table.se[i],
                                                                             table.band_low[i], table.band_high[i]))
            else:
                for _, row in table.DataTable.iterrows():
                    lines.append('    level %g: estimate %.4g, se %.4g, n %d' % (row['level'], row['estimate'], row['se'], row['n']))
            if rc.dump_pseudo:
                name = 'pseudo' + ('.csv' if label == 'all' else '_' + _file_label(label) + '.csv')
                dump_csv(dict(strata)[label], res['pseudo'], os.path.join(rc.out, name))
                files.append(name)
            manifest['strata'].append(entry)
        manifest['files']  = files + ['manifest.yaml', 'summary.txt']
        manifest['config'] = self._resolved_config()
        self._write_yaml(rc, 'manifest.yaml', manifest)
        with open(os.path.join(rc.out, 'summary.txt'), 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n'.join(lines) + '\n')
        print("Message - cmd_analyze: results written to " + rc.out)
        return 0

    #----------------------------------------------------------------------------------- simulate
    def cmd_simulate(self):
        rc   = RunConfig.from_config(self.config, 'simulate')
        spec = self._simulation_spec(rc)
        grid = self._simulation_grid(rc, spec)
        ds   = generate(spec)
        os.makedirs(rc.out, exist_ok=True)
        ds.write_csv(os.path.join(rc.out, 'cohort.csv'))
        truth = CateResult()
        truth.DataTable = pd.DataFrame({ 'grid':        grid,
                                         'truth':       true_cate(spec, grid, 'target'),
                                         'truth_trial': true_cate(spec, grid, 'trial') })
        truth.csvName   = 'truth.csv'
        truth.storePath = rc.out
        truth.writeCSV()
        self._write_yaml(rc, 'manifest.yaml', { 'tool': 'NestedCATE', 'version': __version__, 'command': 'simulate',
                                                'seed': rc.seed, 'counts': ds.counts(), 'dgp': spec.to_config(),
                                                'files': ['cohort.csv', 'truth.csv', 'manifest.yaml'],
                                                'config': self._resolved_config() })
        print("Message - cmd_simulate: " + str(ds.n_rows) + " rows written to " + os.path.join(rc.out, 'cohort.csv'))
        return 0

    #----------------------------------------------------------------------------------- validate
    def _truth(self, rc, spec, grid):
        population = 'trial' if rc.variant == 'trial_only' else 'target'
        section    = self.config['Validate'] if self.config.has_section('Validate') else {}
        truthFile  = section.get('truth', '').strip() if section else ''
        if truthFile == '':
            return true_cate(spec, grid, population)
        if not os.path.isfile(truthFile):
            raise ConfigError("truth file '" + truthFile + "' does not exist")
        df     = pd.read_csv(truthFile)
        column = 'truth_trial' if population == 'trial' else 'truth'
        if 'grid' not in df.columns or column not in df.columns:
            raise DataError("truth file '" + truthFile + "' needs columns grid and " + column)
        if len(df) != len(grid) or not np.allclose(df['grid'].to_numpy(dtype=float), grid, rtol=0, atol=1e-9):
            raise DataError("truth file '" + truthFile + "' grid does not match the configured grid")
        return df[column].to_numpy(dtype=float)

    def cmd_validate(self):
        rc      = RunConfig.from_config(self.config, 'validate')
        section = self.config['Validate'] if self.config.has_section('Validate') else None
        try:
            runs       = section.getint('runs', 100) if section is not None else 100
            maxFailed  = section.getint('max_failed', 0) if section is not None else 0
            thresholds = {}
            for key in ('max_abs_bias', 'min_uniform_coverage', 'min_pointwise_coverage', 'max_pointwise_coverage'):
                if section is not None and section.get(key, '').strip() != '':
                    thresholds[key] = section.getfloat(key)
        except ValueError as e:
            raise ConfigError("[Validate]: " + str(e))
        if runs < 1:
            raise ConfigError("[Validate] runs must be >= 1")
        if maxFailed < 0:
            raise ConfigError("[Validate] max_failed must be >= 0")
        spec  = self._simulation_spec(rc)
        grid  = self._simulation_grid(rc, spec)
        truth = self._truth(rc, spec, grid)

        if rc.workers > 1:
            with ProcessPoolExecutor(max_workers = rc.workers) as pool:
                reps = list(pool.map(run_replicate, [rc] * runs, [spec] * runs, [grid] * runs, [truth] * runs, range(runs)))
        else:
            reps = [run_replicate(rc, spec, grid, truth, r) for r in range(runs)]
        failed = [r for r in reps if r['error'] is not None]
        ok     = [r for r in reps if r['error'] is None]
        for r in failed:
            print("Warning - cmd_validate: replicate " + str(r['replicate']) + " failed: " + r['error'])
        if not ok:
            raise DataError("validate: all " + str(runs) + " replicates failed")

        report           = ValidationReport(grid, truth, ok)
        report.storePath = rc.out
        report.writeCSV()
        summary = report.summary()
        summary['failed'] = len(failed)
        summary['uniform_coverage_all_runs'] = float(sum(bool(r['uniform']) for r in ok)) / runs       # failed runs count as not covering
        checks  = { 'max_failed': len(failed) <= maxFailed }
        thresholds['max_failed'] = maxFailed
        if 'max_abs_bias' in thresholds:
            checks['max_abs_bias'] = summary['max_abs_bias'] <= thresholds['max_abs_bias']
        if 'min_uniform_coverage' in thresholds:
            checks['min_uniform_coverage'] = summary['uniform_coverage'] >= thresholds['min_uniform_coverage']
        if 'min_pointwise_coverage' in thresholds:
            checks['min_pointwise_coverage'] = summary['mean_pointwise_coverage'] >= thresholds['min_pointwise_coverage']
        if 'max_pointwise_coverage' in thresholds:
            checks['max_pointwise_coverage'] = summary['mean_pointwise_coverage'] <= thresholds['max_pointwise_coverage']
        passed = all(checks.values())
        self._write_yaml(rc, 'validation.yaml', { 'tool': 'NestedCATE', 'version': __version__, 'command': 'validate',
                                                  'seed': rc.seed, 'runs': runs, 'replicates': rc.replicates, 'alpha': rc.alpha,
                                                  'columns': report.get_ParaNames(),
                                                  'variant': rc.variant, 'summary': summary,
                                                  'thresholds': thresholds, 'checks': checks, 'passed': passed,
                                                  'dgp': spec.to_config(), 'config': self._resolved_config() })
        print("Message - cmd_validate: " + str(len(ok)) + " replicates, uniform coverage " + ('%.3f' % summary['uniform_coverage']) +
              ", mean pointwise coverage " + ('%.3f' % summary['mean_pointwise_coverage']) + ", max |bias| " + ('%.4f' % summary['max_abs_bias']))
        if not passed:
            print("Error - validate: threshold(s) failed: " + ', '.join(k for k, v in checks.items() if not v))
            return 1
        return 0
