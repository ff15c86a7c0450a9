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

Nested trial data: a cohort sampled from the target population, with a randomized
trial embedded in it. Covariates are observed on every row, treatment and outcome
only on trial rows (s=1). Non-trial rows carry ABSENT (NaN) for a and y, never 0.
"""

from dataclasses import dataclass, field, replace
from typing      import Optional

import numpy  as np
import pandas as pd

from .errors  import ConfigError, DataError
from .streams import make_rng, STREAM_FOLDS

ABSENT = np.nan                                                                          # marker for a, y on non-trial rows

@dataclass(frozen=True)
class CohortSchema:
    """Column roles of a cohort file, usually read from config section [Schema]"""
    trial:          str            = 's'
    treatment:      str            = 'a'
    outcome:        str            = 'y'
    modifiers:      tuple          = ()                                                  # key effect modifiers (X tilde), typically one or two columns
    covariates:     Optional[tuple] = None                                               # None: every column without a role
    stratify:       Optional[str]  = None                                                # stratification column, analysed separately in both steps
    outcome_family: str            = 'auto'                                              # auto, binary or continuous

    @classmethod
    def from_config(cls, section):
        """build schema from a configparser section"""
        def _list(key):
            raw = section.get(key, None)
            if raw is None: return None
            return tuple(c.strip() for c in raw.split(',') if c.strip() != '')

        modifiers = _list('modifier') or _list('modifiers') or ()
        return cls(trial          = section.get('trial', 's'),
                   treatment      = section.get('treatment', 'a'),
                   outcome        = section.get('outcome', 'y'),
                   modifiers      = modifiers,
                   covariates     = _list('covariates'),
                   stratify       = section.get('stratify', None) or None,
                   outcome_family = section.get('outcome_family', 'auto').lower())

@dataclass(frozen=True, eq=False)
class CohortDataset:
    """Validated nested trial data; immutable after construction"""
    covariates:         np.ndarray                                                       # n_rows x d, float
    columns:            tuple                                                            # covariate column names
    modifiers:          tuple                                                            # subset of columns
    s:                  np.ndarray                                                       # int 0/1
    a:                  np.ndarray                                                       # float 0/1, ABSENT where s=0
    y:                  np.ndarray                                                       # float, ABSENT where s=0
    continuous_outcome: bool         = False
    row_id:             Optional[np.ndarray] = None                                      # row position in the source file
    names:              tuple        = ('s', 'a', 'y')                                   # column names used for s, a, y when written
    report:             dict         = field(default_factory=dict, compare=False)        # load report (dropped rows etc.)

    def __post_init__(self):
        covariates = np.array(self.covariates, dtype=float)
        if covariates.ndim != 2 or covariates.shape[1] != len(self.columns):
            raise DataError("CohortDataset: covariate matrix does not match column names")
        if len(set(self.columns)) != len(self.columns):
            raise DataError("CohortDataset: duplicated covariate column names")
        missing = [m for m in self.modifiers if m not in self.columns]
        if missing:
            raise DataError("CohortDataset: effect modifier(s) not among covariates: " + ', '.join(missing))
        n = covariates.shape[0]
        s = np.array(self.s, dtype=float)
        a = np.array(self.a, dtype=float)
        y = np.array(self.y, dtype=float)
        if len(s) != n or len(a) != n or len(y) != n:
            raise DataError("CohortDataset: s, a, y and covariates differ in length")
        if not np.all((s == 0) | (s == 1)):
            raise DataError("CohortDataset: s value outside {0,1}")
        s = s.astype(int)
        if np.isnan(covariates).any():
            raise DataError("CohortDataset: missing covariate values")
        trial = s == 1
        if np.any(~np.isnan(y[~trial])):
            raise DataError("CohortDataset: outcome on non-trial row")
        if np.any(~np.isnan(a[~trial])):
            raise DataError("CohortDataset: treatment on non-trial row")
        if np.any(np.isnan(a[trial])) or np.any(np.isnan(y[trial])):
            raise DataError("CohortDataset: treatment or outcome missing on trial row")
        if not np.all((a[trial] == 0) | (a[trial] == 1)):
            raise DataError("CohortDataset: treatment value outside {0,1}")
        if not self.continuous_outcome and not np.all((y[trial] == 0) | (y[trial] == 1)):
            raise DataError("CohortDataset: binary outcome outside {0,1}")
        row_id = np.arange(n) if self.row_id is None else np.array(self.row_id, dtype=int)
        for arr in (covariates, s, a, y, row_id):
            arr.setflags(write=False)
        object.__setattr__(self, 'covariates', covariates)
        object.__setattr__(self, 's', s)
        object.__setattr__(self, 'a', a)
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'row_id', row_id)

    @property
    def n_rows(self):
        return self.covariates.shape[0]

    @property
    def trial(self):
        """boolean mask of trial rows"""
        return self.s == 1

    def column(self, name):
        """covariate column as a (read-only) vector"""
        if name not in self.columns:
            raise ConfigError("column '" + name + "' not among covariates " + str(list(self.columns)))
        return self.covariates[:, self.columns.index(name)]

    def counts(self):
        """row counts per cell, for manifests and summaries"""
        trial = self.trial
        return { 'n':        int(self.n_rows),
                 'trial':    int(trial.sum()),
                 'nontrial': int((~trial).sum()),
                 'arm1':     int((trial & (self.a == 1)).sum()),
                 'arm0':     int((trial & (self.a == 0)).sum()) }

    def take(self, index):
        """new dataset made of rows 'index' (integer positions, repeats allowed, or boolean mask)"""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return replace(self, covariates = self.covariates[index], s = self.s[index], a = self.a[index],
                       y = self.y[index], row_id = self.row_id[index], report = {})

    def subset(self, mask):
        return self.take(np.asarray(mask, dtype=bool))

    def to_frame(self):
        """dataset as a DataFrame in file layout: covariates, then s, a, y"""
        df = pd.DataFrame(self.covariates, columns=list(self.columns))
        s_name, a_name, y_name = self.names
        df[s_name] = self.s
        df[a_name] = self.a
        df[y_name] = self.y
        return df

    def write_csv(self, path):
        """write in the standard tabular format; full precision so that load_cohort() gives back an identical dataset"""
        self.to_frame().to_csv(path, index=False, na_rep='', float_format='%.17g', lineterminator='\n')

def _numeric(values, name):
    """text to float with correctly rounded parsing, so that %.17g output reads back exactly"""
    try:
        return values.astype(float).to_numpy()
    except (ValueError, TypeError):
        raise DataError("load_cohort: column '" + name + "' is not numeric")

def load_cohort(source, schema: CohortSchema, verbose=0):
    """Load and validate a comma separated cohort file (path or text stream, header row, blank = missing).
    Rows with missing covariates, and trial rows with missing treatment or outcome, are dropped
    (complete-case analysis) and counted in dataset.report"""

    raw = pd.read_csv(source, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True, encoding='utf-8')
    if raw.shape[0] < 1:
        raise DataError("load_cohort: no header row")
    header = [str(h).strip() for h in raw.iloc[0]]
    dups   = sorted(set(h for h in header if header.count(h) > 1))
    if dups:
        raise DataError("load_cohort: duplicated column names: " + ', '.join(dups))
    body         = raw.iloc[1:].reset_index(drop=True)
    body.columns = header
    body         = body.apply(lambda c: c.str.strip()).replace('', np.nan)

    roles = [schema.trial, schema.treatment, schema.outcome]
    for col in roles + list(schema.modifiers) + ([schema.stratify] if schema.stratify else []):
        if col not in header:
            raise DataError("load_cohort: missing mandatory column '" + col + "'")
    if len(schema.modifiers) == 0:
        raise ConfigError("load_cohort: schema names no effect modifier")
    if schema.covariates is None:
        covCols = [h for h in header if h not in roles]
    else:
        covCols = list(schema.covariates)
        for col in covCols:
            if col not in header:
                raise DataError("load_cohort: missing covariate column '" + col + "'")
    for col in list(schema.modifiers) + ([schema.stratify] if schema.stratify else []):
        if col not in covCols:
            covCols.append(col)
    if len(set(covCols)) != len(covCols):
        raise ConfigError("load_cohort: covariate list names a column twice")

    s = _numeric(body[schema.trial], schema.trial)
    if np.any(np.isnan(s)) or not np.all((s == 0) | (s == 1)):
        raise DataError("load_cohort: s value outside {0,1} in column '" + schema.trial + "'")
    a = _numeric(body[schema.treatment], schema.treatment)
    y = _numeric(body[schema.outcome],   schema.outcome)
    nontrial = s == 0
    if np.any(~np.isnan(y[nontrial])):
        raise DataError("load_cohort: outcome on non-trial row (row " + str(int(np.flatnonzero(nontrial & ~np.isnan(y))[0]) + 1) + ")")
    if np.any(~np.isnan(a[nontrial])):
        raise DataError("load_cohort: treatment on non-trial row (row " + str(int(np.flatnonzero(nontrial & ~np.isnan(a))[0]) + 1) + ")")

    X = np.column_stack([_numeric(body[c], c) for c in covCols]) if covCols else np.zeros((len(body), 0))
    missCov   = np.isnan(X).any(axis=1)
    missTrial = (s == 1) & (np.isnan(a) | np.isnan(y))
    keep      = ~(missCov | missTrial)
    report    = { 'rows_read':            int(len(body)),
                  'dropped_covariates':   int(missCov.sum()),
                  'dropped_trial_fields': int((missTrial & ~missCov).sum()) }
    dropped   = int((~keep).sum())
    if dropped > 0:
        print("Warning - load_cohort: " + str(dropped) + " incomplete rows dropped (" + str(report['dropped_covariates']) +
              " missing covariates, " + str(report['dropped_trial_fields']) + " trial rows missing treatment/outcome)")

    s, a, y, X = s[keep].astype(int), a[keep], y[keep], X[keep]
    if len(s) == 0 or np.all(s == 0) or np.all(s == 1):
        raise DataError("load_cohort: need both trial and non-trial rows, estimation impossible")
    if not np.all((a[s == 1] == 0) | (a[s == 1] == 1)):
        raise DataError("load_cohort: treatment value outside {0,1} in column '" + schema.treatment + "'")

    binary = bool(np.all((y[s == 1] == 0) | (y[s == 1] == 1)))
    family = schema.outcome_family
    if family == 'auto':
        continuous = not binary
    elif family in ('binary', 'bernoulli'):
        if not binary:
            raise DataError("load_cohort: outcome declared binary but has values outside {0,1}")
        continuous = False
    elif family in ('continuous', 'gaussian'):
        continuous = True
    else:
        raise ConfigError("load_cohort: unknown outcome_family '" + family + "'")

    ds = CohortDataset(covariates = X, columns = tuple(covCols), modifiers = tuple(schema.modifiers),
                       s = s, a = a, y = y, continuous_outcome = continuous,
                       row_id = np.flatnonzero(keep), names = (schema.trial, schema.treatment, schema.outcome),
                       report = report)
    if verbose > 0:
        c = ds.counts()
        print("Message - load_cohort: " + str(c['n']) + " rows, " + str(c['trial']) + " randomized (" + str(c['arm1']) + " / " +
              str(c['arm0']) + " by arm), " + str(c['nontrial']) + " non-randomized; outcome " + ('continuous' if continuous else 'binary'))
    return ds

def split_strata(ds: CohortDataset, column):
    """split dataset by the levels of 'column'; returns list of (label, dataset), levels sorted"""
    if column is None:
        return [('all', ds)]
    values = ds.column(column)
    strata = []
    for level in np.unique(values):
        label = column + '=' + ('%g' % level)
        strata.append((label, ds.subset(values == level)))
    return strata

@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_id: np.ndarray                                                                  # 1..k per row
    seed:    int
    k:       int

    def mask(self, fold):
        return self.fold_id == fold

def assign_folds(ds: CohortDataset, k=2, seed=0):
    """Random split into k folds, stratified by cells (s=1,a=1), (s=1,a=0), (s=0).
    Within each cell the fold sizes differ by at most one; the round-robin start carries over
    between cells so that overall fold sizes stay balanced as well."""
    k = int(k)
    if k < 2:
        raise ConfigError("assign_folds: k must be >= 2, got " + str(k))
    trial = ds.trial
    cells = [trial & (ds.a == 1), trial & (ds.a == 0), ~trial]
    for name, cell in zip(('treated', 'control'), cells[:2]):
        if cell.sum() < k:
            raise DataError("assign_folds: k=" + str(k) + " exceeds the " + str(int(cell.sum())) + " trial rows in the " + name + " arm")
    rng     = make_rng(seed, STREAM_FOLDS)
    fold_id = np.zeros(ds.n_rows, dtype=int)
    start   = 0
    for cell in cells:
        rows          = np.flatnonzero(cell)
        rows          = rows[rng.permutation(len(rows))]
        fold_id[rows] = (start + np.arange(len(rows))) % k + 1
        start         = (start + len(rows)) % k
    return FoldAssignment(fold_id = fold_id, seed = int(seed), k = k)
