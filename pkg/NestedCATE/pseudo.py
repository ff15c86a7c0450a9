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

Pseudo-outcomes whose conditional mean given the effect modifiers is the CATE:

    aipw        S (A - e1) / (p e1 e0) (Y - g(X,A)) + g1(X) - g0(X)          target population, doubly robust
    ipw         S (A - e1) / (p e1 e0) Y                                      target population, weighting only
    trial_only  (A - e1) / (e1 e0) (Y - g(X,A)) + g1(X) - g0(X)               trial rows only, no participation weight
"""

import os
from dataclasses import dataclass

import numpy  as np
import pandas as pd

from .dataset  import CohortDataset
from .errors   import ConfigError, NumericError
from .nuisance import NuisancePredictions

VARIANTS = ('aipw', 'ipw', 'trial_only')

@dataclass(frozen=True, eq=False)
class PseudoOutcomes:
    values:     np.ndarray
    variant:    str
    provenance: NuisancePredictions
    rows:       np.ndarray                                                               # dataset row positions the values belong to

    def __len__(self):
        return len(self.values)

    def shifted(self, c):
        """same pseudo-outcomes plus a constant"""
        return PseudoOutcomes(values = self.values + c, variant = self.variant, provenance = self.provenance, rows = self.rows)

def _finite(values, variant):
    if not np.all(np.isfinite(values)):
        raise NumericError(variant + " pseudo-outcome: non-finite values (check probability truncation)")
    return values

def _weight(ds: CohortDataset, nuis: NuisancePredictions, with_participation=True):
    """S (A - e1) / (p e1 e0); zero on non-trial rows"""
    trial = ds.trial
    a     = np.where(trial, ds.a, 0.0)
    denom = nuis.e1_hat * nuis.e0_hat
    if with_participation:
        denom = nuis.p_hat * denom
    return np.where(trial, (a - nuis.e1_hat) / denom, 0.0)

def aipw_pseudo(ds: CohortDataset, nuis: NuisancePredictions):
    trial = ds.trial
    resid = np.where(trial, ds.y, 0.0) - np.where(trial, nuis.g_of_a, 0.0)                # Y - g(X,A), zero off the trial
    value = _weight(ds, nuis) * resid + (nuis.g1_hat - nuis.g0_hat)
    return PseudoOutcomes(values = _finite(value, 'aipw'), variant = 'aipw', provenance = nuis, rows = np.arange(ds.n_rows))

def ipw_pseudo(ds: CohortDataset, nuis: NuisancePredictions):
    y     = np.where(ds.trial, ds.y, 0.0)
    value = _weight(ds, nuis) * y
    return PseudoOutcomes(values = _finite(value, 'ipw'), variant = 'ipw', provenance = nuis, rows = np.arange(ds.n_rows))

def trial_pseudo(ds: CohortDataset, nuis: NuisancePredictions):
    rows  = np.flatnonzero(ds.trial)
    a, y  = ds.a[rows], ds.y[rows]
    e1    = nuis.e1_hat[rows]
    value = (a - e1) / (e1 * (1.0 - e1)) * (y - nuis.g_of_a[rows]) + nuis.g1_hat[rows] - nuis.g0_hat[rows]
    return PseudoOutcomes(values = _finite(value, 'trial_only'), variant = 'trial_only', provenance = nuis, rows = rows)

def compute_pseudo(ds: CohortDataset, nuis: NuisancePredictions, variant='aipw'):
    if variant == 'aipw':
        return aipw_pseudo(ds, nuis)
    if variant == 'ipw':
        return ipw_pseudo(ds, nuis)
    if variant == 'trial_only':
        return trial_pseudo(ds, nuis)
    raise ConfigError("unknown pseudo-outcome variant '" + str(variant) + "', use one of " + ', '.join(VARIANTS))

def dump_csv(ds: CohortDataset, pseudo: PseudoOutcomes, path):
    """debug dump: row_id, s, value, variant"""
    df = pd.DataFrame({ 'row_id':  ds.row_id[pseudo.rows],
                        's':       ds.s[pseudo.rows],
                        'value':   pseudo.values,
                        'variant': pseudo.variant })
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    df.to_csv(path, index=False, float_format='%.10g', lineterminator='\n')
    return path
