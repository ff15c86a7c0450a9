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

Second estimation step: regression of pseudo-outcomes on a basis m(x) of one effect
modifier, delta(x) = m(x)'beta, with HC0 sandwich covariance; or subgroup means for
a discrete modifier. Pseudo-outcomes are treated as fixed regressands.
"""

from dataclasses import dataclass
from typing      import Optional

import numpy        as np
import pandas       as pd
import scipy.linalg

from .basis   import BasisSpec, design_matrix
from .errors  import ConfigError, DataError, RankDeficiencyError
from .results import CateResult
from .streams import make_rng, STREAM_RESAMPLE

DEFAULT_SPEC = BasisSpec(kind = 'bspline', order = 3, n_knots = 1)                       # order 3 (quadratic), one interior knot at the median

def _values(pseudo):
    return np.asarray(getattr(pseudo, 'values', pseudo), dtype=float)

def wls(M, y, w=None):
    """weighted least squares through the Cholesky factor of M'WM; returns (beta, factor)"""
    Mw = M if w is None else M * w[:, None]
    try:
        factor = scipy.linalg.cho_factor(Mw.T @ M)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise RankDeficiencyError("second stage: design not positive definite")
    return scipy.linalg.cho_solve(factor, Mw.T @ y), factor

@dataclass(frozen=True, eq=False)
class CateFit:
    beta:          np.ndarray
    basis_spec:    BasisSpec                                                             # resolved
    covariance:    np.ndarray                                                            # HC0 sandwich
    n_used:        int
    residuals:     np.ndarray
    design:        np.ndarray                                                            # m(x_i) rows
    response:      np.ndarray
    modifiers:     np.ndarray
    stratum_label: Optional[str] = None

    def predict(self, x):
        M, _ = design_matrix(x, self.basis_spec)
        return M @ self.beta

def fit_cate(pseudo, modifiers, spec: BasisSpec = DEFAULT_SPEC, weights=None, stratum_label=None):
    """OLS of pseudo-outcomes on m(x); weights only serve bootstrap refits.
    covariance = (M'WM)^-1 M' diag(w^2 r^2) M (M'WM)^-1 (HC0; HC1 would scale by n/(n-d))"""
    y = _values(pseudo)
    x = np.asarray(modifiers, dtype=float)
    if x.ndim != 1:
        raise ConfigError("fit_cate: exactly one effect modifier supported for series regression")
    if len(x) != len(y):
        raise DataError("fit_cate: " + str(len(x)) + " modifier values for " + str(len(y)) + " pseudo-outcomes")
    if len(y) == 0:
        raise DataError("fit_cate: no observations")
    w = None if weights is None else np.asarray(weights, dtype=float)
    if w is not None and (len(w) != len(y) or np.any(w < 0)):
        raise ConfigError("fit_cate: weights must be >= 0, one per observation")
    if not spec.resolved and np.ptp(x) == 0:
        raise RankDeficiencyError("fit_cate: constant effect modifier, " + spec.kind + " basis is rank deficient")
    spec  = spec.resolve(x)
    M, _  = design_matrix(x, spec)
    used  = np.ones(len(y), dtype=bool) if w is None else w > 0
    if int(used.sum()) < M.shape[1] or np.linalg.matrix_rank(M[used]) < M.shape[1]:
        raise RankDeficiencyError("fit_cate: design rank deficient (" + str(M.shape[1]) + " basis columns, " + str(int(used.sum())) + " observations)")
    beta, factor = wls(M, y, w)
    resid = y - M @ beta
    score = M * (resid if w is None else w * resid)[:, None]
    bread = scipy.linalg.cho_solve(factor, np.eye(M.shape[1]))
    cov   = bread @ (score.T @ score) @ bread
    cov   = 0.5 * (cov + cov.T)
    return CateFit(beta = beta, basis_spec = spec, covariance = cov, n_used = int(used.sum()), residuals = resid,
                   design = M, response = y, modifiers = x, stratum_label = stratum_label)

class GridEvaluation(CateResult):
    """delta(x) and its standard error over a grid"""

    def __init__(self, grid, estimate, se, label=None):
        super().__init__()
        self.grid      = np.asarray(grid, dtype=float)
        self.estimate  = np.asarray(estimate, dtype=float)
        self.se        = np.asarray(se, dtype=float)
        self.label     = label
        self.DataTable = pd.DataFrame({ 'grid': self.grid, 'estimate': self.estimate, 'se': self.se })
        self.csvName   = 'grid.csv' if label is None else 'grid_' + label + '.csv'

def _check_grid(grid):
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ConfigError("evaluation grid is empty")
    if np.any(np.diff(grid) <= 0):
        raise ConfigError("evaluation grid must be strictly increasing")
    return grid

def evaluate_grid(fit: CateFit, grid, se=None):
    """estimate = m(x)'beta, se = sqrt(m(x)' Cov m(x)); 'se' overrides the sandwich standard errors"""
    grid       = _check_grid(grid)
    M, clamped = design_matrix(grid, fit.basis_spec)
    if clamped > 0:
        print("Warning - evaluate_grid: " + str(clamped) + " grid points outside the basis boundary " + str(fit.basis_spec.boundary_knots) + " clamped")
    estimate = M @ fit.beta
    if se is None:
        se = np.sqrt(np.maximum(np.einsum('ij,jk,ik->i', M, fit.covariance, M), 0.0))
    return GridEvaluation(grid, estimate, se, fit.stratum_label)

def make_grid(lo, hi, step=None, points=100):
    """evenly spaced grid from lo to hi, either 'points' points or increments of 'step' (hi included when reached)"""
    lo, hi = float(lo), float(hi)
    if step is not None:
        step = float(step)
        if step <= 0:
            raise ConfigError("make_grid: step must be > 0")
        if not lo < hi:
            raise ConfigError("make_grid: grid min must be below grid max")
        n = int(np.floor((hi - lo) / step + 1e-9))
        return lo + step * np.arange(n + 1)
    points = int(points)
    if points < 1:
        raise ConfigError("make_grid: need at least one grid point")
    if points == 1:
        if lo > hi:
            raise ConfigError("make_grid: grid min must not exceed grid max")
        return np.array([lo])
    if not lo < hi:
        raise ConfigError("make_grid: grid min must be below grid max")
    return np.linspace(lo, hi, points)

def check_grid_support(trial_modifier, grid, minimum=20, verbose=0):
    """warn when fewer than 'minimum' trial observations lie in the outer 10% of the grid range at either end"""
    grid  = np.asarray(grid, dtype=float)
    x     = np.asarray(trial_modifier, dtype=float)
    lo, hi = grid[0], grid[-1]
    width  = 0.1 * (hi - lo)
    sparse = []
    for name, inside in (('lower', x <= lo + width), ('upper', x >= hi - width)):
        count = int(inside.sum())
        if count < minimum:
            sparse.append(name)
            print("Warning - check_grid_support: only " + str(count) + " trial observations near the " + name + " grid bound (" +
                  ('%g' % (lo if name == 'lower' else hi)) + "), estimates there rest on little data")
    return sparse

class SubgroupTable(CateResult):
    """subgroup CATE for a discrete effect modifier"""

    def __init__(self, levels, estimate, se, n, label=None):
        super().__init__()
        self.levels    = np.asarray(levels, dtype=float)
        self.estimate  = np.asarray(estimate, dtype=float)
        self.se        = np.asarray(se, dtype=float)
        self.n         = np.asarray(n, dtype=int)
        self.DataTable = pd.DataFrame({ 'level': self.levels, 'estimate': self.estimate, 'se': self.se, 'n': self.n })
        self.csvName   = 'subgroup.csv' if label is None else 'subgroup_' + label + '.csv'

def subgroup_cate(pseudo, modifier, label=None):
    """per level: mean of pseudo-outcomes, sd / sqrt(n) (sd with n-1 denominator)"""
    y = _values(pseudo)
    x = np.asarray(modifier, dtype=float)
    if len(x) != len(y):
        raise DataError("subgroup_cate: " + str(len(x)) + " modifier values for " + str(len(y)) + " pseudo-outcomes")
    levels = np.unique(x)
    if levels.size == 0:
        raise DataError("subgroup_cate: no observations")
    est, se, n = [], [], []
    for level in levels:
        v = y[x == level]
        if len(v) < 2:
            raise DataError("subgroup_cate: level " + ('%g' % level) + " has a single observation")
        est.append(np.mean(v))
        se.append(np.std(v, ddof=1) / np.sqrt(len(v)))
        n.append(len(v))
    return SubgroupTable(levels, est, se, n, label)

def bootstrap_se(fit: CateFit, grid, B=500, seed=0):
    """nonparametric bootstrap of the second stage with pseudo-outcomes fixed: rows resampled with replacement
    (as multinomial counts), basis kept as fitted; returns the standard deviation of grid estimates"""
    grid    = _check_grid(grid)
    Mg, _   = design_matrix(grid, fit.basis_spec)
    n       = len(fit.response)
    draws   = []
    skipped = 0
    for b in range(int(B)):
        rng    = make_rng(seed, STREAM_RESAMPLE, 0, b)
        counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(float)
        try:
            beta, _ = wls(fit.design, fit.response, counts)
        except RankDeficiencyError:
            skipped += 1
            continue
        draws.append(Mg @ beta)
    if len(draws) < 2:
        raise RankDeficiencyError("bootstrap_se: fewer than two usable bootstrap replicates")
    if skipped > 0:
        print("Warning - bootstrap_se: " + str(skipped) + " of " + str(int(B)) + " resamples rank deficient, skipped")
    return np.std(np.array(draws), axis=0, ddof=1)
