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

Pointwise confidence intervals and uniform confidence bands for the CATE function.

The uniform band uses the multiplier bootstrap: replicate b draws n independent Exp(1)
weights from stream (seed, STREAM_BOOTSTRAP, b), refits the weighted second stage only
(pseudo-outcomes stay fixed), and records t_max(b) = max over grid |delta_b(x) - delta(x)| / se(x)
with the se of the original fit. The critical value C is the ceil((1-alpha) B)-th smallest t_max.
"""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy  as np
import pandas as pd
from scipy.special import ndtri

from .basis        import BasisSpec, design_matrix
from .errors       import CateError, ConfigError, NumericError, RankDeficiencyError
from .results      import CateResult
from .second_stage import CateFit, DEFAULT_SPEC, evaluate_grid, fit_cate, wls
from .streams      import make_rng, STREAM_BOOTSTRAP, STREAM_RESAMPLE

MIN_REPLICATES  = 100
WARN_REPLICATES = 1000
MAX_REDRAW_RATE = 0.01
MAX_ATTEMPTS    = 20                                                                     # redraws of a single replicate

def _check_alpha(alpha):
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must be in (0,1), got " + ('%g' % alpha))
    return alpha

def normal_quantile(p):
    return float(ndtri(p))

def pointwise_interval(ge, alpha=0.05):
    """estimate -/+ z(1-alpha/2) se; returns (low, high)"""
    z = normal_quantile(1.0 - _check_alpha(alpha) / 2.0)
    return ge.estimate - z * ge.se, ge.estimate + z * ge.se

def empirical_quantile(values, q):
    """ceil(qB)-th smallest of B values (conservative order-statistic convention)"""
    values = np.sort(np.asarray(values, dtype=float).ravel())
    if values.size == 0:
        raise ConfigError("empirical_quantile: no values")
    if not 0.0 < q < 1.0:
        raise ConfigError("empirical_quantile: q must be in (0,1)")
    k = int(math.ceil(q * values.size - 1e-9))
    return float(values[min(max(k, 1), values.size) - 1])

def multiplier_weights(seed, b, n, attempt=0):
    """Exp(1) weights of replicate b (attempt > 0: redraw after a rank deficient replicate)"""
    ids = (b,) if attempt == 0 else (b, attempt)
    return make_rng(seed, STREAM_BOOTSTRAP, *ids).exponential(1.0, int(n))

class UniformBand(CateResult):
    """grid, estimate, se, pointwise limits and uniform band limits"""

    def __init__(self, grid, estimate, se, alpha, critical_value, replicates, seed, t_max=None, redrawn=0, label=None):
        super().__init__()
        self.grid           = np.asarray(grid, dtype=float)
        self.estimate       = np.asarray(estimate, dtype=float)
        self.se             = np.asarray(se, dtype=float)
        self.alpha          = float(alpha)
        self.z              = normal_quantile(1.0 - self.alpha / 2.0)
        self.pointwise_low  = self.estimate - self.z * self.se
        self.pointwise_high = self.estimate + self.z * self.se
        self.critical_value = float(critical_value)
        self.band_low       = self.estimate - self.critical_value * self.se
        self.band_high      = self.estimate + self.critical_value * self.se
        self.replicates     = int(replicates)
        self.seed           = int(seed)
        self.t_max          = None if t_max is None else np.asarray(t_max, dtype=float)
        self.redrawn        = int(redrawn)
        self.label          = label
        self.DataTable      = pd.DataFrame({ 'grid':      self.grid,
                                             'estimate':  self.estimate,
                                             'se':        self.se,
                                             'pw_low':    self.pointwise_low,
                                             'pw_high':   self.pointwise_high,
                                             'band_low':  self.band_low,
                                             'band_high': self.band_high })
        self.csvName        = 'band.csv' if label is None else 'band_' + label + '.csv'

    def covers(self, truth):
        """(whole function inside band, per-point inside pointwise interval)"""
        truth = np.asarray(truth, dtype=float)
        uniform   = bool(np.all((self.band_low <= truth) & (truth <= self.band_high)))
        pointwise = (self.pointwise_low <= truth) & (truth <= self.pointwise_high)
        return uniform, pointwise

    def summary(self):
        return { 'alpha':          self.alpha,
                 'replicates':     self.replicates,
                 'seed':           self.seed,
                 'critical_value': self.critical_value,
                 'z':              self.z,
                 'redrawn':        self.redrawn }

def _replicate(fit: CateFit, Mg, estimate, se, seed, b, sampler):
    n = len(fit.response)
    for attempt in range(MAX_ATTEMPTS):
        w = np.asarray(sampler(seed, b, n, attempt), dtype=float)
        try:
            beta, _ = wls(fit.design, fit.response, w)
        except RankDeficiencyError:
            continue
        return float(np.max(np.abs(Mg @ beta - estimate) / se)), attempt
    raise NumericError("multiplier bootstrap: replicate " + str(b) + " rank deficient after " + str(MAX_ATTEMPTS) + " draws")

def band_from_fit(fit: CateFit, grid, alpha=0.05, B=200, seed=0, se=None, workers=1, weight_sampler=None, verbose=0):
    """uniform band for an existing second-stage fit; 'se' overrides the sandwich standard errors
    both in the band and in the t statistics. weight_sampler(seed, b, n, attempt) replaces the Exp(1) draws"""
    alpha = _check_alpha(alpha)
    B     = int(B)
    if B < MIN_REPLICATES:
        raise ConfigError("multiplier bootstrap needs B >= " + str(MIN_REPLICATES) + " replicates, got " + str(B))
    if B < WARN_REPLICATES:
        print("Warning - multiplier_band: B = " + str(B) + " replicates, critical value is noisy below " + str(WARN_REPLICATES))
    ge = evaluate_grid(fit, grid, se)
    if np.any(~(ge.se > 0)):
        raise NumericError("multiplier bootstrap: standard error is 0 at grid point(s) " +
                           ', '.join('%g' % g for g in ge.grid[~(ge.se > 0)][:5]))
    Mg, _   = design_matrix(ge.grid, fit.basis_spec)
    sampler = weight_sampler or multiplier_weights

    def _one(b):
        return _replicate(fit, Mg, ge.estimate, ge.se, seed, b, sampler)

    if workers > 1:
        with ThreadPoolExecutor(max_workers = workers) as pool:
            results = list(pool.map(_one, range(B)))
    else:
        results = [_one(b) for b in range(B)]
    t_max   = np.array([r[0] for r in results])
    redrawn = int(sum(1 for r in results if r[1] > 0))
    if redrawn > MAX_REDRAW_RATE * B:
        raise NumericError("multiplier bootstrap: " + str(redrawn) + " of " + str(B) + " replicates rank deficient and redrawn")
    if redrawn > 0:
        print("Warning - multiplier_band: " + str(redrawn) + " rank deficient replicates redrawn")

    C    = empirical_quantile(t_max, 1.0 - alpha)
    band = UniformBand(ge.grid, ge.estimate, ge.se, alpha, C, B, seed, t_max = t_max, redrawn = redrawn, label = fit.stratum_label)
    if C < band.z:
        print("Warning - multiplier_band: critical value " + ('%.4f' % C) + " below the pointwise z " + ('%.4f' % band.z) +
              ", band narrower than pointwise intervals")
    if verbose > 0:
        print("Message - multiplier_band: C(1-alpha) = " + ('%.4f' % C) + " from " + str(B) + " replicates (z = " + ('%.4f' % band.z) + ")")
    return band

def multiplier_band(pseudo, modifiers, spec: BasisSpec = DEFAULT_SPEC, grid=None, alpha=0.05, B=200, seed=0,
                    workers=1, weight_sampler=None, stratum_label=None, verbose=0):
    """fit the second stage and build its uniform band"""
    if grid is None:
        raise ConfigError("multiplier_band: no grid")
    fit = fit_cate(pseudo, modifiers, spec, stratum_label = stratum_label)
    return band_from_fit(fit, grid, alpha, B, seed, workers = workers, weight_sampler = weight_sampler, verbose = verbose)

def pipeline_bootstrap_se(ds, grid, estimate_fn, B=200, seed=0, verbose=0):
    """nonparametric bootstrap of the whole pipeline: rows resampled with replacement, estimate_fn(dataset) -> grid estimates
    re-runs both estimation steps. Resamples on which a fit fails are redrawn (at most B extra draws)"""
    grid    = np.asarray(grid, dtype=float)
    draws   = []
    failed  = 0
    attempt = 0
    while len(draws) < int(B):
        if attempt >= 2 * int(B):
            raise NumericError("pipeline bootstrap: " + str(failed) + " of " + str(attempt) + " resamples failed")
        rng   = make_rng(seed, STREAM_RESAMPLE, 1, attempt)
        index = rng.integers(0, ds.n_rows, ds.n_rows)
        attempt += 1
        try:
            est = np.asarray(estimate_fn(ds.take(index)), dtype=float)
        except CateError as e:
            failed += 1
            if verbose > 1:
                print("Message - pipeline_bootstrap_se: resample skipped: " + str(e))
            continue
        draws.append(est)
    if failed > 0:
        print("Warning - pipeline_bootstrap_se: " + str(failed) + " resamples failed and were redrawn")
    se = np.std(np.array(draws), axis=0, ddof=1)
    if se.shape != grid.shape:
        raise ConfigError("pipeline bootstrap: estimate_fn returned " + str(se.shape) + " values for a grid of " + str(grid.shape))
    return se
