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

Nuisance models of the first estimation step:
    p(X)   = Pr[S=1 | X]                   participation, fit on all rows
    e1(X)  = Pr[A=1 | X, S=1]              treatment, fit on trial rows
    g_a(X) = E[Y | X, S=1, A=a]            outcome, fit separately per trial arm
as logistic (IRLS) or linear (least squares) regressions on main effects, with
optional B-spline expansion of selected covariates. Either in-sample or cross-fitted.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses        import dataclass, field
from typing             import Optional

import numpy        as np
import scipy.linalg
import scipy.optimize
from scipy.special  import expit

from .basis   import BasisSpec, design_matrix
from .dataset import CohortDataset, FoldAssignment
from .errors  import CateError, ConfigError, DataError, RankDeficiencyError, SeparationError, ConvergenceError

EPSILON     = 1e-3                                                                       # probability truncation to [EPSILON, 1-EPSILON]
GRAD_TOL    = 1e-8                                                                       # IRLS gradient tolerance (max-norm of score)
MAX_ITER    = 100
ETA_SEPARATE = 25.0                                                                      # |linear predictor| beyond which fitted probabilities count as 0/1

#--------------------------------------------------------------------------------------- design specification
@dataclass(frozen=True)
class DesignSpec:
    """Resolved design of one nuisance model: global intercept plus one block per covariate,
    either the raw value or a B-spline expansion (knots fixed on the training rows)"""
    columns: tuple                                                                       # covariate names
    bases:   tuple                                                                       # resolved BasisSpec (without intercept) or None, per column

    @property
    def width(self):
        return 1 + sum(1 if b is None else b.width for b in self.bases)

    def matrix(self, ds: CohortDataset, rows=None):
        index  = np.arange(ds.n_rows) if rows is None else np.arange(ds.n_rows)[rows]
        blocks = [np.ones((len(index), 1))]
        for col, basis in zip(self.columns, self.bases):
            x = ds.column(col)[index]
            if basis is None:
                blocks.append(x[:, None])
            else:
                blocks.append(design_matrix(x, basis)[0])
        return np.hstack(blocks)

    def describe(self):
        parts = []
        for col, basis in zip(self.columns, self.bases):
            parts.append(col if basis is None else 'bs(' + col + ', knots=' + ','.join('%g' % k for k in basis.interior_knots) + ')')
        return '1 + ' + ' + '.join(parts) if parts else '1'

@dataclass(frozen=True)
class NuisanceSpec:
    """Specification of one nuisance model, from config sections [Participation], [Treatment], [Outcome]

    covariates      None = all covariates of the dataset; () = intercept only
    splines         covariates expanded by a B-spline of 'spline_order' with 'spline_knots' interior knots at quantiles
    family          logistic, linear or auto (outcome: logistic for binary, linear for continuous outcomes)"""
    covariates:   Optional[tuple] = None
    splines:      tuple           = ()
    spline_order: int             = 3
    spline_knots: int             = 1
    family:       str             = 'logistic'

    def __post_init__(self):
        if self.family not in ('logistic', 'linear', 'auto'):
            raise ConfigError("NuisanceSpec: unknown family '" + str(self.family) + "'")
        if self.covariates is not None:
            missing = [c for c in self.splines if c not in self.covariates]
            if missing:
                raise ConfigError("NuisanceSpec: spline covariate(s) not in model: " + ', '.join(missing))

    @classmethod
    def from_config(cls, section, family='logistic'):
        def _list(key):
            raw = section.get(key, None)
            if raw is None: return None
            if raw.strip().lower() in ('', 'none', '1'): return ()
            return tuple(c.strip() for c in raw.split(',') if c.strip() != '')

        if section is None:
            return cls(family = family)
        return cls(covariates   = _list('covariates'),
                   splines      = _list('splines') or (),
                   spline_order = section.getint('spline_order', 3),
                   spline_knots = section.getint('spline_knots', 1),
                   family       = section.get('family', family).lower())

    def resolve(self, ds: CohortDataset, rows, exclude=()):
        """fix the design on training rows 'rows'; columns in 'exclude' (e.g. the stratification column) are skipped
        when the covariate list is taken from the dataset"""
        if self.covariates is None:
            columns = tuple(c for c in ds.columns if c not in exclude)
        else:
            columns = self.covariates
            for col in columns:
                if col not in ds.columns:
                    raise ConfigError("NuisanceSpec: covariate '" + col + "' not in dataset")
        bases = []
        for col in columns:
            if col in self.splines:
                spec = BasisSpec(kind = 'bspline', order = self.spline_order, n_knots = self.spline_knots, include_intercept = False)
                bases.append(spec.resolve(ds.column(col)[rows]))
            else:
                bases.append(None)
        return DesignSpec(columns = columns, bases = tuple(bases))

#--------------------------------------------------------------------------------------- GLM fitting
@dataclass(frozen=True, eq=False)
class GlmFit:
    coefficients: np.ndarray
    family:       str
    converged:    bool
    iterations:   int
    deviance:     float
    n:            int
    gradient:     float = 0.0                                                            # max-norm of the score at the returned coefficients

    def predict(self, design):
        eta = np.asarray(design, dtype=float) @ self.coefficients
        return expit(eta) if self.family == 'logistic' else eta

    def diagnostics(self):
        return { 'family':     self.family,
                 'converged':  bool(self.converged),
                 'iterations': int(self.iterations),
                 'deviance':   float(self.deviance),
                 'n':          int(self.n),
                 'gradient':   float(self.gradient) }

def _logistic_deviance(eta, y, w):
    # -2 log-likelihood, evaluated through log(1+exp(.)) to stay finite for large |eta|
    return float(2.0 * np.sum(w * (y * np.logaddexp(0.0, -eta) + (1.0 - y) * np.logaddexp(0.0, eta))))

def separating_direction(design, response):
    """Direction b with (2y-1) x'b >= 0 for every row and > 0 for some, or None when the classes overlap.
    Such a b exists exactly when the logistic likelihood has no finite maximum (complete or quasi-complete separation)."""
    X     = np.asarray(design, dtype=float)
    scale = np.max(np.abs(X), axis=0)
    scale[scale == 0] = 1.0
    Z     = (2.0 * np.asarray(response, dtype=float) - 1.0)[:, None] * (X / scale)
    res   = scipy.optimize.linprog(-Z.sum(axis=0), A_ub=-Z, b_ub=np.zeros(len(Z)), bounds=[(-1.0, 1.0)] * X.shape[1], method='highs')
    if res.status != 0:
        return None
    margin = Z @ res.x
    if margin.max() > 1e-6 and margin.min() > -1e-7:                                      # HiGHS feasibility tolerance
        return res.x / scale
    return None

def fit_glm(design, response, family='logistic', weights=None):
    """Fit a logistic (IRLS from zero, step-halving on deviance increase) or linear (least squares) regression.
    Raises RankDeficiencyError, SeparationError or ConvergenceError"""
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ConfigError("fit_glm: design and response do not match")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    if len(w) != len(y) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError("fit_glm: weights must be finite and >= 0")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("fit_glm: non-finite design or response")
    used = w > 0
    n, p = int(used.sum()), X.shape[1]
    if n < p or np.linalg.matrix_rank(X[used]) < p:
        raise RankDeficiencyError("fit_glm: design is rank deficient (" + str(p) + " columns, " + str(n) + " rows)")

    if family == 'linear':
        sw         = np.sqrt(w)
        beta, *_   = scipy.linalg.lstsq(X * sw[:, None], y * sw)
        resid      = y - X @ beta
        return GlmFit(coefficients = beta, family = 'linear', converged = True, iterations = 1,
                      deviance = float(np.sum(w * resid**2)), n = n,
                      gradient = float(np.max(np.abs(X.T @ (w * resid)))))
    if family != 'logistic':
        raise ConfigError("fit_glm: unknown family '" + str(family) + "'")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("fit_glm: logistic response outside {0,1}")

    checked = []                                                                         # separation test runs at most once

    def separated():
        if not checked:
            checked.append(separating_direction(X[used], y[used]) is not None)
        return checked[0]

    def separation_error(it, eta, beta):
        return SeparationError("fit_glm: separation detected after " + str(it) + " iterations (max |eta| = " +
                               ('%.1f' % np.max(np.abs(eta))) + ", coefficient norm " + ('%.1f' % np.linalg.norm(beta)) +
                               " diverging, fitted probabilities at 0/1)")

    beta    = np.zeros(p)
    eta     = X @ beta
    dev     = _logistic_deviance(eta, y, w)
    gradMax = np.inf
    growing = 0
    it      = 0
    for it in range(1, MAX_ITER + 1):
        mu      = expit(eta)
        grad    = X.T @ (w * (y - mu))
        gradMax = float(np.max(np.abs(grad)))
        if gradMax <= GRAD_TOL:
            it -= 1
            break
        H = X.T @ ((w * mu * (1.0 - mu))[:, None] * X)
        try:
            step = scipy.linalg.solve(H, grad, assume_a='pos')
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            if separated():
                raise separation_error(it, eta, beta)
            raise RankDeficiencyError("fit_glm: singular information matrix")
        t = 1.0
        while True:
            newBeta = beta + t * step
            newEta  = X @ newBeta
            newDev  = _logistic_deviance(newEta, y, w)
            if newDev <= dev + 1e-12 * abs(dev) or t < 2.0**-30:
                break
            t *= 0.5                                                                     # step-halving
        if np.linalg.norm(newBeta) > np.linalg.norm(beta) and np.max(np.abs(newEta)) > ETA_SEPARATE:
            growing += 1
        else:
            growing  = 0
        small = np.max(np.abs(newBeta - beta)) <= 1e-13 * (1.0 + np.max(np.abs(beta)))
        beta, eta, dev = newBeta, newEta, newDev
        if growing >= 3 and separated():
            raise separation_error(it, eta, beta)
        if small:                                                                        # numerical floor reached
            gradMax = float(np.max(np.abs(X.T @ (w * (y - expit(eta))))))
            break
    converged = gradMax <= GRAD_TOL
    if (not converged or np.max(np.abs(eta)) > ETA_SEPARATE) and separated():
        raise separation_error(it, eta, beta)
    if not converged:
        raise ConvergenceError("fit_glm: no convergence after " + str(it) + " iterations (score max-norm " + ('%.3g' % gradMax) + ")")
    return GlmFit(coefficients = beta, family = 'logistic', converged = converged, iterations = it, deviance = dev, n = n, gradient = gradMax)

#--------------------------------------------------------------------------------------- nuisance predictions
@dataclass(frozen=True, eq=False)
class NuisancePredictions:
    p_hat:            np.ndarray                                                         # all rows, truncated
    e1_hat:           np.ndarray                                                         # all rows, truncated
    g1_hat:           np.ndarray                                                         # all rows
    g0_hat:           np.ndarray                                                         # all rows
    g_of_a:           np.ndarray                                                         # A g1 + (1-A) g0 on trial rows, NaN elsewhere
    crossfit:         bool  = False
    truncation_count: int   = 0
    epsilon:          float = EPSILON
    fits:             list  = field(default_factory=list)                                # diagnostics per model and fold

    @property
    def e0_hat(self):
        return 1.0 - self.e1_hat

    def summary(self):
        return { 'crossfit':         bool(self.crossfit),
                 'epsilon':          float(self.epsilon),
                 'truncation_count': int(self.truncation_count),
                 'fits':             list(self.fits) }

def make_predictions(ds: CohortDataset, p_hat, e1_hat, g1_hat, g0_hat, crossfit=False, epsilon=EPSILON, fits=None):
    """Assemble NuisancePredictions: truncate probabilities to [epsilon, 1-epsilon] and count the clipped values"""
    p_hat, e1_hat = np.asarray(p_hat, dtype=float), np.asarray(e1_hat, dtype=float)
    g1_hat, g0_hat = np.asarray(g1_hat, dtype=float), np.asarray(g0_hat, dtype=float)
    for v in (p_hat, e1_hat, g1_hat, g0_hat):
        if v.shape != (ds.n_rows,):
            raise DataError("make_predictions: prediction vector does not cover every row")
    if not 0 <= epsilon < 0.5:
        raise ConfigError("make_predictions: epsilon must be in [0, 0.5)")
    lo, hi   = epsilon, 1.0 - epsilon
    count    = int(np.sum((p_hat < lo) | (p_hat > hi)) + np.sum((e1_hat < lo) | (e1_hat > hi)))
    p_hat    = np.clip(p_hat,  lo, hi)
    e1_hat   = np.clip(e1_hat, lo, hi)
    a        = ds.a
    g_of_a   = np.where(ds.trial, a * g1_hat + (1.0 - a) * g0_hat, np.nan)
    return NuisancePredictions(p_hat = p_hat, e1_hat = e1_hat, g1_hat = g1_hat, g0_hat = g0_hat, g_of_a = g_of_a,
                               crossfit = crossfit, truncation_count = count, epsilon = epsilon, fits = list(fits or []))

def _check_arms(ds: CohortDataset, rows, where=''):
    trial = ds.trial[rows]
    a     = ds.a[rows]
    if not (np.any(trial & (a == 1)) and np.any(trial & (a == 0))):
        raise DataError("single-arm trial" + where + ": both treatment arms needed to fit the outcome models")

def _fit_models(ds: CohortDataset, train, participation, treatment, outcome, exclude=(), fold=None):
    """fit the four nuisance models on training mask 'train'; returns list of (name, DesignSpec, GlmFit)"""
    trial = ds.trial
    where = '' if fold is None else ' (training data of fold ' + str(fold) + ')'
    _check_arms(ds, train, where)
    if not (np.any(train & ~trial) and np.any(train & trial)):
        raise DataError("participation model" + where + ": need trial and non-trial rows")
    outFamily = outcome.family
    if outFamily == 'auto':
        outFamily = 'linear' if ds.continuous_outcome else 'logistic'
    models = [ ('participation', participation, train,                       ds.s, participation.family),
               ('treatment',     treatment,     train & trial,               ds.a, treatment.family),
               ('outcome_a1',    outcome,       train & trial & (ds.a == 1), ds.y, outFamily),
               ('outcome_a0',    outcome,       train & trial & (ds.a == 0), ds.y, outFamily) ]
    fitted = []
    for name, spec, rows, response, family in models:
        try:
            family = 'logistic' if family == 'auto' else family
            dspec  = spec.resolve(ds, rows, exclude)
            X      = dspec.matrix(ds, rows)
            fit    = fit_glm(X, response[rows], family)
        except CateError as e:
            raise type(e)(name + " model" + where + ": " + str(e)) from e
        fitted.append((name, dspec, fit))
    return fitted

def _predict(ds: CohortDataset, rows, fitted):
    out = {}
    for name, dspec, fit in fitted:
        out[name] = fit.predict(dspec.matrix(ds, rows))
    return out['participation'], out['treatment'], out['outcome_a1'], out['outcome_a0']

def _diagnostics(fitted, fold=None):
    diag = []
    for name, dspec, fit in fitted:
        d = { 'model': name }
        if fold is not None:
            d['fold'] = int(fold)
        d['design'] = dspec.describe()
        d.update(fit.diagnostics())
        diag.append(d)
    return diag

def _report_truncation(nuis: NuisancePredictions, verbose):
    if nuis.truncation_count > 0:
        print("Warning - fit_nuisances: " + str(nuis.truncation_count) + " predicted probabilities truncated to [" +
              ('%g' % nuis.epsilon) + ", " + ('%g' % (1 - nuis.epsilon)) + "]")
    if verbose > 1:
        for d in nuis.fits:
            print("Message - fit_nuisances: " + str(d))

def fit_nuisances(ds: CohortDataset, participation: NuisanceSpec = None, outcome: NuisanceSpec = None, treatment: NuisanceSpec = None,
                  epsilon=EPSILON, exclude=(), verbose=0):
    """in-sample nuisance fits, predictions for every row"""
    participation = participation or NuisanceSpec()
    treatment     = treatment     or NuisanceSpec()
    outcome       = outcome       or NuisanceSpec(family = 'auto')
    train   = np.ones(ds.n_rows, dtype=bool)
    fitted  = _fit_models(ds, train, participation, treatment, outcome, exclude)
    p, e1, g1, g0 = _predict(ds, train, fitted)
    nuis    = make_predictions(ds, p, e1, g1, g0, crossfit = False, epsilon = epsilon, fits = _diagnostics(fitted))
    _report_truncation(nuis, verbose)
    return nuis

def fit_nuisances_crossfit(ds: CohortDataset, folds: FoldAssignment, participation: NuisanceSpec = None, outcome: NuisanceSpec = None,
                           treatment: NuisanceSpec = None, epsilon=EPSILON, exclude=(), workers=1, verbose=0):
    """cross-fitted nuisances: rows of fold f are predicted by models fit on all other folds.
    Fold fits may run in a thread pool; results are merged by row index"""
    participation = participation or NuisanceSpec()
    treatment     = treatment     or NuisanceSpec()
    outcome       = outcome       or NuisanceSpec(family = 'auto')
    fold_id = np.asarray(folds.fold_id)
    if fold_id.shape != (ds.n_rows,):
        raise DataError("fit_nuisances_crossfit: fold assignment does not match dataset")
    levels = list(range(1, folds.k + 1))
    for f in levels:
        if not np.any(fold_id == f):
            raise DataError("fit_nuisances_crossfit: fold " + str(f) + " is empty")
    if np.any((fold_id < 1) | (fold_id > folds.k)):
        raise DataError("fit_nuisances_crossfit: fold ids outside 1.." + str(folds.k))

    def _one(f):
        fitted = _fit_models(ds, fold_id != f, participation, treatment, outcome, exclude, fold = f)
        return f, fitted, _predict(ds, fold_id == f, fitted)

    if workers > 1:
        with ThreadPoolExecutor(max_workers = workers) as pool:
            results = list(pool.map(_one, levels))
    else:
        results = [_one(f) for f in levels]

    p, e1, g1, g0 = (np.full(ds.n_rows, np.nan) for _ in range(4))
    diag = []
    for f, fitted, (pf, ef, g1f, g0f) in sorted(results, key=lambda r: r[0]):
        rows = fold_id == f
        p[rows], e1[rows], g1[rows], g0[rows] = pf, ef, g1f, g0f
        diag.extend(_diagnostics(fitted, fold = f))
    nuis = make_predictions(ds, p, e1, g1, g0, crossfit = True, epsilon = epsilon, fits = diag)
    _report_truncation(nuis, verbose)
    return nuis
