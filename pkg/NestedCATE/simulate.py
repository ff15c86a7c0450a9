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

Nested trial data generating processes with known CATE. Config section [Simulation]:

    n             = 5000
    seed          = 1
    covariates    = xt: uniform(0,1); z: bernoulli(0.5)       # independent covariates
    modifier      = xt
    participation = -0.5 + 1.0*z                              # logit Pr[S=1|X]
    treatment     = 0.5                                       # Pr[A=1|S=1]
    mu1           = 0.2 + 0.3*xt                              # arm means, through 'link'
    mu0           = 0.35
    link          = identity                                  # identity or logit
    family        = gaussian                                  # gaussian or bernoulli
    sigma         = 1.0                                       # gaussian noise sd

Covariate laws: uniform(a,b), normal(m,s), bernoulli(p), discrete(v1:p1, v2:p2, ...).
Linear predictors are sums of terms coefficient*factor*..., factors being covariate names
optionally raised to an integer power (xt^2).
"""

import itertools
import re
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtri

from .dataset  import CohortDataset
from .errors   import ConfigError
from .nuisance import make_predictions
from .pseudo   import aipw_pseudo
from .streams  import make_rng, STREAM_DATA

QUAD_POINTS   = 1024                                                                     # midpoint rule nodes per continuous dimension
MAX_QUAD_DIMS = 2
POSITIVITY    = 1e-3                                                                     # minimum participation probability on the support
NORMAL_REACH  = 4.0                                                                      # normal laws are checked within mean -/+ 4 sd

#--------------------------------------------------------------------------------------- covariate laws
class Law:
    discrete = False

    def draw(self, rng, n):
        raise NotImplementedError

    def moment(self, k):
        raise NotImplementedError

    def nodes(self, npts=QUAD_POINTS):
        """quadrature nodes and weights (weights sum to 1)"""
        raise NotImplementedError

    def check_points(self):
        """points at which spec invariants are checked"""
        raise NotImplementedError

class Uniform(Law):
    def __init__(self, a, b):
        if not a < b:
            raise ConfigError("uniform(a,b) needs a < b")
        self.a, self.b = float(a), float(b)

    def draw(self, rng, n):
        return rng.uniform(self.a, self.b, n)

    def moment(self, k):
        return (self.b**(k+1) - self.a**(k+1)) / ((k+1) * (self.b - self.a))

    def nodes(self, npts=QUAD_POINTS):
        return self.a + (self.b - self.a) * (np.arange(npts) + 0.5) / npts, np.full(npts, 1.0 / npts)

    def check_points(self):
        return np.linspace(self.a, self.b, 9)

    def __repr__(self):
        return 'uniform(%g,%g)' % (self.a, self.b)

class Normal(Law):
    def __init__(self, m, s):
        if not s > 0:
            raise ConfigError("normal(m,s) needs s > 0")
        self.m, self.s = float(m), float(s)

    def draw(self, rng, n):
        return rng.normal(self.m, self.s, n)

    def moment(self, k):
        prev, cur = 1.0, self.m                                                          # E[X^0], E[X^1]
        if k == 0:
            return prev
        for j in range(2, k + 1):
            prev, cur = cur, self.m * cur + (j - 1) * self.s**2 * prev
        return cur

    def nodes(self, npts=QUAD_POINTS):
        return self.m + self.s * ndtri((np.arange(npts) + 0.5) / npts), np.full(npts, 1.0 / npts)

    def check_points(self):
        return self.m + self.s * np.linspace(-NORMAL_REACH, NORMAL_REACH, 9)

    def __repr__(self):
        return 'normal(%g,%g)' % (self.m, self.s)

class Discrete(Law):
    discrete = True

    def __init__(self, values, probs):
        values, probs = np.asarray(values, dtype=float), np.asarray(probs, dtype=float)
        if len(values) == 0 or len(values) != len(probs):
            raise ConfigError("discrete law needs matching values and probabilities")
        if len(np.unique(values)) != len(values):
            raise ConfigError("discrete law has repeated values")
        if np.any(probs <= 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError("discrete law probabilities must be > 0 and sum to 1")
        order = np.argsort(values)
        self.values, self.probs = values[order], probs[order]

    def draw(self, rng, n):
        return self.values[rng.choice(len(self.values), size=n, p=self.probs)]

    def moment(self, k):
        return float(np.sum(self.probs * self.values**k))

    def nodes(self, npts=QUAD_POINTS):
        return self.values, self.probs

    def check_points(self):
        return self.values

    def __repr__(self):
        return 'discrete(' + ', '.join('%g:%g' % vp for vp in zip(self.values, self.probs)) + ')'

class Bernoulli(Discrete):
    def __init__(self, p):
        if not 0 < p < 1:
            raise ConfigError("bernoulli(p) needs 0 < p < 1")
        self.p = float(p)
        super().__init__([0.0, 1.0], [1.0 - self.p, self.p])

    def draw(self, rng, n):
        return (rng.uniform(size=n) < self.p).astype(float)

    def __repr__(self):
        return 'bernoulli(%g)' % self.p

def parse_law(text):
    m = re.fullmatch(r'\s*(\w+)\s*\((.*)\)\s*', text)
    if m is None:
        raise ConfigError("cannot parse covariate law '" + text + "'")
    kind, args = m.group(1).lower(), [a.strip() for a in m.group(2).split(',') if a.strip() != '']
    try:
        if kind == 'uniform' and len(args) == 2:
            return Uniform(float(args[0]), float(args[1]))
        if kind == 'normal' and len(args) == 2:
            return Normal(float(args[0]), float(args[1]))
        if kind == 'bernoulli' and len(args) == 1:
            return Bernoulli(float(args[0]))
        if kind == 'discrete' and len(args) > 0:
            pairs = [a.split(':') for a in args]
            return Discrete([float(v) for v, _ in pairs], [float(p) for _, p in pairs])
    except ValueError:
        raise ConfigError("cannot parse covariate law '" + text + "'")
    raise ConfigError("unsupported covariate law '" + text + "'")

#--------------------------------------------------------------------------------------- linear predictors
_SPLIT = re.compile(r'(?<![0-9.][eE])(?<![*^])(?=[+-])')

class LinearPredictor:
    """sum of terms coefficient * x^k * z^j ..., parsed from text like '0.2 + 0.3*xt - 0.1*xt^2 + 0.2*xt*z'"""

    def __init__(self, text):
        self.text  = str(text).strip()
        self.terms = []                                                                  # (coefficient, {name: power})
        body = self.text.replace(' ', '')
        if body == '':
            raise ConfigError("empty linear predictor")
        for piece in _SPLIT.split(body):
            if piece in ('', '+', '-'):
                if piece != '':
                    raise ConfigError("cannot parse linear predictor '" + self.text + "'")
                continue
            sign = -1.0 if piece[0] == '-' else 1.0
            piece = piece.lstrip('+-')
            coef, powers = sign, {}
            for factor in piece.split('*'):
                if factor == '':
                    raise ConfigError("cannot parse linear predictor '" + self.text + "'")
                try:
                    coef *= float(factor)
                    continue
                except ValueError:
                    pass
                name, _, power = factor.partition('^')
                if not re.fullmatch(r'[A-Za-z_]\w*', name):
                    raise ConfigError("cannot parse term '" + factor + "' of linear predictor '" + self.text + "'")
                try:
                    power = int(power) if power else 1
                except ValueError:
                    raise ConfigError("non-integer power in linear predictor '" + self.text + "'")
                if power < 0:
                    raise ConfigError("negative power in linear predictor '" + self.text + "'")
                powers[name] = powers.get(name, 0) + power
            self.terms.append((coef, powers))

    @property
    def variables(self):
        return set(v for _, powers in self.terms for v in powers)

    def __call__(self, values):
        """values: dict name -> array (or scalar)"""
        out = 0.0
        for coef, powers in self.terms:
            term = coef
            for name, power in powers.items():
                if name not in values:
                    raise ConfigError("linear predictor '" + self.text + "' uses unknown covariate '" + name + "'")
                term = term * np.asarray(values[name], dtype=float)**power
            out = out + term
        return out

    def __repr__(self):
        return self.text

#--------------------------------------------------------------------------------------- DGP
@dataclass(frozen=True, eq=False)
class DgpSpec:
    n:             int
    covariates:    tuple                                                                 # ((name, Law), ...)
    modifier:      str
    participation: LinearPredictor
    mu1:           LinearPredictor
    mu0:           LinearPredictor
    treatment:     float = 0.5
    link:          str   = 'identity'
    family:        str   = 'gaussian'
    sigma:         float = 1.0
    seed:          int   = 0

    def __post_init__(self):
        names = [name for name, _ in self.covariates]
        if len(names) == 0:
            raise ConfigError("DgpSpec: no covariates")
        if len(set(names)) != len(names):
            raise ConfigError("DgpSpec: duplicated covariate names")
        if self.modifier not in names:
            raise ConfigError("DgpSpec: modifier '" + str(self.modifier) + "' is not a covariate")
        for lp in (self.participation, self.mu1, self.mu0):
            unknown = lp.variables - set(names)
            if unknown:
                raise ConfigError("DgpSpec: '" + lp.text + "' uses unknown covariate(s) " + ', '.join(sorted(unknown)))
        if int(self.n) < 1:
            raise ConfigError("DgpSpec: n must be >= 1, got " + str(self.n))
        if not 0 < self.treatment < 1:
            raise ConfigError("DgpSpec: treatment probability must be in (0,1)")
        if self.link not in ('identity', 'logit'):
            raise ConfigError("DgpSpec: unknown link '" + str(self.link) + "'")
        if self.family not in ('gaussian', 'bernoulli'):
            raise ConfigError("DgpSpec: unknown family '" + str(self.family) + "'")
        if self.family == 'gaussian' and not self.sigma >= 0:
            raise ConfigError("DgpSpec: sigma must be >= 0")
        self._check_support()

    @classmethod
    def from_config(cls, section, n=None, seed=None):
        if section is None:
            raise ConfigError("config section [Simulation] missing")
        laws = []
        for item in section.get('covariates', '').split(';'):
            if item.strip() == '':
                continue
            name, sep, law = item.partition(':')
            if sep == '':
                raise ConfigError("covariate '" + item.strip() + "' needs the form name: law(...)")
            laws.append((name.strip(), parse_law(law)))
        for key in ('modifier', 'participation', 'mu1', 'mu0'):
            if section.get(key, None) is None:
                raise ConfigError("[Simulation] needs key '" + key + "'")
        try:
            return cls(n             = int(section.get('n', '1000')) if n is None else int(n),
                       covariates    = tuple(laws),
                       modifier      = section.get('modifier').strip(),
                       participation = LinearPredictor(section.get('participation')),
                       mu1           = LinearPredictor(section.get('mu1')),
                       mu0           = LinearPredictor(section.get('mu0')),
                       treatment     = section.getfloat('treatment', 0.5),
                       link          = section.get('link', 'identity').strip().lower(),
                       family        = section.get('family', 'gaussian').strip().lower(),
                       sigma         = section.getfloat('sigma', 1.0),
                       seed          = int(section.get('seed', '0')) if seed is None else int(seed))
        except ValueError as e:
            raise ConfigError("[Simulation]: " + str(e))

    def law(self, name):
        return dict(self.covariates)[name]

    def mean(self, arm, values):
        eta = (self.mu1 if arm == 1 else self.mu0)(values)
        return expit(eta) if self.link == 'logit' else eta

    def p(self, values):
        return expit(self.participation(values))

    def to_config(self):
        return { 'n':             int(self.n),
                 'seed':          int(self.seed),
                 'covariates':    '; '.join(name + ': ' + repr(law) for name, law in self.covariates),
                 'modifier':      self.modifier,
                 'participation': self.participation.text,
                 'treatment':     float(self.treatment),
                 'mu1':           self.mu1.text,
                 'mu0':           self.mu0.text,
                 'link':          self.link,
                 'family':        self.family,
                 'sigma':         float(self.sigma) }

    def _check_support(self):
        names  = [name for name, _ in self.covariates]
        points = [law.check_points() for _, law in self.covariates]
        mesh   = np.meshgrid(*points, indexing='ij')
        values = { name: m.ravel() for name, m in zip(names, mesh) }
        p      = np.broadcast_to(self.p(values), mesh[0].size)
        if np.min(p) < POSITIVITY:
            raise ConfigError("DgpSpec: participation probability " + ('%.2g' % np.min(p)) + " below " + ('%g' % POSITIVITY) +
                              " on the covariate support (positivity)")
        if self.family == 'bernoulli':
            for arm in (1, 0):
                mu = np.broadcast_to(self.mean(arm, values), mesh[0].size)
                if np.any((mu <= 0) | (mu >= 1)):
                    raise ConfigError("DgpSpec: bernoulli mean of arm " + str(arm) + " outside (0,1) on the covariate support")

def generate(spec: DgpSpec, seed=None):
    """Draw a nested trial dataset: X, then S|X, then A and Y|X,A; a and y are kept on trial rows only.
    A, Y and the noise are drawn for every row so that the stream layout does not depend on S"""
    seed   = spec.seed if seed is None else seed
    rng    = make_rng(seed, STREAM_DATA)
    n      = int(spec.n)
    values = {}
    for name, law in spec.covariates:
        values[name] = law.draw(rng, n)
    s   = (rng.uniform(size=n) < spec.p(values)).astype(int)
    a   = (rng.uniform(size=n) < spec.treatment).astype(float)
    mu1 = np.broadcast_to(spec.mean(1, values), n)
    mu0 = np.broadcast_to(spec.mean(0, values), n)
    mu  = np.where(a == 1, mu1, mu0)
    if spec.family == 'bernoulli':
        if np.any((mu <= 0) | (mu >= 1)):
            raise ConfigError("generate: bernoulli mean outside (0,1) at a drawn covariate value")
        y = (rng.uniform(size=n) < mu).astype(float)
    else:
        y = mu + spec.sigma * rng.standard_normal(n)
    trial = s == 1
    a     = np.where(trial, a, np.nan)
    y     = np.where(trial, y, np.nan)
    names = [name for name, _ in spec.covariates]
    X     = np.column_stack([values[c] for c in names])
    return CohortDataset(covariates = X, columns = tuple(names), modifiers = (spec.modifier,), s = s, a = a, y = y,
                         continuous_outcome = spec.family == 'gaussian')

#--------------------------------------------------------------------------------------- truth
def _analytic_cate(spec: DgpSpec, grid):
    """E[mu1 - mu0 | modifier] for identity link: polynomial terms integrate through the moments of the
    independent remaining covariates"""
    out = np.zeros(len(grid))
    for lp, sign in ((spec.mu1, 1.0), (spec.mu0, -1.0)):
        for coef, powers in lp.terms:
            term = sign * coef * np.ones(len(grid))
            for name, power in powers.items():
                if name == spec.modifier:
                    term = term * grid**power
                else:
                    term = term * spec.law(name).moment(power)
            out += term
    return out

def _quadrature(spec: DgpSpec, used):
    """nodes of the covariates in 'used' (other than the modifier): dict of flattened arrays and the weights"""
    others = [name for name, _ in spec.covariates if name in used and name != spec.modifier]
    continuous = [name for name in others if not spec.law(name).discrete]
    if len(continuous) > MAX_QUAD_DIMS:
        raise ConfigError("true_cate: numerical integration over " + str(len(continuous)) + " continuous covariates not supported (max " +
                          str(MAX_QUAD_DIMS) + ")")
    if not others:
        return {}, np.ones(1)
    nodes  = [spec.law(name).nodes() for name in others]
    mesh   = np.meshgrid(*[nd for nd, _ in nodes], indexing='ij')
    wmesh  = np.meshgrid(*[w for _, w in nodes], indexing='ij')
    weight = np.prod(np.stack([w.ravel() for w in wmesh]), axis=0)
    return { name: m.ravel() for name, m in zip(others, mesh) }, weight

def true_cate(spec: DgpSpec, grid, population='target'):
    """True CATE on 'grid': E[mu1(X) - mu0(X) | modifier = x] over the target population law,
    or (population='trial') over the covariate law of trial participants, i.e. weighted by p(X)"""
    grid = np.asarray(grid, dtype=float).ravel()
    if population not in ('target', 'trial'):
        raise ConfigError("true_cate: population must be 'target' or 'trial'")
    if population == 'target' and spec.link == 'identity':
        return _analytic_cate(spec, grid)
    used = spec.mu1.variables | spec.mu0.variables
    if population == 'trial':
        used = used | spec.participation.variables
    values, weight = _quadrature(spec, used)
    out = np.empty(len(grid))
    for i, x in enumerate(grid):
        point = dict(values)
        point[spec.modifier] = np.full(len(weight), x)
        diff  = np.broadcast_to(spec.mean(1, point) - spec.mean(0, point), weight.shape)
        if population == 'trial':
            w      = weight * np.broadcast_to(spec.p(point), weight.shape)
            out[i] = np.sum(w * diff) / np.sum(w)
        else:
            out[i] = np.sum(weight * diff)
    return out

def enumerate_population(spec: DgpSpec):
    """Exact observed-data law of a DGP whose covariates are all discrete: every (x, s, a, y) cell with its probability.
    Continuous outcomes are represented by their arm mean (the pseudo-outcome is linear in y).
    Returns (CohortDataset of cells, probabilities)"""
    for name, law in spec.covariates:
        if not law.discrete:
            raise ConfigError("enumerate_population: covariate '" + name + "' is not discrete")
    names = [name for name, _ in spec.covariates]
    laws  = [law for _, law in spec.covariates]
    rows, prob = [], []
    for combo in itertools.product(*[list(zip(law.values, law.probs)) for law in laws]):
        x      = { name: float(v) for name, (v, _) in zip(names, combo) }
        px     = float(np.prod([p for _, p in combo]))
        p      = float(spec.p(x))
        rows.append((x, 0, np.nan, np.nan))
        prob.append(px * (1 - p))
        for a, pa in ((1, spec.treatment), (0, 1 - spec.treatment)):
            mu = float(spec.mean(a, x))
            if spec.family == 'bernoulli':
                for y, py in ((1.0, mu), (0.0, 1 - mu)):
                    rows.append((x, 1, float(a), y))
                    prob.append(px * p * pa * py)
            else:
                rows.append((x, 1, float(a), mu))
                prob.append(px * p * pa)
    X  = np.array([[r[0][c] for c in names] for r in rows])
    ds = CohortDataset(covariates = X, columns = tuple(names), modifiers = (spec.modifier,),
                       s = [r[1] for r in rows], a = [r[2] for r in rows], y = [r[3] for r in rows],
                       continuous_outcome = spec.family == 'gaussian')
    return ds, np.array(prob)

def population_pseudo_cate(spec: DgpSpec, participation=None, treatment=None, mu1=None, mu0=None):
    """Exact E[phi(O) | modifier] of the doubly robust pseudo-outcome over an enumerated population.
    The nuisance functions default to the truth; any of them can be replaced by a function of the
    covariate dict (working models) to study double robustness. Returns (levels, values)"""
    ds, prob = enumerate_population(spec)
    values   = { c: ds.column(c) for c in ds.columns }
    p_hat    = (participation or spec.p)(values)
    e1_hat   = (treatment or (lambda v: spec.treatment))(values)
    g1_hat   = (mu1 or (lambda v: spec.mean(1, v)))(values)
    g0_hat   = (mu0 or (lambda v: spec.mean(0, v)))(values)
    n        = ds.n_rows
    nuis     = make_predictions(ds, np.broadcast_to(p_hat, n), np.broadcast_to(e1_hat, n),
                                np.broadcast_to(g1_hat, n), np.broadcast_to(g0_hat, n), epsilon = 0.0)
    phi      = aipw_pseudo(ds, nuis).values
    x        = ds.column(spec.modifier)
    levels   = np.unique(x)
    return levels, np.array([np.sum(prob[x == v] * phi[x == v]) / np.sum(prob[x == v]) for v in levels])
