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

Basis expansions of a single real variable: polynomial, clamped B-spline and identity.
Used for spline-expanded covariates in nuisance models and for the second-stage
CATE regression m(x)'beta.
"""

from dataclasses import dataclass, replace
from typing      import Optional

import numpy as np

from .errors import ConfigError, DataError

@dataclass(frozen=True)
class BasisSpec:
    """Specification of a basis expansion.

    kind                polynomial, bspline or identity
    degree              polynomial degree
    order               B-spline order (order 3 = degree 2, piecewise quadratic)
    interior_knots      sorted interior knots; None = place n_knots knots at empirical quantiles j/(n_knots+1)
                        of the data given to resolve() (n_knots=1: the median)
    boundary_knots      (low, high); None = min/max of the data given to resolve()
    include_intercept   keep the column that spans constants. Nuisance designs drop it per covariate,
                        as they carry one global intercept"""
    kind:              str             = 'bspline'
    degree:            int             = 3
    order:             int             = 3
    interior_knots:    Optional[tuple] = None
    boundary_knots:    Optional[tuple] = None
    n_knots:           int             = 1
    include_intercept: bool            = True

    def __post_init__(self):
        if self.kind not in ('polynomial', 'bspline', 'identity'):
            raise ConfigError("BasisSpec: unknown kind '" + str(self.kind) + "'")
        if self.degree < 1:
            raise ConfigError("BasisSpec: degree must be >= 1")
        if self.order < 1:
            raise ConfigError("BasisSpec: order must be >= 1")
        if self.n_knots < 0:
            raise ConfigError("BasisSpec: n_knots must be >= 0")
        if self.interior_knots is not None:
            knots = tuple(float(k) for k in self.interior_knots)
            if any(k2 <= k1 for k1, k2 in zip(knots[:-1], knots[1:])):
                raise ConfigError("BasisSpec: interior knots must be strictly increasing: " + str(knots))
            object.__setattr__(self, 'interior_knots', knots)
        if self.boundary_knots is not None:
            lo, hi = (float(b) for b in self.boundary_knots)
            if not lo < hi:
                raise ConfigError("BasisSpec: boundary knots must satisfy low < high: " + str((lo, hi)))
            object.__setattr__(self, 'boundary_knots', (lo, hi))
        if self.interior_knots is not None and self.boundary_knots is not None:
            lo, hi = self.boundary_knots
            if len(self.interior_knots) > 0 and not (lo < self.interior_knots[0] and self.interior_knots[-1] < hi):
                raise ConfigError("BasisSpec: interior knots must lie strictly inside the boundary knots")

    @property
    def resolved(self):
        """True if nothing is left to be taken from data"""
        return self.kind != 'bspline' or (self.interior_knots is not None and self.boundary_knots is not None)

    @property
    def width(self):
        """number of columns produced (spec must be resolved for bspline)"""
        if self.kind == 'polynomial':
            n = self.degree + 1
        elif self.kind == 'identity':
            n = 2
        else:
            n = len(self.interior_knots) + self.order
        return n if self.include_intercept else n - 1

    def resolve(self, values):
        """fix data dependent knots from 'values' (training data); returns a new spec"""
        if self.resolved:
            return self
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            raise DataError("BasisSpec.resolve: empty input")
        boundary = self.boundary_knots
        if boundary is None:
            lo, hi = float(np.min(values)), float(np.max(values))
            if not lo < hi:
                raise ConfigError("BasisSpec.resolve: B-spline needs a non-constant variable (all values = " + ('%g' % lo) + ")")
            boundary = (lo, hi)
        interior = self.interior_knots
        if interior is None:
            inside   = values[(values > boundary[0]) & (values < boundary[1])]
            if self.n_knots > 0 and inside.size == 0:
                raise ConfigError("BasisSpec.resolve: no data strictly inside the boundary knots to place interior knots")
            probs    = np.arange(1, self.n_knots + 1) / (self.n_knots + 1)
            interior = tuple(np.unique(np.quantile(values, probs))) if self.n_knots > 0 else ()
            interior = tuple(k for k in interior if boundary[0] < k < boundary[1])
        return replace(self, interior_knots = interior, boundary_knots = boundary)

    def knot_vector(self):
        """clamped knot vector: boundary knots repeated 'order' times"""
        lo, hi = self.boundary_knots
        return np.concatenate([np.repeat(lo, self.order), np.asarray(self.interior_knots, dtype=float), np.repeat(hi, self.order)])

def polynomial_row(x, degree):
    """[1, x, x^2, ..., x^degree]"""
    if degree < 1:
        raise ConfigError("polynomial_row: degree must be >= 1")
    return float(x) ** np.arange(degree + 1)

def _cox_de_boor(x, t, order):
    """B-spline basis functions of 'order' on knot vector t, evaluated at x (already within [t[order-1], t[-order]])"""
    nSpans = len(t) - 1
    B      = np.zeros((len(x), nSpans))
    for i in range(nSpans):                                                              # order 1: span indicators [t_i, t_i+1)
        if t[i] < t[i+1]:
            B[:, i] = (x >= t[i]) & (x < t[i+1])
    last = max(i for i in range(nSpans) if t[i] < t[i+1])
    B[x == t[last+1], last] = 1.0                                                        # right boundary belongs to the last span
    for k in range(2, order + 1):
        Bk = np.zeros((len(x), len(t) - k))
        for i in range(len(t) - k):
            left  = t[i+k-1] - t[i]
            right = t[i+k]   - t[i+1]
            if left > 0:
                Bk[:, i] += (x - t[i]) / left * B[:, i]
            if right > 0:
                Bk[:, i] += (t[i+k] - x) / right * B[:, i+1]
        B = Bk
    return B

def bspline_matrix(values, spec: BasisSpec):
    """B-spline design for a resolved spec; values outside the boundary knots are clamped.
    Returns (matrix, number of clamped values)"""
    if not spec.resolved:
        raise ConfigError("bspline_matrix: knots not resolved")
    x       = np.asarray(values, dtype=float).ravel()
    lo, hi  = spec.boundary_knots
    clamped = int(np.sum((x < lo) | (x > hi)))
    x       = np.clip(x, lo, hi)
    B       = _cox_de_boor(x, spec.knot_vector(), spec.order)
    if not spec.include_intercept:
        B = B[:, 1:]
    return B, clamped

def bspline_row(x, spec: BasisSpec):
    """B-spline basis at a single point; length = number of interior knots + order (with intercept)"""
    return bspline_matrix([x], spec)[0][0]

def design_matrix(values, spec: BasisSpec):
    """design for a resolved spec; returns (matrix, number of clamped values)"""
    x = np.asarray(values, dtype=float).ravel()
    if spec.kind == 'bspline':
        return bspline_matrix(x, spec)
    if spec.kind == 'polynomial':
        M = x[:, None] ** np.arange(spec.degree + 1)[None, :]
    else:
        M = np.column_stack([np.ones_like(x), x])
    if not spec.include_intercept:
        M = M[:, 1:]
    return M, 0

def build_design(values, spec: BasisSpec, verbose=0):
    """Design matrix, row i = basis row of values[i]. Data dependent knots are placed on 'values'
    (median convention for the default single interior knot)"""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise DataError("build_design: empty input")
    spec        = spec.resolve(values)
    M, clamped  = design_matrix(values, spec)
    if clamped > 0:
        print("Warning - build_design: " + str(clamped) + " values outside boundary knots " + str(spec.boundary_knots) + " clamped")
    return M
