"""Cubic B-spline bases on a closed interval, with Gram and roughness matrices.

Every smooth function in this package (baseline log-intensity, mean
response, principal components) is a coefficient vector in one of these
bases.  The basis object carries a composite Gauss-Legendre rule with a
fixed number of nodes per knot span; the rule is exact for the piecewise
polynomials appearing in the Gram and roughness matrices and is reused
for intensity integrals by the likelihood code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import BSpline

DEGREE = 3


@dataclass(frozen=True)
class BasisSystem:
    """Clamped cubic B-spline basis with precomputed integration tables.

    Attributes
    ----------
    domain : tuple of float
        Closed interval ``[a, b]`` the basis lives on.
    interior_knots : int
        Number of equally spaced interior knots; the dimension is
        ``q = interior_knots + 4``.
    knots : ndarray, shape (interior_knots + 8,)
        Full knot vector with both endpoints repeated four times.
    gram : ndarray, shape (q, q)
        Gram matrix ``J`` of pairwise basis products.
    roughness : ndarray, shape (q, q)
        Second-derivative penalty matrix (rank ``q - 2``, affine
        functions in its null space).
    quad_x, quad_w : ndarray, shape (Q,)
        Composite Gauss-Legendre nodes and weights covering the domain.
    """

    domain: tuple[float, float]
    interior_knots: int
    knots: np.ndarray
    gram: np.ndarray
    roughness: np.ndarray
    quad_x: np.ndarray
    quad_w: np.ndarray

    def __post_init__(self):
        for name in ("knots", "gram", "roughness", "quad_x", "quad_w"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def q(self) -> int:
        return self.interior_knots + 4


def build_basis(domain: tuple[float, float], interior_knots: int,
                quad_order: int = 5) -> BasisSystem:
    """Construct the basis for ``interior_knots`` equally spaced knots.

    Parameters
    ----------
    domain : tuple of float
        Interval ``(a, b)`` with ``a < b``, both finite.
    interior_knots : int
        Number of interior knots, at least 0.
    quad_order : int
        Gauss-Legendre nodes per knot span.  The default of 5 is exact
        for all products of cubics (degree 6) needed by the Gram matrix;
        raise it when intensity integrands are unusually sharp.

    Returns
    -------
    BasisSystem
    """
    a, b = float(domain[0]), float(domain[1])
    if not (np.isfinite(a) and np.isfinite(b) and a < b):
        raise ValueError(f"domain must be a finite interval with a < b, got {domain!r}")
    if interior_knots < 0:
        raise ValueError(f"interior_knots must be nonnegative, got {interior_knots}")
    if quad_order < 3:
        raise ValueError("quad_order below 3 cannot integrate the Gram matrix exactly")

    breaks = np.linspace(a, b, interior_knots + 2)
    knots = np.concatenate([[a] * (DEGREE + 1), breaks[1:-1], [b] * (DEGREE + 1)])

    # Composite rule: map the reference nodes into every knot span.
    ref_x, ref_w = leggauss(quad_order)
    half = np.diff(breaks) / 2.0
    mid = (breaks[:-1] + breaks[1:]) / 2.0
    quad_x = (mid[:, None] + half[:, None] * ref_x[None, :]).ravel()
    quad_w = (half[:, None] * ref_w[None, :]).ravel()

    design = _design(knots, quad_x)
    gram = design.T @ (quad_w[:, None] * design)
    design2 = _design_d2(knots, quad_x)
    roughness = design2.T @ (quad_w[:, None] * design2)
    # Symmetrize away roundoff so eigendecompositions downstream behave.
    gram = (gram + gram.T) / 2.0
    roughness = (roughness + roughness.T) / 2.0

    return BasisSystem(domain=(a, b), interior_knots=interior_knots, knots=knots,
                       gram=gram, roughness=roughness, quad_x=quad_x, quad_w=quad_w)


def _design(knots: np.ndarray, x: np.ndarray) -> np.ndarray:
    return BSpline.design_matrix(x, knots, DEGREE, extrapolate=False).toarray()


def _design_d2(knots: np.ndarray, x: np.ndarray) -> np.ndarray:
    q = len(knots) - DEGREE - 1
    out = np.empty((len(x), q))
    for j in range(q):
        coef = np.zeros(q)
        coef[j] = 1.0
        out[:, j] = BSpline(knots, coef, DEGREE).derivative(2)(x)
    return out


def eval_design(basis: BasisSystem, x: np.ndarray) -> np.ndarray:
    """Evaluate all basis functions at ``x``; rows sum to one.

    Raises ``ValueError`` when any point falls outside the domain
    (both endpoints are included).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a, b = basis.domain
    if x.size and (x.min() < a or x.max() > b):
        bad = x[(x < a) | (x > b)][0]
        raise ValueError(f"point {bad!r} outside basis domain [{a}, {b}]")
    if x.size == 0:
        return np.zeros((0, basis.q))
    return _design(basis.knots, x)


def penalty_value(basis: BasisSystem, coef: np.ndarray) -> float:
    """Roughness penalty: the integral of the squared second derivative."""
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (basis.q,):
        raise ValueError(f"coefficient vector must have shape ({basis.q},), got {coef.shape}")
    val = float(coef @ basis.roughness @ coef)
    return max(val, 0.0)


def greville_abscissae(basis: BasisSystem) -> np.ndarray:
    """Knot averages; by the blossoming identities, the coefficient vector
    equal to these abscissae reproduces the identity function."""
    t = basis.knots
    return (t[1:-3] + t[2:-2] + t[3:-1]) / 3.0
