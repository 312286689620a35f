"""Shared helpers for the test suite."""

import numpy as np

from markcov.basis import build_basis
from markcov.model import Theta, normalize_signs, orthonormalize


def random_orthonormal_theta(basis, p1=2, p2=2, seed=0, var_eta=0.09):
    """A Theta satisfying every identifiability constraint, seeded."""
    rng = np.random.default_rng(seed)
    q = basis.q
    c = (orthonormalize(rng.normal(size=(p1, q)), basis.gram)
         if p1 else np.zeros((0, q)))
    d = (orthonormalize(rng.normal(size=(p2, q)), basis.gram)
         if p2 else np.zeros((0, q)))
    var_u = 0.09 * 0.6 ** np.arange(p1)
    var_v = 0.49 * 0.6 ** np.arange(p2)
    sigma_uv = 0.25 * np.sqrt(np.outer(var_u, var_v))
    theta = Theta(sigma_uv=sigma_uv, c0=rng.normal(scale=0.4, size=q), c=c,
                  d0=rng.normal(scale=1.0, size=q), d=d,
                  var_u=var_u, var_v=var_v, var_eta=var_eta)
    return normalize_signs(theta)


def default_basis(interior=5):
    return build_basis((0.0, 1.0), interior)
