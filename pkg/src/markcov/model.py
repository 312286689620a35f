"""Parameter and data value objects, and the functions they parameterize.

The canonical flat parameter layout used by gradients, inference, and
serialization is

    [vec(sigma_uv) column-major, c0, c_1 .. c_p1, d0, d_1 .. d_p2,
     var_u, var_v, var_eta]

with total dimension ``s = p1 p2 + q (1 + p1) + q (1 + p2) + p1 + p2 + 1``.
All value objects are immutable; "modifying" one means building a new one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from markcov.basis import BasisSystem, eval_design

SIGN_TOL = 1e-8


@dataclass(frozen=True)
class Theta:
    """Model parameters for ``p1`` intensity and ``p2`` response components.

    Component coefficient vectors are stored as rows of ``c`` and ``d``;
    the orthonormality, ordering, and sign conventions are enforced by
    ``validate_theta``, not by the constructor.
    """

    sigma_uv: np.ndarray   # (p1, p2) cross-covariance of latent scores
    c0: np.ndarray         # (q,) baseline log-intensity coefficients
    c: np.ndarray          # (p1, q) intensity component coefficients
    d0: np.ndarray         # (q,) mean response coefficients
    d: np.ndarray          # (p2, q) response component coefficients
    var_u: np.ndarray      # (p1,) intensity score variances, descending
    var_v: np.ndarray      # (p2,) response score variances, descending
    var_eta: float         # residual response variance

    def __post_init__(self):
        q = np.asarray(self.c0, dtype=float).size
        coerced = {
            "c0": np.asarray(self.c0, dtype=float).reshape(q),
            "c": np.asarray(self.c, dtype=float).reshape(-1, q),
            "d0": np.asarray(self.d0, dtype=float).reshape(q),
            "d": np.asarray(self.d, dtype=float).reshape(-1, q),
            "var_u": np.atleast_1d(np.asarray(self.var_u, dtype=float)),
            "var_v": np.atleast_1d(np.asarray(self.var_v, dtype=float)),
        }
        p1, p2 = coerced["c"].shape[0], coerced["d"].shape[0]
        sigma_uv = np.asarray(self.sigma_uv, dtype=float)
        if sigma_uv.size != p1 * p2:
            raise ValueError(f"sigma_uv must have {p1} x {p2} entries, got shape {sigma_uv.shape}")
        coerced["sigma_uv"] = sigma_uv.reshape(p1, p2)
        if coerced["var_u"].shape != (p1,) or coerced["var_v"].shape != (p2,):
            raise ValueError("score variance vectors do not match component counts")
        for name, arr in coerced.items():
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "var_eta", float(self.var_eta))
        if not self.var_eta > 0:
            raise ValueError(f"var_eta must be positive, got {self.var_eta}")

    @property
    def p1(self) -> int:
        return self.c.shape[0]

    @property
    def p2(self) -> int:
        return self.d.shape[0]

    @property
    def q(self) -> int:
        return self.c0.size


@dataclass(frozen=True)
class MarkedRealization:
    """One subject: event locations ``x`` and their responses ``y``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError(f"x and y must be equal-length vectors, got {x.shape} and {y.shape}")
        if x.size and not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite point location or response")
        for name, arr in (("x", x), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def m(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class Dataset:
    """Replicated realizations sharing one domain.  Subjects may be empty."""

    realizations: tuple[MarkedRealization, ...]
    domain: tuple[float, float]
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "realizations", tuple(self.realizations))
        a, b = float(self.domain[0]), float(self.domain[1])
        object.__setattr__(self, "domain", (a, b))
        if self.ids is not None:
            ids = tuple(str(s) for s in self.ids)
            if len(ids) != len(self.realizations):
                raise ValueError("ids length does not match number of realizations")
            object.__setattr__(self, "ids", ids)
        for i, obs in enumerate(self.realizations):
            if obs.m and (obs.x.min() < a or obs.x.max() > b):
                raise ValueError(f"realization {i} has points outside [{a}, {b}]")

    @property
    def n(self) -> int:
        return len(self.realizations)


def full_sigma(theta: Theta) -> np.ndarray:
    """Assemble the joint score covariance from its structured blocks."""
    p1, p2 = theta.p1, theta.p2
    sigma = np.zeros((p1 + p2, p1 + p2))
    sigma[:p1, :p1] = np.diag(theta.var_u)
    sigma[p1:, p1:] = np.diag(theta.var_v)
    sigma[:p1, p1:] = theta.sigma_uv
    sigma[p1:, :p1] = theta.sigma_uv.T
    return sigma


def intensity(theta: Theta, basis: BasisSystem, u: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Conditional intensity exp(mu + u'phi) at the points ``x``."""
    u = np.asarray(u, dtype=float).reshape(theta.p1)
    coef = theta.c0 + theta.c.T @ u
    return np.exp(eval_design(basis, x) @ coef)


def mean_response(theta: Theta, basis: BasisSystem, v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Conditional mean response nu + v'psi at the points ``x``."""
    v = np.asarray(v, dtype=float).reshape(theta.p2)
    coef = theta.d0 + theta.d.T @ v
    return eval_design(basis, x) @ coef


def orthonormalize(vectors: np.ndarray, gram: np.ndarray,
                   return_map: bool = False):
    """Gram-Schmidt rows of ``vectors`` under the ``gram`` inner product.

    Implemented as a QR factorization with positive diagonal, so input
    that is already orthonormal comes back unchanged up to roundoff.
    Raises ``ValueError`` on linearly dependent input.

    With ``return_map=True`` also returns the upper-triangular ``r``
    satisfying ``vectors = r.T @ orthonormalized``; scores attached to
    the original rows transform as ``scores @ r.T`` (covariances as
    ``r @ cov @ r.T``), which is what keeps the likelihood unchanged
    when the fitter re-normalizes components.
    """
    vectors = np.asarray(vectors, dtype=float)
    if vectors.size == 0 or vectors.shape[0] == 0:
        out = vectors.reshape(vectors.shape)
        return (out, np.zeros((0, 0))) if return_map else out
    root = np.linalg.cholesky(gram).T          # gram = root' root
    qmat, rmat = np.linalg.qr(root @ vectors.T)
    diag = np.diag(rmat)
    if np.abs(diag).min() <= 1e-10 * max(np.abs(diag).max(), 1e-30):
        raise ValueError("component coefficient vectors are linearly dependent")
    signs = np.sign(diag)
    out = solve_triangular(root, qmat * signs, lower=False).T
    if return_map:
        return out, rmat * signs[:, None]
    return out


def normalize_signs(theta: Theta, tol: float = SIGN_TOL) -> Theta:
    """Flip components so each one's first nonzero coefficient is positive.

    Cross-covariance rows and columns flip along with their components.
    A component whose coefficients are all below ``tol`` in magnitude has
    no usable sign and raises ``ValueError``.
    """
    flips_u = _leading_signs(theta.c, tol)
    flips_v = _leading_signs(theta.d, tol)
    sigma_uv = flips_u[:, None] * theta.sigma_uv * flips_v[None, :]
    return replace(theta,
                   c=flips_u[:, None] * theta.c,
                   d=flips_v[:, None] * theta.d,
                   sigma_uv=sigma_uv)


def _leading_signs(rows: np.ndarray, tol: float) -> np.ndarray:
    signs = np.empty(rows.shape[0])
    for k, row in enumerate(rows):
        nonzero = np.nonzero(np.abs(row) > tol)[0]
        if nonzero.size == 0:
            raise ValueError(f"component {k + 1} has no coefficient above {tol}; "
                             "sign is undefined")
        signs[k] = np.sign(row[nonzero[0]])
    return signs


def validate_theta(theta: Theta, basis: BasisSystem, tol: float = SIGN_TOL) -> None:
    """Check the identifiability constraints; raise ``ValueError`` on failure.

    Checks J-orthonormality of each component family, strictly
    descending positive score variances, positive definiteness of the
    joint covariance, and the leading-sign convention.
    """
    if theta.q != basis.q:
        raise ValueError(f"theta has q={theta.q} but basis has q={basis.q}")
    gram = basis.gram
    for name, rows in (("intensity", theta.c), ("response", theta.d)):
        if rows.shape[0] == 0:
            continue
        gap = rows @ gram @ rows.T - np.eye(rows.shape[0])
        if np.abs(gap).max() > tol:
            raise ValueError(f"{name} components are not J-orthonormal "
                             f"(max deviation {np.abs(gap).max():.2e})")
    for name, var in (("var_u", theta.var_u), ("var_v", theta.var_v)):
        if var.size and var.min() <= 0:
            raise ValueError(f"{name} has nonpositive entries")
        if var.size > 1 and np.any(np.diff(var) >= 0):
            raise ValueError(f"{name} is not strictly descending: {var}")
    try:
        np.linalg.cholesky(full_sigma(theta))
    except np.linalg.LinAlgError:
        raise ValueError("joint score covariance is not positive definite") from None
    for rows, label in ((theta.c, "intensity"), (theta.d, "response")):
        if rows.shape[0] and np.any(_leading_signs(rows, tol) < 0):
            raise ValueError(f"a {label} component violates the leading-sign convention")


def theta_dim(p1: int, p2: int, q: int) -> int:
    return p1 * p2 + q * (1 + p1) + q * (1 + p2) + p1 + p2 + 1


def param_slices(p1: int, p2: int, q: int) -> dict[str, slice]:
    """Slices of each parameter block inside the canonical flat vector."""
    bounds, out, pos = {
        "sigma_uv": p1 * p2,
        "c0": q,
        "c": p1 * q,
        "d0": q,
        "d": p2 * q,
        "var_u": p1,
        "var_v": p2,
        "var_eta": 1,
    }, {}, 0
    for name, width in bounds.items():
        out[name] = slice(pos, pos + width)
        pos += width
    return out


def pack_theta(theta: Theta) -> np.ndarray:
    """Flatten to the canonical layout (column-major vec for sigma_uv)."""
    return np.concatenate([
        theta.sigma_uv.ravel(order="F"),
        theta.c0,
        theta.c.ravel(),
        theta.d0,
        theta.d.ravel(),
        theta.var_u,
        theta.var_v,
        [theta.var_eta],
    ])


def unpack_theta(vec: np.ndarray, p1: int, p2: int, q: int) -> Theta:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (theta_dim(p1, p2, q),):
        raise ValueError(f"expected a vector of length {theta_dim(p1, p2, q)}, "
                         f"got shape {vec.shape}")
    sl = param_slices(p1, p2, q)
    return Theta(
        sigma_uv=vec[sl["sigma_uv"]].reshape(p1, p2, order="F"),
        c0=vec[sl["c0"]],
        c=vec[sl["c"]].reshape(p1, q),
        d0=vec[sl["d0"]],
        d=vec[sl["d"]].reshape(p2, q),
        var_u=vec[sl["var_u"]],
        var_v=vec[sl["var_v"]],
        var_eta=vec[sl["var_eta"]][0],
    )


def theta_to_dict(theta: Theta, basis: BasisSystem) -> dict:
    """JSON-ready dict embedding the basis description for round trips."""
    spans = basis.interior_knots + 1
    return {
        "p1": theta.p1,
        "p2": theta.p2,
        "basis": {
            "domain": list(basis.domain),
            "interior_knots": basis.interior_knots,
            "quad_order": basis.quad_x.size // spans,
        },
        "sigma_uv": theta.sigma_uv.tolist(),
        "c0": theta.c0.tolist(),
        "c": theta.c.tolist(),
        "d0": theta.d0.tolist(),
        "d": theta.d.tolist(),
        "var_u": theta.var_u.tolist(),
        "var_v": theta.var_v.tolist(),
        "var_eta": theta.var_eta,
    }


def theta_from_dict(payload: dict) -> tuple[Theta, BasisSystem]:
    from markcov.basis import build_basis

    spec = payload["basis"]
    basis = build_basis(tuple(spec["domain"]), int(spec["interior_knots"]),
                        quad_order=int(spec.get("quad_order", 5)))
    q, p1, p2 = basis.q, int(payload["p1"]), int(payload["p2"])
    theta = Theta(
        sigma_uv=np.asarray(payload["sigma_uv"], dtype=float).reshape(p1, p2),
        c0=payload["c0"],
        c=np.asarray(payload["c"], dtype=float).reshape(p1, q),
        d0=payload["d0"],
        d=np.asarray(payload["d"], dtype=float).reshape(p2, q),
        var_u=np.asarray(payload["var_u"], dtype=float).reshape(p1),
        var_v=np.asarray(payload["var_v"], dtype=float).reshape(p2),
        var_eta=payload["var_eta"],
    )
    return theta, basis
