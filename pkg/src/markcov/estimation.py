"""Penalized maximum likelihood fitting.

The fitter alternates two block updates on the penalized Laplace
objective:

* a covariance step over the Cholesky factor of the full score
  covariance (plus the log residual variance), which keeps the
  covariance unrestricted SPD while the coefficients stay fixed;
* a coefficient step over all spline coefficients with the covariance
  fixed, followed by a retraction onto the constraint set.

The retraction (Gram-Schmidt under the basis Gram matrix, block
diagonalization of the score covariance, and sign normalization) is a
linear reparameterization of the latent scores, so it leaves the
Laplace likelihood exactly unchanged; only the roughness penalty can
move, and a step-halving guard keeps the objective from decreasing
beyond roundoff.  Every outer iteration therefore ends at a parameter
point satisfying all identifiability constraints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from markcov.basis import BasisSystem
from markcov.likelihood import (
    ETA_CAP,
    LikelihoodWorkspace,
    ModelParams,
    evaluate,
    objective_and_gradient,
)
from markcov.model import (
    Dataset,
    Theta,
    normalize_signs,
    orthonormalize,
    param_slices,
)

VAR_FLOOR = 1e-8        # during estimation
INIT_VAR_FLOOR = 1e-4   # for initial score variances
ASCENT_GUARD = 1e-8     # relative tolerance for "nondecreasing" objective


@dataclass
class FitConfig:
    """Settings for one model fit."""

    p1: int = 2
    p2: int = 2
    xi: tuple[float, float, float, float] = (1e-4, 1e-4, 1e-6, 1e-4)
    max_outer_iters: int = 200
    tol: float = 1e-6
    seed: int = 0
    mode_tol: float = 1e-9
    coef_maxiter: int = 40
    cov_maxiter: int = 30


@dataclass
class FitResult:
    """Fitted parameters with the objective trace and score predictions."""

    theta: Theta
    objective: float
    trace: np.ndarray
    converged: bool
    n_outer: int
    scores_u: np.ndarray
    scores_v: np.ndarray


def _desc_eigh(mat: np.ndarray):
    if mat.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    order = np.argsort(-vals)
    return vals[order], vecs[:, order]


def _floor_strict(vals: np.ndarray, floor: float) -> np.ndarray:
    vals = np.maximum(np.asarray(vals, dtype=float), floor)
    for k in range(1, vals.size):
        if vals[k] >= vals[k - 1]:
            vals[k] = vals[k - 1] * (1.0 - 1e-9 * k)
    return vals


def _canonicalize(par: ModelParams, basis: BasisSystem,
                  floor: float = VAR_FLOOR) -> tuple[Theta, np.ndarray]:
    """Map engine parameters onto the constraint set.

    Returns the constrained Theta and the total linear score transform
    ``T`` (new scores = T @ old scores), which callers use to carry
    cached posterior modes across the reparameterization.
    """
    p1, p2 = par.p1, par.p2
    p = p1 + p2
    c_on, rc = orthonormalize(par.c, basis.gram, return_map=True)
    d_on, rd = orthonormalize(par.d, basis.gram, return_map=True)
    T = np.zeros((p, p))
    T[:p1, :p1] = rc
    T[p1:, p1:] = rd
    sigma = T @ par.sigma @ T.T

    lu, qu = _desc_eigh(sigma[:p1, :p1])
    lv, qv = _desc_eigh(sigma[p1:, p1:])
    rot = np.zeros((p, p))
    rot[:p1, :p1] = qu.T
    rot[p1:, p1:] = qv.T
    theta = Theta(sigma_uv=qu.T @ sigma[:p1, p1:] @ qv,
                  c0=par.c0, c=qu.T @ c_on, d0=par.d0, d=qv.T @ d_on,
                  var_u=_floor_strict(lu, floor), var_v=_floor_strict(lv, floor),
                  var_eta=par.var_eta)
    before_c, before_d = theta.c.copy(), theta.d.copy()
    theta = normalize_signs(theta)
    signs = np.ones(p)
    if p1:
        signs[:p1] = np.where(np.abs(before_c - theta.c).max(axis=1) > 0, -1.0, 1.0)
    if p2:
        signs[p1:] = np.where(np.abs(before_d - theta.d).max(axis=1) > 0, -1.0, 1.0)
    return theta, signs[:, None] * (rot @ T)


class _Objective:
    """Shared evaluation state for the block updates of one fit."""

    def __init__(self, ws: LikelihoodWorkspace, basis: BasisSystem, config: FitConfig):
        self.ws = ws
        self.basis = basis
        self.config = config
        self.sl = param_slices(config.p1, config.p2, basis.q)

    def value_and_grad(self, par: ModelParams):
        return objective_and_gradient(self.ws, par, self.basis, self.config.xi,
                                      warm=True, mode_tol=self.config.mode_tol)


def _cov_step(obj: _Objective, par: ModelParams, value_in: float):
    """Update the full score covariance and residual variance.

    The search runs over the Cholesky factor with log diagonal, boxed
    to keep every trial covariance comfortably invertible; a trial
    point that still defeats the linear algebra scores as a large
    finite penalty so the line search backs off.
    """
    p = par.p1 + par.p2
    tri = np.tril_indices(p)
    diag_pos = np.nonzero(tri[0] == tri[1])[0]
    L0 = np.linalg.cholesky(par.sigma) if p else np.zeros((0, 0))

    def pack(L, se):
        z = L[tri]
        z[diag_pos] = np.log(np.clip(z[diag_pos], 1e-8, None))
        return np.append(z, np.log(se))

    def unpack(z):
        L = np.zeros((p, p))
        L[tri] = z[:-1]
        L[tri[0][diag_pos], tri[1][diag_pos]] = np.exp(z[:-1][diag_pos])
        return L, float(np.exp(z[-1]))

    bounds = [(-30.0, 30.0)] * (tri[0].size + 1)
    for j in diag_pos:
        bounds[j] = (np.log(np.sqrt(VAR_FLOOR)), np.log(1e3))
    bounds[-1] = (np.log(1e-8), np.log(1e6))

    def negative(z):
        L, se = unpack(z)
        sigma = L @ L.T
        trial = dataclasses.replace(par, sigma=(sigma + sigma.T) / 2.0, var_eta=se)
        try:
            value, _, res = obj.value_and_grad(trial)
        except np.linalg.LinAlgError:
            return 1e30, np.zeros(z.size)
        gmat = 2.0 * res.grads.sigma.mean(axis=0) @ L
        gz = gmat[tri]
        gz[diag_pos] *= L[tri[0][diag_pos], tri[1][diag_pos]]
        ge = res.grads.var_eta.mean() * se
        return -value, -np.append(gz, ge)

    z0 = np.clip(pack(L0, par.var_eta),
                 [b[0] for b in bounds], [b[1] for b in bounds])
    out = minimize(negative, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": obj.config.cov_maxiter})
    value_new = -float(out.fun)
    if value_new < value_in - ASCENT_GUARD * (1.0 + abs(value_in)):
        return par, value_in
    L, se = unpack(out.x)
    sigma = L @ L.T
    return dataclasses.replace(par, sigma=(sigma + sigma.T) / 2.0, var_eta=se), value_new


def _coef_step(obj: _Objective, par: ModelParams, value_in: float):
    """Update all spline coefficients, then retract onto the constraints."""
    q = obj.basis.q
    p1, p2 = par.p1, par.p2
    sl = obj.sl
    lo, hi = sl["c0"].start, sl["d"].stop

    def with_coeffs(z):
        c0 = z[:q]
        c = z[q:q + p1 * q].reshape(p1, q)
        d0 = z[q + p1 * q:2 * q + p1 * q]
        d = z[2 * q + p1 * q:].reshape(p2, q)
        return dataclasses.replace(par, c0=c0, c=c, d0=d0, d=d)

    def negative(z):
        try:
            value, grad, _ = obj.value_and_grad(with_coeffs(z))
        except np.linalg.LinAlgError:
            return 1e30, np.zeros(z.size)
        return -value, -grad[lo:hi]

    z0 = np.concatenate([par.c0, par.c.ravel(), par.d0, par.d.ravel()])
    out = minimize(negative, z0, jac=True, method="L-BFGS-B",
                   options={"maxiter": obj.config.coef_maxiter})
    z1 = out.x

    cache = None if obj.ws._mode_cache is None else obj.ws._mode_cache.copy()
    guard = ASCENT_GUARD * (1.0 + abs(value_in))
    for frac in [1.0, 0.5, 0.25, 0.125, 1 / 16, 1 / 64, 1 / 256, 0.0]:
        theta_t, T = _canonicalize(with_coeffs(z0 + frac * (z1 - z0)), obj.basis)
        if cache is not None:
            obj.ws._mode_cache = cache @ T.T
        trial = ModelParams.from_theta(theta_t)
        value_t, _, _ = obj.value_and_grad(trial)
        if value_t >= value_in - guard:
            return theta_t, trial, value_t
    # unreachable in practice: frac = 0 reproduces the incoming point
    theta_t, T = _canonicalize(par, obj.basis)
    if cache is not None:
        obj.ws._mode_cache = cache @ T.T
    trial = ModelParams.from_theta(theta_t)
    value_t, _, _ = obj.value_and_grad(trial)
    return theta_t, trial, value_t


def fit(data: Dataset, basis: BasisSystem, config: FitConfig,
        init: Theta | None = None) -> FitResult:
    """Fit the model by alternating block maximization.

    Parameters
    ----------
    data, basis : the observations and the spline basis.
    config : FitConfig
        Component counts, penalty weights, and iteration controls.
    init : Theta, optional
        Starting point; defaults to ``initialize(data, basis, config)``.

    Returns
    -------
    FitResult
        Constrained estimate, objective trace (one entry per outer
        iteration), convergence flag, and posterior-mode scores.
    """
    _check_config(config, basis)
    ws = LikelihoodWorkspace(data, basis)
    obj = _Objective(ws, basis, config)
    theta = init if init is not None else initialize(data, basis, config)
    theta, _ = _canonicalize(ModelParams.from_theta(theta), basis)
    par = ModelParams.from_theta(theta)

    value, _, _ = obj.value_and_grad(par)
    trace = [value]
    converged = False
    outer = 0
    for outer in range(1, config.max_outer_iters + 1):
        par, value = _cov_step(obj, par, value)
        theta, par, value = _coef_step(obj, par, value)
        trace.append(value)
        if abs(trace[-1] - trace[-2]) <= config.tol * (1.0 + abs(trace[-1])):
            converged = True
            break

    final = evaluate(ws, par, warm=True, mode_tol=config.mode_tol)
    return FitResult(theta=theta, objective=value, trace=np.asarray(trace),
                     converged=converged, n_outer=outer,
                     scores_u=final.modes[:, :config.p1].copy(),
                     scores_v=final.modes[:, config.p1:].copy())


def _check_config(config: FitConfig, basis: BasisSystem) -> None:
    if config.p1 < 0 or config.p2 < 0:
        raise ValueError("component counts must be nonnegative")
    if max(config.p1, config.p2) > basis.q:
        raise ValueError(f"cannot request more than q={basis.q} components")
    if len(tuple(config.xi)) != 4 or any(x < 0 for x in config.xi):
        raise ValueError("xi must be four nonnegative penalty weights")


# ---------------------------------------------------------------------------
# Initialization.

def initialize(data: Dataset, basis: BasisSystem, config: FitConfig) -> Theta:
    """Build a constraint-satisfying starting point from cheap fits.

    Pooled penalized fits give the baseline curves; per-subject fits on
    subjects with at least four points give coefficient deviations whose
    principal directions under the Gram inner product seed the
    components, score variances, and cross-covariance.  Falls back to
    deterministic polynomial-like seeds when too few subjects qualify.
    """
    if data.n < 2:
        raise ValueError("initialization needs at least two subjects")
    _check_config(config, basis)
    ws = LikelihoodWorkspace(data, basis)
    rng = np.random.default_rng(config.seed)
    q, n = basis.q, data.n
    p1, p2 = config.p1, config.p2
    J, omega = basis.gram, basis.roughness
    xi = tuple(float(z) for z in config.xi)

    total_m = float(ws.m.sum())
    span = basis.domain[1] - basis.domain[0]
    c_start = np.full(q, np.log(max(total_m / max(n * span, 1e-12), 0.1)))
    pen_c0 = xi[0] * omega + 1e-10 * J
    c0 = _poisson_fits(ws.S1.sum(axis=0)[None, :] / n, ws.GQ, ws.wQ, pen_c0,
                       c_start)[0]

    gg_sum, gy_sum = ws.GG.sum(axis=0), ws.Gy.sum(axis=0)
    ridge = n * xi[2] * omega + 1e-9 * max(np.trace(gg_sum), 1.0) * J
    d0 = np.linalg.solve(gg_sum + ridge, gy_sum)

    eligible = np.nonzero(ws.m >= 4)[0]
    have_subjects = eligible.size >= 2

    if p1 and have_subjects:
        pen_c = 0.01 * omega + 1e-8 * J
        a_fits = _poisson_fits(ws.S1[eligible], ws.GQ, ws.wQ, pen_c, c0)
        c, var_u, u0 = _principal_directions(a_fits, J, p1, rng)
    else:
        c, var_u, u0 = _fallback_components(basis, p1, rng), \
            0.01 * 0.6 ** np.arange(p1), np.zeros((eligible.size, p1))

    if p2 and have_subjects:
        e_fits = np.zeros((eligible.size, q))
        tr_omega = max(np.trace(omega), 1e-12)
        for idx, i in enumerate(eligible):
            kappa = 0.05 * np.trace(ws.GG[i]) / tr_omega
            lhs = ws.GG[i] + kappa * omega + 1e-8 * np.trace(ws.GG[i]) * J
            e_fits[idx] = np.linalg.solve(lhs, ws.Gy[i] - ws.GG[i] @ d0)
        d, var_v, v0 = _principal_directions(e_fits, J, p2, rng)
    else:
        d, var_v, v0 = _fallback_components(basis, p2, rng), \
            0.01 * 0.6 ** np.arange(p2), np.zeros((eligible.size, p2))

    var_u = _floor_strict(var_u, INIT_VAR_FLOOR)
    var_v = _floor_strict(var_v, INIT_VAR_FLOOR)

    if u0.shape[0] >= 2 and p1 and p2:
        uc = u0 - u0.mean(axis=0)
        vc = v0 - v0.mean(axis=0)
        sigma_uv = 0.5 * uc.T @ vc / max(u0.shape[0] - 1, 1)
    else:
        sigma_uv = np.zeros((p1, p2))
    sigma_uv = _shrink_to_pd(sigma_uv, var_u, var_v)

    var_eta = _residual_variance(ws, d0, d, v0, eligible)

    theta = Theta(sigma_uv=sigma_uv, c0=c0, c=c, d0=d0, d=d,
                  var_u=var_u, var_v=var_v, var_eta=var_eta)
    return normalize_signs(theta)


def _poisson_fits(targets: np.ndarray, GQ: np.ndarray, wQ: np.ndarray,
                  pen: np.ndarray, start: np.ndarray, max_iter: int = 60,
                  tol: float = 1e-9) -> np.ndarray:
    """Damped Newton for penalized log-linear Poisson fits, batched over
    rows of ``targets`` (each row is a summed-design vector)."""
    k, q = targets.shape
    C = np.tile(np.asarray(start, dtype=float), (k, 1))

    def value(Cm):
        lamw = np.exp(np.minimum(Cm @ GQ.T, ETA_CAP)) * wQ[None, :]
        return (np.sum(targets * Cm, axis=1) - lamw.sum(axis=1)
                - np.einsum("kq,qr,kr->k", Cm, pen, Cm))

    val = value(C)
    for _ in range(max_iter):
        lamw = np.exp(np.minimum(C @ GQ.T, ETA_CAP)) * wQ[None, :]
        grad = targets - lamw @ GQ - 2.0 * C @ pen
        if np.abs(grad).max() <= tol:
            break
        hess = np.einsum("ka,aq,ar->kqr", lamw, GQ, GQ) + 2.0 * pen[None, :, :]
        step = np.linalg.solve(hess, grad[:, :, None])[:, :, 0]
        scale = np.ones((k, 1))
        pending = np.ones(k, dtype=bool)
        for _ in range(40):
            trial = C + scale * step
            val_try = value(trial)
            accept = pending & (val_try >= val - 1e-12 * (1.0 + np.abs(val)))
            C[accept] = trial[accept]
            val[accept] = val_try[accept]
            pending &= ~accept
            if not pending.any():
                break
            scale[pending] *= 0.5
    return C


def _principal_directions(coef_fits: np.ndarray, J: np.ndarray, p: int, rng):
    """Leading principal directions of coefficient deviations under J."""
    centered = coef_fits - coef_fits.mean(axis=0)
    cov = centered.T @ centered / max(coef_fits.shape[0] - 1, 1)
    root = np.linalg.cholesky(J).T
    vals, vecs = _desc_eigh(root @ cov @ root.T)
    if p > vals.size:
        raise ValueError("more components requested than basis dimension")
    rows = solve_triangular(root, vecs[:, :p], lower=False).T
    scores = centered @ J @ rows.T
    return rows, np.maximum(vals[:p], 0.0), scores


def _fallback_components(basis: BasisSystem, p: int, rng) -> np.ndarray:
    from markcov.basis import greville_abscissae

    if p == 0:
        return np.zeros((0, basis.q))
    grev = greville_abscissae(basis)
    seeds = np.stack([grev ** (k + 1) for k in range(p)])
    seeds = seeds + 1e-6 * rng.standard_normal(seeds.shape)
    return orthonormalize(seeds, basis.gram)


def _shrink_to_pd(sigma_uv: np.ndarray, var_u: np.ndarray,
                  var_v: np.ndarray) -> np.ndarray:
    p1, p2 = var_u.size, var_v.size
    if p1 == 0 or p2 == 0:
        return np.zeros((p1, p2))
    for _ in range(80):
        sigma = np.zeros((p1 + p2, p1 + p2))
        sigma[:p1, :p1] = np.diag(var_u)
        sigma[p1:, p1:] = np.diag(var_v)
        sigma[:p1, p1:] = sigma_uv
        sigma[p1:, :p1] = sigma_uv.T
        if np.linalg.eigvalsh(sigma).min() > 1e-8:
            return sigma_uv
        sigma_uv = 0.5 * sigma_uv
    return np.zeros((p1, p2))


def _residual_variance(ws: LikelihoodWorkspace, d0: np.ndarray, d: np.ndarray,
                       v0: np.ndarray, eligible: np.ndarray) -> float:
    ssr = 0.0
    count = 0.0
    if eligible.size and d.shape[0] and v0.shape[0] == eligible.size:
        for idx, i in enumerate(eligible):
            coef = d0 + d.T @ v0[idx]
            ssr += ws.yy[i] - 2.0 * ws.Gy[i] @ coef + coef @ ws.GG[i] @ coef
            count += ws.m[i]
    else:
        for i in range(ws.n):
            if ws.m[i] == 0:
                continue
            ssr += ws.yy[i] - 2.0 * ws.Gy[i] @ d0 + d0 @ ws.GG[i] @ d0
            count += ws.m[i]
    if count == 0:
        return 1.0
    return float(max(ssr / count, INIT_VAR_FLOOR))
