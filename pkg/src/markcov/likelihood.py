"""Laplace-approximate likelihood of the joint intensity/response model.

For subject i with event locations x_i, responses y_i, and latent scores
w = (u, v), the complete-data log density is

    h_i(w) = sum_j log lambda_u(x_ij) - int lambda_u - log m_i!
             - ||y_i - nu(x_i) - Psi(x_i) v||^2 / (2 var_eta)
             - (m_i / 2) log(2 pi var_eta)
             - w' Sigma^{-1} w / 2 - (p/2) log 2 pi - (1/2) log det Sigma.

The marginal density of the observables integrates w out; we approximate
it by Laplace's method at the posterior mode w_hat:

    log f_hat = h_i(w_hat) + (p/2) log 2 pi - (1/2) log det H_i,

where H_i = -(d^2 h_i / dw dw') is positive definite for every parameter
value (intensity curvature plus response curvature plus Sigma^{-1}), so
h_i is strictly concave and damped Newton finds the unique mode from any
start.

Everything reduces to per-subject sufficient statistics (sums of basis
rows, their outer products, and cross products with responses) cached in
a LikelihoodWorkspace.  Evaluations are batched over subjects with no
per-subject Python loop, which also fixes the reduction order and keeps
results reproducible to the bit.

The gradient is the exact derivative of the Laplace objective: it
differentiates through both the mode location and the log-determinant,
so it agrees with finite differences of the objective to floating-point
accuracy rather than only to the order of the approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import gammaln

from markcov.basis import BasisSystem, eval_design, penalty_value
from markcov.model import (
    Dataset,
    MarkedRealization,
    Theta,
    full_sigma,
    param_slices,
)

LOG_2PI = np.log(2.0 * np.pi)
# Log-intensity values beyond this are clipped inside exp() so damped
# steps through absurd territory stay finite; never active near a mode.
ETA_CAP = 300.0


@dataclass
class PosteriorMode:
    """Posterior mode of the latent scores for one subject."""

    u: np.ndarray
    v: np.ndarray
    neg_hessian: np.ndarray
    log_joint: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class ModelParams:
    """Engine-level parameters: like Theta but with an unrestricted
    symmetric positive definite score covariance, which the covariance
    update block of the fitter needs."""

    c0: np.ndarray
    c: np.ndarray          # (p1, q)
    d0: np.ndarray
    d: np.ndarray          # (p2, q)
    sigma: np.ndarray      # (p1 + p2, p1 + p2)
    var_eta: float

    @classmethod
    def from_theta(cls, theta: Theta) -> "ModelParams":
        return cls(c0=theta.c0, c=theta.c, d0=theta.d0, d=theta.d,
                   sigma=full_sigma(theta), var_eta=theta.var_eta)

    @property
    def p1(self) -> int:
        return self.c.shape[0]

    @property
    def p2(self) -> int:
        return self.d.shape[0]


@dataclass
class GradParts:
    """Per-subject gradients of the Laplace log-likelihood.

    ``sigma`` holds the symmetrized gradient with respect to the full
    covariance matrix; structured derivatives (score variances and
    cross-covariances) are entries or doubled off-entries of it.
    """

    c0: np.ndarray       # (n, q)
    c: np.ndarray        # (n, p1, q)
    d0: np.ndarray       # (n, q)
    d: np.ndarray        # (n, p2, q)
    sigma: np.ndarray    # (n, p, p)
    var_eta: np.ndarray  # (n,)

    def theta_rows(self) -> np.ndarray:
        """Map to rows in the canonical flat Theta layout."""
        n, p1, q = self.c.shape
        p2 = self.d.shape[1]
        suv = 2.0 * self.sigma[:, :p1, p1:]                      # (n, p1, p2)
        suv_vec = suv.transpose(0, 2, 1).reshape(n, p1 * p2)     # column-major
        var_u = self.sigma[:, np.arange(p1), np.arange(p1)]
        var_v = self.sigma[:, p1 + np.arange(p2), p1 + np.arange(p2)]
        return np.concatenate([
            suv_vec,
            self.c0,
            self.c.reshape(n, p1 * q),
            self.d0,
            self.d.reshape(n, p2 * q),
            var_u,
            var_v,
            self.var_eta[:, None],
        ], axis=1)


@dataclass
class EngineResult:
    ll: np.ndarray              # (n,) per-subject Laplace log-likelihood
    modes: np.ndarray           # (n, p)
    neg_hessians: np.ndarray    # (n, p, p)
    newton_converged: np.ndarray
    grads: GradParts | None = None


class LikelihoodWorkspace:
    """Sufficient statistics of a dataset under a basis.

    Stores, per subject, the point count, the summed basis rows, their
    Gram matrix, the response cross products, and the squared response
    norm; plus the shared quadrature design.  Every likelihood quantity
    in this module is a function of these alone.
    """

    def __init__(self, data: Dataset, basis: BasisSystem):
        n, q = data.n, basis.q
        self.n, self.q = n, q
        self.m = np.array([obs.m for obs in data.realizations], dtype=float)
        self.S1 = np.zeros((n, q))
        self.GG = np.zeros((n, q, q))
        self.Gy = np.zeros((n, q))
        self.yy = np.zeros(n)
        for i, obs in enumerate(data.realizations):
            if obs.m == 0:
                continue
            design = eval_design(basis, obs.x)
            self.S1[i] = design.sum(axis=0)
            self.GG[i] = design.T @ design
            self.Gy[i] = design.T @ obs.y
            self.yy[i] = obs.y @ obs.y
        self.lgamma_m = gammaln(self.m + 1.0)
        self.GQ = eval_design(basis, basis.quad_x)
        self.wQ = np.asarray(basis.quad_w)
        self._mode_cache: np.ndarray | None = None


class _Tables:
    """Per-evaluation precomputations for one parameter value."""

    def __init__(self, ws: LikelihoodWorkspace, par: ModelParams):
        self.par = par
        self.p1, self.p2 = par.p1, par.p2
        self.p = self.p1 + self.p2
        self.muQ = ws.GQ @ par.c0                                    # (Q,)
        self.PhiQ = ws.GQ @ par.c.T                                  # (Q, p1)
        self.CS1 = ws.S1 @ par.c.T                                   # (n, p1)
        self.S1c0 = ws.S1 @ par.c0                                   # (n,)
        self.Gyd = ws.Gy - np.einsum("nab,b->na", ws.GG, par.d0)     # (n, q)
        self.avec = self.Gyd @ par.d.T                               # (n, p2)
        self.MG = np.einsum("ka,nab,lb->nkl", par.d, ws.GG, par.d)   # (n, p2, p2)
        self.rho_y = ws.yy - 2.0 * ws.Gy @ par.d0 \
            + np.einsum("a,nab,b->n", par.d0, ws.GG, par.d0)         # (n,)
        sigma = np.asarray(par.sigma, dtype=float)
        if self.p:
            chol = np.linalg.cholesky(sigma)
            self.logdet_sigma = 2.0 * np.sum(np.log(np.diag(chol)))
            self.Sinv = cho_solve((chol, True), np.eye(self.p))
        else:
            self.logdet_sigma = 0.0
            self.Sinv = np.zeros((0, 0))
        self.se = float(par.var_eta)


def _split(tables: _Tables, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return W[:, :tables.p1], W[:, tables.p1:]


def _h_values(ws: LikelihoodWorkspace, t: _Tables, W: np.ndarray) -> np.ndarray:
    U, V = _split(t, W)
    eta = t.muQ[None, :] + U @ t.PhiQ.T
    om = np.exp(np.minimum(eta, ETA_CAP)) * ws.wQ[None, :]
    point = t.S1c0 + np.sum(t.CS1 * U, axis=1) - om.sum(axis=1) - ws.lgamma_m
    rnorm2 = t.rho_y - 2.0 * np.sum(V * t.avec, axis=1) \
        + np.einsum("nk,nkl,nl->n", V, t.MG, V)
    resp = -0.5 * rnorm2 / t.se - 0.5 * ws.m * (LOG_2PI + np.log(t.se))
    wSw = np.einsum("np,pr,nr->n", W, t.Sinv, W)
    prior = -0.5 * wSw - 0.5 * t.p * LOG_2PI - 0.5 * t.logdet_sigma
    return point + resp + prior


def _grad_hess(ws, t, W):
    U, V = _split(t, W)
    eta = t.muQ[None, :] + U @ t.PhiQ.T
    om = np.exp(np.minimum(eta, ETA_CAP)) * ws.wQ[None, :]
    WS = W @ t.Sinv
    grad_u = t.CS1 - om @ t.PhiQ - WS[:, :t.p1]
    grad_v = (t.avec - np.einsum("nkl,nl->nk", t.MG, V)) / t.se - WS[:, t.p1:]
    grad = np.concatenate([grad_u, grad_v], axis=1)
    n = W.shape[0]
    H = np.tile(t.Sinv, (n, 1, 1))
    H[:, :t.p1, :t.p1] += np.einsum("na,ak,al->nkl", om, t.PhiQ, t.PhiQ)
    H[:, t.p1:, t.p1:] += t.MG / t.se
    return grad, H, om


def _find_modes(ws, t, W0=None, tol=1e-9, max_iter=100):
    n, p = ws.n, t.p
    W = np.zeros((n, p)) if W0 is None else np.array(W0, dtype=float)
    if p == 0:
        h = _h_values(ws, t, W)
        return W, np.zeros((n, 0, 0)), h, np.ones(n, dtype=bool), 0
    h = _h_values(ws, t, W)
    converged = np.zeros(n, dtype=bool)
    frozen = np.zeros(n, dtype=bool)
    H = None
    iters = 0
    for iters in range(1, max_iter + 1):
        grad, H, _ = _grad_hess(ws, t, W)
        converged = (np.abs(grad).max(axis=1) <= tol) | frozen
        if converged.all():
            break
        step = np.linalg.solve(H, grad[:, :, None])[:, :, 0]
        # Newton decrement = attainable improvement; once it drops below
        # the float noise of h the residual gradient is pure roundoff
        # and iterating further just burns halvings.
        decrement = 0.5 * np.sum(step * grad, axis=1)
        converged |= decrement <= 4.0 * np.finfo(float).eps * (1.0 + np.abs(h))
        if converged.all():
            break
        # Damp steps that would swing the log-intensity by more than 20:
        # beyond that exp() explodes and the halving loop would spend
        # dozens of rounds walking the step back down.
        if t.p1:
            swing = np.abs(step[:, :t.p1] @ t.PhiQ.T).max(axis=1)
            scale = np.minimum(1.0, 20.0 / np.maximum(swing, 1e-12))[:, None]
        else:
            scale = np.ones((n, 1))
        pending = ~converged
        W_new, h_new = W.copy(), h.copy()
        for _ in range(50):
            trial = W + scale * step
            h_try = _h_values(ws, t, trial)
            accept = pending & (h_try >= h - 1e-10 * (1.0 + np.abs(h)))
            W_new[accept] = trial[accept]
            h_new[accept] = h_try[accept]
            pending = pending & ~accept
            if not pending.any():
                break
            scale[pending] *= 0.5
        # A subject whose ladder produced no actual increase is pinned at
        # the float-precision mode (the same step would be recomputed and
        # go nowhere forever): stop stepping it.
        frozen |= ~converged & (h_new <= h)
        W, h = W_new, h_new
    if H is None or not converged.all():
        grad, H, _ = _grad_hess(ws, t, W)
        converged = (np.abs(grad).max(axis=1) <= tol) | frozen
    return W, H, h, converged, iters


def _laplace_from_modes(t, H, h):
    if t.p == 0:
        return h.copy()
    chol = np.linalg.cholesky(H)
    half_logdet = np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    return h + 0.5 * t.p * LOG_2PI - half_logdet


def _score_parts(ws, t, W, H) -> GradParts:
    n, q = ws.n, ws.q
    p1, p2, p = t.p1, t.p2, t.p
    U, V = _split(t, W)
    eta = t.muQ[None, :] + U @ t.PhiQ.T
    om = np.exp(np.minimum(eta, ETA_CAP)) * ws.wQ[None, :]
    P = np.linalg.inv(H) if p else np.zeros((n, 0, 0))
    Puu, Pvv = P[:, :p1, :p1], P[:, p1:, p1:]

    base = ws.S1 - om @ ws.GQ                                     # (n, q)
    rho = np.einsum("ak,nkl,al->na", t.PhiQ, Puu, t.PhiQ)         # (n, Q)
    zeta = np.einsum("al,nkl->nak", t.PhiQ, Puu)                  # (n, Q, p1)
    tau = np.einsum("na,na,ak->nk", om, rho, t.PhiQ)              # (n, p1)
    tstar = np.einsum("npk,nk->np", P[:, :, :p1], tau) if p else np.zeros((n, 0))
    tsu, tsv = tstar[:, :p1], tstar[:, p1:]
    phits = tsu @ t.PhiQ.T                                        # (n, Q)
    om_phits_G = (om * phits) @ ws.GQ                              # (n, q)

    g_c0 = base - 0.5 * ((om * rho) @ ws.GQ) + 0.5 * om_phits_G
    inner = 0.5 * U[:, None, :] * rho[:, :, None] + zeta
    g_c = (U[:, :, None] * base[:, None, :]
           - np.einsum("na,nak,ar->nkr", om, inner, ws.GQ)
           - 0.5 * tsu[:, :, None] * base[:, None, :]
           + 0.5 * U[:, :, None] * om_phits_G[:, None, :])

    Gyr = t.Gyd - np.einsum("nab,nb->na", ws.GG, V @ t.par.d)     # (n, q) = Gamma' resid
    GGDt = np.einsum("nab,nb->na", ws.GG, tsv @ t.par.d)
    g_d0 = (Gyr + 0.5 * GGDt) / t.se
    DPvv = np.einsum("kb,nkl->nbl", t.par.d, Pvv)                 # (n, q, p2)
    GDP = np.einsum("nab,nbl->nal", ws.GG, DPvv)                  # (n, q, p2)
    g_d = (V[:, :, None] * Gyr[:, None, :]
           - GDP.transpose(0, 2, 1)
           - 0.5 * tsv[:, :, None] * Gyr[:, None, :]
           + 0.5 * V[:, :, None] * GGDt[:, None, :]) / t.se

    ar = Gyr @ t.par.d.T                                           # (n, p2)
    rnorm2 = t.rho_y - 2.0 * np.sum(V * t.avec, axis=1) \
        + np.einsum("nk,nkl,nl->n", V, t.MG, V)
    g_eta = (-0.5 * ws.m / t.se + 0.5 * rnorm2 / t.se**2
             + 0.5 * np.einsum("nkl,nkl->n", Pvv, t.MG) / t.se**2
             + 0.5 * np.sum(tsv * ar, axis=1) / t.se**2)

    Sw = W @ t.Sinv
    St = tstar @ t.Sinv
    SPS = np.einsum("ab,nbc,cd->nad", t.Sinv, P, t.Sinv) if p else P
    g_sigma = (-0.5 * t.Sinv[None, :, :]
               + 0.5 * np.einsum("na,nb->nab", Sw, Sw)
               + 0.5 * SPS
               - 0.25 * (np.einsum("na,nb->nab", St, Sw)
                         + np.einsum("na,nb->nab", Sw, St)))
    return GradParts(c0=g_c0, c=g_c, d0=g_d0, d=g_d, sigma=g_sigma, var_eta=g_eta)


def evaluate(ws: LikelihoodWorkspace, par: ModelParams, *, grad: bool = False,
             warm: bool = True, mode_tol: float = 1e-9) -> EngineResult:
    """Laplace log-likelihood (and optionally per-subject gradients) for
    every subject in the workspace, batched."""
    t = _Tables(ws, par)
    W0 = ws._mode_cache if warm else None
    if W0 is not None and W0.shape != (ws.n, t.p):
        W0 = None
    W, H, h, conv, _ = _find_modes(ws, t, W0, tol=mode_tol)
    if warm:
        ws._mode_cache = W.copy()
    ll = _laplace_from_modes(t, H, h)
    parts = _score_parts(ws, t, W, H) if grad else None
    return EngineResult(ll=ll, modes=W, neg_hessians=H, newton_converged=conv,
                        grads=parts)


def penalty(basis: BasisSystem, par, xi) -> float:
    """Total roughness penalty for the four coefficient groups."""
    xi1, xi2, xi3, xi4 = (float(z) for z in xi)
    total = xi1 * penalty_value(basis, par.c0) + xi3 * penalty_value(basis, par.d0)
    total += xi2 * sum(penalty_value(basis, row) for row in par.c)
    total += xi4 * sum(penalty_value(basis, row) for row in par.d)
    return total


def penalty_grad_rows(basis: BasisSystem, par, xi) -> dict[str, np.ndarray]:
    """Gradient of the penalty per coefficient group (2 xi Omega coef)."""
    omega = basis.roughness
    xi1, xi2, xi3, xi4 = (float(z) for z in xi)
    return {
        "c0": 2.0 * xi1 * (omega @ par.c0),
        "c": 2.0 * xi2 * (par.c @ omega),
        "d0": 2.0 * xi3 * (omega @ par.d0),
        "d": 2.0 * xi4 * (par.d @ omega),
    }


# ---------------------------------------------------------------------------
# Public single-subject and dataset-level wrappers.

def log_joint(theta: Theta, basis: BasisSystem, obs: MarkedRealization,
              u: np.ndarray, v: np.ndarray) -> float:
    """Complete-data log density of one subject at fixed scores (u, v)."""
    ws = LikelihoodWorkspace(Dataset((obs,), basis.domain), basis)
    t = _Tables(ws, ModelParams.from_theta(theta))
    w = np.concatenate([np.asarray(u, dtype=float).reshape(theta.p1),
                        np.asarray(v, dtype=float).reshape(theta.p2)])
    return float(_h_values(ws, t, w[None, :])[0])


def posterior_mode(theta: Theta, basis: BasisSystem, obs: MarkedRealization,
                   tol: float = 1e-9, max_iter: int = 100) -> PosteriorMode:
    """Unique maximizer of the complete-data log density over the scores."""
    ws = LikelihoodWorkspace(Dataset((obs,), basis.domain), basis)
    t = _Tables(ws, ModelParams.from_theta(theta))
    W, H, h, conv, iters = _find_modes(ws, t, tol=tol, max_iter=max_iter)
    return PosteriorMode(u=W[0, :theta.p1].copy(), v=W[0, theta.p1:].copy(),
                         neg_hessian=H[0], log_joint=float(h[0]),
                         converged=bool(conv[0]), iterations=iters)


def predict_scores(theta: Theta, basis: BasisSystem,
                   obs: MarkedRealization) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mode score predictions for one subject."""
    mode = posterior_mode(theta, basis, obs)
    return mode.u, mode.v


def laplace_loglik(theta: Theta, basis: BasisSystem, obs: MarkedRealization) -> float:
    """Laplace-approximate marginal log density of one subject."""
    ws = LikelihoodWorkspace(Dataset((obs,), basis.domain), basis)
    res = evaluate(ws, ModelParams.from_theta(theta), warm=False)
    return float(res.ll[0])


def dataset_loglik(theta: Theta, basis: BasisSystem, data: Dataset) -> np.ndarray:
    """Per-subject Laplace log-likelihoods for a whole dataset."""
    ws = LikelihoodWorkspace(data, basis)
    return evaluate(ws, ModelParams.from_theta(theta), warm=False).ll


def penalized_loglik(theta: Theta, basis: BasisSystem, data: Dataset, xi) -> float:
    """Mean Laplace log-likelihood minus the roughness penalties."""
    par = ModelParams.from_theta(theta)
    ws = LikelihoodWorkspace(data, basis)
    res = evaluate(ws, par, warm=False)
    return float(res.ll.mean() - penalty(basis, par, xi))


def objective_and_gradient(ws: LikelihoodWorkspace, par: ModelParams, basis: BasisSystem,
                           xi, *, warm: bool = True,
                           mode_tol: float = 1e-9) -> tuple[float, np.ndarray, EngineResult]:
    """Penalized objective and its exact gradient in the flat layout."""
    res = evaluate(ws, par, grad=True, warm=warm, mode_tol=mode_tol)
    value = float(res.ll.mean() - penalty(basis, par, xi))
    rows = res.grads.theta_rows()
    grad = rows.mean(axis=0)
    pg = penalty_grad_rows(basis, par, xi)
    sl = param_slices(par.p1, par.p2, ws.q)
    grad[sl["c0"]] -= pg["c0"]
    grad[sl["c"]] -= pg["c"].ravel()
    grad[sl["d0"]] -= pg["d0"]
    grad[sl["d"]] -= pg["d"].ravel()
    return value, grad, res
