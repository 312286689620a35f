"""Asymptotic and bootstrap uncertainty for the fitted parameters.

The estimator lives on a constraint set (orthonormal components,
block-diagonalized score covariance), so the usual inverse-Fisher
covariance does not apply directly.  Instead the Fisher information is
restricted to the tangent space of the constraints: with A the
constraint Jacobian and B an orthonormal basis of its null space, the
asymptotic covariance is

    V = B' (B F0 B')^{-1} B,

where F0 is estimated by the average outer product of per-subject score
vectors.  Standard deviations are sqrt(diag(V) / n).

Two caveats, both deliberate.  The smoothing-penalty bias term from the
asymptotic theory is not subtracted (its scaling constant is not
observable from one dataset); the penalty Jacobian is exposed for
diagnostics instead.  And the bootstrap resamples whole subjects with
replacement, which is well defined for replicated realizations even
though fancier schemes exist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from markcov.basis import BasisSystem
from markcov.likelihood import LikelihoodWorkspace, ModelParams, evaluate
from markcov.model import Dataset, Theta, param_slices, theta_dim


class SingularFisherError(RuntimeError):
    """Raised when the projected Fisher information cannot be inverted."""

    def __init__(self, message: str, rank: int | None = None,
                 needed: int | None = None):
        super().__init__(message)
        self.rank = rank
        self.needed = needed


@dataclass
class InferenceResult:
    """Tangent-space Fisher inference at a fitted parameter."""

    fisher: np.ndarray          # (s, s) outer-product information estimate
    tangent_basis: np.ndarray   # (s - s1, s) orthonormal rows, A @ B.T = 0
    avar: np.ndarray            # (s, s) asymptotic covariance of sqrt(n)(theta_hat - theta)
    sd_sigma_uv: np.ndarray     # (p1, p2) per-entry SDs, already divided by sqrt(n)
    rank_ok: bool


@dataclass
class BootstrapResult:
    sd_sigma_uv: np.ndarray     # (p1, p2) elementwise SDs over replicates
    n_used: int
    n_dropped: int
    samples: np.ndarray         # (n_used, p1, p2) aligned replicate estimates


def score_vectors(theta: Theta, data: Dataset, basis: BasisSystem,
                  mode_tol: float = 1e-9) -> np.ndarray:
    """Per-subject gradients of the Laplace log-likelihood, one row each.

    Row i is the gradient of subject i's approximate marginal
    log-density with respect to the flat parameter vector, computed by
    the same differentiation path the fitter uses.
    """
    ws = LikelihoodWorkspace(data, basis)
    res = evaluate(ws, ModelParams.from_theta(theta), grad=True, warm=False,
                   mode_tol=mode_tol)
    if not bool(res.newton_converged.all()):
        bad = np.nonzero(~res.newton_converged)[0]
        raise RuntimeError(f"posterior mode search failed for subjects {bad.tolist()}")
    return res.grads.theta_rows()


def constraint_jacobian(theta: Theta, basis: BasisSystem) -> np.ndarray:
    """Jacobian A of the active equality constraints at ``theta``.

    The constraints are the orthonormality relations c_k' J c_l =
    delta_kl and d_k' J d_l = delta_kl for k <= l; rows are ordered with
    all intensity-component rows first, pairs in lexicographic order.
    """
    p1, p2, q = theta.p1, theta.p2, theta.q
    sl = param_slices(p1, p2, q)
    s = theta_dim(p1, p2, q)
    J = basis.gram

    rows = []
    for count, coef, slot in ((p1, theta.c, sl["c"]), (p2, theta.d, sl["d"])):
        jc = coef @ J.T  # (count, q); J symmetric
        for k in range(count):
            for l in range(k, count):
                row = np.zeros(s)
                if k == l:
                    row[slot.start + k * q: slot.start + (k + 1) * q] = 2.0 * jc[k]
                else:
                    row[slot.start + k * q: slot.start + (k + 1) * q] = jc[l]
                    row[slot.start + l * q: slot.start + (l + 1) * q] = jc[k]
                rows.append(row)
    if not rows:
        return np.zeros((0, s))
    return np.stack(rows)


def tangent_complement(A: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the null space of A, one row per direction."""
    s1, s = A.shape
    if s1 == 0:
        return np.eye(s)
    _, sv, vt = np.linalg.svd(A)
    tol = max(A.shape) * np.finfo(float).eps * sv[0]
    rank = int(np.sum(sv > tol))
    if rank < s1:
        raise ValueError(f"constraint Jacobian is rank deficient: rank {rank} of {s1} rows")
    return vt[rank:]


def penalty_jacobian(theta: Theta, basis: BasisSystem) -> np.ndarray:
    """Gradients of the four roughness penalty sums, one row per penalty.

    Diagnostic companion to the asymptotic theory: the bias induced by
    the penalties is proportional to these rows, but no correction is
    applied to the estimates.
    """
    p1, p2, q = theta.p1, theta.p2, theta.q
    sl = param_slices(p1, p2, q)
    s = theta_dim(p1, p2, q)
    omega = basis.roughness
    out = np.zeros((4, s))
    out[0, sl["c0"]] = 2.0 * omega @ theta.c0
    if p1:
        out[1, sl["c"]] = (2.0 * theta.c @ omega.T).ravel()
    out[2, sl["d0"]] = 2.0 * omega @ theta.d0
    if p2:
        out[3, sl["d"]] = (2.0 * theta.d @ omega.T).ravel()
    return out


def fisher_information(scores: np.ndarray) -> np.ndarray:
    """Outer-product estimate F0 = (1/n) sum_i s_i s_i'."""
    n = scores.shape[0]
    fisher = scores.T @ scores / n
    return (fisher + fisher.T) / 2.0


def asymptotic_covariance(theta: Theta, basis: BasisSystem, data: Dataset,
                          mode_tol: float = 1e-9) -> InferenceResult:
    """Tangent-space asymptotic covariance and SDs for Sigma_uv.

    Raises SingularFisherError when the projected information matrix is
    rank deficient, which is guaranteed whenever the number of subjects
    is below the tangent-space dimension.
    """
    scores = score_vectors(theta, data, basis, mode_tol=mode_tol)
    A = constraint_jacobian(theta, basis)
    B = tangent_complement(A)
    fisher = fisher_information(scores)
    n, s = data.n, fisher.shape[0]
    dim = B.shape[0]

    projected = B @ fisher @ B.T
    projected = (projected + projected.T) / 2.0
    rank = int(np.linalg.matrix_rank(projected, hermitian=True))
    if rank < dim:
        raise SingularFisherError(
            f"projected Fisher information is singular: rank {rank} of {dim} "
            f"tangent directions with n={n} subjects (need n well above {dim})",
            rank=rank, needed=dim)
    try:
        factor = cho_factor(projected)
    except np.linalg.LinAlgError as exc:
        raise SingularFisherError(
            f"projected Fisher information is numerically indefinite: {exc}",
            rank=rank, needed=dim) from exc
    avar = B.T @ cho_solve(factor, B)
    avar = (avar + avar.T) / 2.0

    sl = param_slices(theta.p1, theta.p2, theta.q)["sigma_uv"]
    sd_flat = np.sqrt(np.clip(np.diag(avar)[sl], 0.0, None) / n)
    sd_sigma_uv = sd_flat.reshape((theta.p1, theta.p2), order="F")
    return InferenceResult(fisher=fisher, tangent_basis=B, avar=avar,
                           sd_sigma_uv=sd_sigma_uv, rank_ok=True)


def bootstrap_sd(theta: Theta, data: Dataset, basis: BasisSystem, config,
                 n_boot: int, seed: int = 0) -> BootstrapResult:
    """Case-resampling bootstrap SDs for the Sigma_uv entries.

    Subjects are resampled with replacement; each resample is refit
    starting from ``theta`` and its estimate is sign-aligned to
    ``theta`` through the component inner products.  Replicates whose
    fit does not converge are dropped and counted.
    """
    from markcov.estimation import fit
    from markcov.simulate import align_signs

    if n_boot < 2:
        raise ValueError("n_boot must be at least 2")
    rng = np.random.default_rng(seed)
    estimates = []
    dropped = 0
    for _ in range(n_boot):
        idx = rng.integers(0, data.n, size=data.n)
        resample = Dataset(realizations=tuple(data.realizations[i] for i in idx),
                           domain=data.domain)
        try:
            result = fit(resample, basis, config, init=theta)
        except (np.linalg.LinAlgError, ValueError):
            dropped += 1
            continue
        if not result.converged:
            dropped += 1
            continue
        aligned, _, _ = align_signs(result.theta, theta, basis)
        estimates.append(aligned.sigma_uv)
    if not estimates:
        raise RuntimeError("no bootstrap replicate converged")
    samples = np.stack(estimates)
    return BootstrapResult(sd_sigma_uv=samples.std(axis=0, ddof=1),
                           n_used=len(estimates), n_dropped=dropped,
                           samples=samples)
