"""Bundled synthetic auction-like dataset.

A stand-in for online-auction bid data: each subject is one auction on
a [0, 1] time axis (a week rescaled), points are bid times from an
intensity with an early-activity bump and a pronounced last-moment
spike, and marks are log bid prices that climb over the auction with a
jump near the close.  Generated from a known parameter value, so
end-to-end runs have a plausible target without shipping anyone's real
data.  The bundled CSV is byte-reproducible from make_auction_like().
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from markcov.basis import build_basis, eval_design
from markcov.model import Dataset, Theta, normalize_signs, orthonormalize
from markcov.simulate import design_from_theta, expected_points, sample_dataset

AUCTION_N = 194
AUCTION_SEED = 20260822
TARGET_MEAN_BIDS = 26.0


def auction_like_theta():
    """Parameter value with auction-flavored shapes on a five-knot basis."""
    basis = build_basis((0.0, 1.0), 5)
    xs = np.linspace(0.0, 1.0, 601)
    G = eval_design(basis, xs)

    def project(values):
        return np.linalg.lstsq(G, values, rcond=None)[0]

    # Baseline bid intensity: opening flurry, quiet middle, sniping spike.
    shape = (1.0 + 4.0 * np.exp(-((xs / 0.12) ** 2))
             + 9.0 * np.exp(-(((xs - 1.0) / 0.07) ** 2)))
    c0 = project(np.log(shape))

    # Mean log price: steady climb with a late jump.
    nu = 1.2 + 2.0 * xs + 1.3 / (1.0 + np.exp(-(xs - 0.9) / 0.04))
    d0 = project(nu)

    phi_seeds = np.stack([
        project(1.0 + 0.8 * xs),
        project(np.exp(-(((xs - 1.0) / 0.10) ** 2)) - np.exp(-((xs / 0.15) ** 2))),
    ])
    psi_seeds = np.stack([
        project(1.0 + 0.3 * xs),
        project(1.0 - 2.2 * xs),
        project(np.exp(-(((xs - 0.95) / 0.05) ** 2))),
    ])
    c = orthonormalize(phi_seeds, basis.gram)
    d = orthonormalize(psi_seeds, basis.gram)

    var_u = np.array([0.30, 0.16]) ** 2
    var_v = np.array([0.45, 0.22, 0.10]) ** 2
    rho = np.array([[0.50, 0.15, 0.05],
                    [0.20, 0.30, 0.10]])
    sigma_uv = rho * np.sqrt(np.outer(var_u, var_v))

    theta = Theta(sigma_uv=sigma_uv, c0=c0, c=c, d0=d0, d=d,
                  var_u=var_u, var_v=var_v, var_eta=0.07 ** 2)
    theta = normalize_signs(theta)

    # Shift the baseline so the expected bid count hits the target; the
    # basis sums to one, so a constant coefficient shift is a constant
    # log-intensity shift.
    mean0 = expected_points(design_from_theta(theta, basis, n=1))
    theta = Theta(sigma_uv=theta.sigma_uv,
                  c0=theta.c0 + np.log(TARGET_MEAN_BIDS / mean0),
                  c=theta.c, d0=theta.d0, d=theta.d,
                  var_u=theta.var_u, var_v=theta.var_v, var_eta=theta.var_eta)
    return theta, basis


def make_auction_like(n: int = AUCTION_N, seed: int = AUCTION_SEED):
    """Regenerate the bundled dataset (and its generating parameters)."""
    theta, basis = auction_like_theta()
    design = design_from_theta(theta, basis, n=n, label="auction-like")
    data, _, _ = sample_dataset(design, seed=seed)
    width = max(4, len(str(n)))
    ids = tuple(f"a{i + 1:0{width}d}" for i in range(n))
    data = Dataset(realizations=data.realizations, domain=data.domain, ids=ids)
    return data, theta, basis


def write_bundle(directory) -> None:
    from pathlib import Path

    from markcov.io import write_dataset_csv, write_subject_manifest

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data, _, _ = make_auction_like()
    write_dataset_csv(directory / "auction_like.csv", data)
    write_subject_manifest(directory / "auction_like_subjects.json", data)


def load_auction_like() -> Dataset:
    """Load the bundled CSV (no resampling)."""
    from markcov.io import read_dataset_csv

    pkg = resources.files("markcov") / "data"
    with resources.as_file(pkg / "auction_like.csv") as csv_path, \
            resources.as_file(pkg / "auction_like_subjects.json") as manifest:
        return read_dataset_csv(csv_path, manifest=manifest)
