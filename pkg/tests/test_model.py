"""Parameter objects, constraints, and the flat layout."""

import dataclasses
import json

import numpy as np
import pytest
from conftest import default_basis, random_orthonormal_theta

from markcov.basis import greville_abscissae
from markcov.model import (
    Dataset,
    MarkedRealization,
    Theta,
    full_sigma,
    intensity,
    mean_response,
    normalize_signs,
    orthonormalize,
    pack_theta,
    param_slices,
    theta_dim,
    theta_from_dict,
    theta_to_dict,
    unpack_theta,
    validate_theta,
)


def scalar_theta(q, **overrides):
    fields = dict(sigma_uv=[[0.1]], c0=np.zeros(q), c=np.zeros((1, q)),
                  d0=np.zeros(q), d=np.zeros((1, q)),
                  var_u=[1.0], var_v=[2.0], var_eta=0.5)
    fields.update(overrides)
    return Theta(**fields)


def test_full_sigma_scalar_literal():
    theta = scalar_theta(9)
    np.testing.assert_array_equal(full_sigma(theta), [[1.0, 0.1], [0.1, 2.0]])


def test_full_sigma_blocks():
    basis = default_basis()
    theta = random_orthonormal_theta(basis, p1=2, p2=3, seed=3)
    sigma = full_sigma(theta)
    assert sigma.shape == (5, 5)
    np.testing.assert_array_equal(sigma, sigma.T)
    np.testing.assert_array_equal(np.diag(sigma)[:2], theta.var_u)
    np.testing.assert_array_equal(sigma[:2, 2:], theta.sigma_uv)
    assert sigma[0, 1] == 0.0 and sigma[2, 3] == 0.0


def test_intensity_closed_form():
    basis = default_basis()
    grev = greville_abscissae(basis)
    # mu = log 2 constant, phi_1(x) = x, u = 3: lambda(x) = 2 exp(3 x)
    theta = scalar_theta(basis.q, c0=np.log(2.0) * np.ones(basis.q), c=grev[None, :])
    x = np.array([0.0, 0.3, 1.0])
    np.testing.assert_allclose(intensity(theta, basis, [3.0], x), 2.0 * np.exp(3.0 * x),
                               rtol=1e-12)


def test_mean_response_closed_form():
    basis = default_basis()
    grev = greville_abscissae(basis)
    theta = scalar_theta(basis.q, d0=5.0 * grev, d=grev[None, :])
    x = np.array([0.1, 0.25, 0.9])
    np.testing.assert_allclose(mean_response(theta, basis, [2.0], x), 7.0 * x, atol=1e-12)


@pytest.mark.parametrize("p1,p2", [(2, 3), (1, 1), (0, 2), (2, 0)])
def test_pack_unpack_roundtrip(p1, p2):
    basis = default_basis()
    theta = random_orthonormal_theta(basis, p1=p1, p2=p2, seed=5)
    vec = pack_theta(theta)
    assert vec.shape == (theta_dim(p1, p2, basis.q),)
    back = unpack_theta(vec, p1, p2, basis.q)
    for field in dataclasses.fields(Theta):
        np.testing.assert_array_equal(getattr(back, field.name), getattr(theta, field.name))


def test_theta_dim_reference_values():
    # p1 = p2 = 2 with five interior knots (q = 9) gives 63 parameters;
    # ten interior knots (q = 14) gives 93.
    assert theta_dim(2, 2, 9) == 63
    assert theta_dim(2, 2, 14) == 93


def test_param_slices_partition():
    p1, p2, q = 2, 3, 9
    sl = param_slices(p1, p2, q)
    covered = []
    for s in sl.values():
        covered.extend(range(s.start, s.stop))
    assert covered == list(range(theta_dim(p1, p2, q)))


def test_sigma_uv_vec_is_column_major():
    basis = default_basis()
    theta = random_orthonormal_theta(basis, p1=2, p2=2, seed=1)
    theta = dataclasses.replace(theta, sigma_uv=[[1.0, 3.0], [2.0, 4.0]])
    np.testing.assert_array_equal(pack_theta(theta)[:4], [1.0, 2.0, 3.0, 4.0])


def test_orthonormalize_properties():
    basis = default_basis()
    rng = np.random.default_rng(2)
    rows = rng.normal(size=(3, basis.q))
    on = orthonormalize(rows, basis.gram)
    np.testing.assert_allclose(on @ basis.gram @ on.T, np.eye(3), atol=1e-10)
    # span is preserved: original rows lie in the orthonormalized span
    coef = np.linalg.lstsq(on.T, rows.T, rcond=None)[0]
    np.testing.assert_allclose(on.T @ coef, rows.T, atol=1e-8)
    np.testing.assert_allclose(orthonormalize(on, basis.gram), on, atol=1e-10)
    with pytest.raises(ValueError, match="dependent"):
        orthonormalize(np.vstack([rows, rows[0]]), basis.gram)
    assert orthonormalize(np.zeros((0, basis.q)), basis.gram).shape == (0, basis.q)


def test_normalize_signs_flips_consistently():
    basis = default_basis()
    theta = random_orthonormal_theta(basis, p1=2, p2=2, seed=4)
    flipped = dataclasses.replace(theta, c=theta.c * np.array([-1.0, 1.0])[:, None],
                                  sigma_uv=theta.sigma_uv * np.array([-1.0, 1.0])[:, None])
    fixed = normalize_signs(flipped)
    np.testing.assert_allclose(fixed.c, theta.c)
    np.testing.assert_allclose(fixed.sigma_uv, theta.sigma_uv)
    again = normalize_signs(fixed)
    np.testing.assert_array_equal(again.c, fixed.c)
    np.testing.assert_array_equal(again.sigma_uv, fixed.sigma_uv)


def test_normalize_signs_degenerate_component():
    theta = scalar_theta(9, c=1e-12 * np.ones((1, 9)))
    with pytest.raises(ValueError, match="sign is undefined"):
        normalize_signs(theta)


def test_validate_theta_accepts_and_rejects():
    basis = default_basis()
    theta = random_orthonormal_theta(basis, p1=2, p2=2, seed=6)
    validate_theta(theta, basis)

    broken = dataclasses.replace(theta, c=theta.c + 0.01)
    with pytest.raises(ValueError, match="orthonormal"):
        validate_theta(broken, basis)

    broken = dataclasses.replace(theta, var_u=theta.var_u[::-1].copy())
    with pytest.raises(ValueError, match="descending"):
        validate_theta(broken, basis)

    broken = dataclasses.replace(theta, sigma_uv=np.full((2, 2), 1.0))
    with pytest.raises(ValueError, match="positive definite"):
        validate_theta(broken, basis)

    broken = dataclasses.replace(theta, c=theta.c * np.array([-1.0, 1.0])[:, None])
    with pytest.raises(ValueError, match="sign"):
        validate_theta(broken, basis)

    with pytest.raises(ValueError, match="q="):
        validate_theta(theta, default_basis(interior=7))


def test_theta_dict_roundtrip():
    basis = default_basis()
    theta = random_orthonormal_theta(basis, p1=2, p2=3, seed=7)
    payload = json.loads(json.dumps(theta_to_dict(theta, basis)))
    back, back_basis = theta_from_dict(payload)
    assert back_basis.domain == basis.domain
    assert back_basis.interior_knots == basis.interior_knots
    np.testing.assert_array_equal(back_basis.quad_x, basis.quad_x)
    for field in dataclasses.fields(Theta):
        np.testing.assert_allclose(getattr(back, field.name), getattr(theta, field.name),
                                   atol=1e-15)


def test_dataset_and_realization_validation():
    obs = MarkedRealization(x=[0.2, 0.8], y=[1.0, -1.0])
    assert obs.m == 2
    empty = MarkedRealization(x=[], y=[])
    assert empty.m == 0
    data = Dataset(realizations=(obs, empty), domain=(0.0, 1.0))
    assert data.n == 2

    with pytest.raises(ValueError, match="outside"):
        Dataset(realizations=(MarkedRealization(x=[1.4], y=[0.0]),), domain=(0.0, 1.0))
    with pytest.raises(ValueError, match="equal-length"):
        MarkedRealization(x=[0.1, 0.2], y=[1.0])
    with pytest.raises(ValueError, match="finite"):
        MarkedRealization(x=[0.1], y=[np.nan])
    with pytest.raises(ValueError, match="ids"):
        Dataset(realizations=(obs,), domain=(0.0, 1.0), ids=("a", "b"))


def test_theta_is_immutable():
    theta = scalar_theta(9)
    with pytest.raises((ValueError, dataclasses.FrozenInstanceError)):
        theta.c0[0] = 5.0
