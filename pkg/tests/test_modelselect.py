"""Cross-validation mechanics and component selection."""

import dataclasses

import numpy as np
import pytest

import markcov.modelselect as ms
from conftest import default_basis, random_orthonormal_theta
from markcov.estimation import FitConfig, fit
from markcov.likelihood import LikelihoodWorkspace, ModelParams, evaluate
from markcov.model import Dataset
from markcov.modelselect import (
    CvPlan,
    choose_components,
    cv_score,
    fold_labels,
    sequential_cv,
)
from markcov.simulate import paper_design, sample_dataset


def _sim(n, seed, r=20.0):
    return sample_dataset(paper_design(r=r, alpha=0.75, n=n), seed=seed)[0]


def test_fold_labels_partition():
    labels = fold_labels(17, 5, seed=0)
    assert labels.shape == (17,)
    counts = np.bincount(labels, minlength=5)
    assert counts.max() - counts.min() <= 1
    assert np.array_equal(labels, fold_labels(17, 5, seed=0))
    assert not np.array_equal(labels, fold_labels(17, 5, seed=1))


def test_fold_labels_rejects_bad_counts():
    with pytest.raises(ValueError):
        fold_labels(5, 1, seed=0)
    with pytest.raises(ValueError):
        fold_labels(5, 6, seed=0)


def test_cv_score_equals_manual_fold_sum():
    # Reimplement the criterion with the same partition: fit on each
    # fold's complement, evaluate the held-out log-density, sum.
    basis = default_basis()
    data = _sim(n=12, seed=9)
    config = FitConfig(p1=1, p2=1)
    folds, seed = 3, 4
    got = cv_score(data, basis, config, config.xi, folds=folds, seed=seed)

    labels = fold_labels(data.n, folds, seed)
    expected = 0.0
    for f in range(folds):
        train = Dataset(tuple(r for r, l in zip(data.realizations, labels) if l != f),
                        data.domain)
        test = Dataset(tuple(r for r, l in zip(data.realizations, labels) if l == f),
                       data.domain)
        res = fit(train, basis, config)
        ws = LikelihoodWorkspace(test, basis)
        expected += float(evaluate(ws, ModelParams.from_theta(res.theta)).ll.sum())
    assert got == pytest.approx(expected, rel=1e-12)


def test_cv_leave_one_out_runs():
    basis = default_basis()
    data = _sim(n=6, seed=3)
    config = FitConfig(p1=1, p2=1)
    val = cv_score(data, basis, config, config.xi, folds=6, seed=0)
    assert np.isfinite(val)


def test_cv_score_threads_do_not_change_value():
    basis = default_basis()
    data = _sim(n=10, seed=7)
    config = FitConfig(p1=1, p2=1)
    one = cv_score(data, basis, config, config.xi, folds=2, seed=1, threads=1)
    two = cv_score(data, basis, config, config.xi, folds=2, seed=1, threads=2)
    assert one == two


def test_fold_isolation_instrumented(monkeypatch):
    # A held-out subject must never reach the fit that produced the
    # parameters it is scored under.  Record the subjects seen by each
    # training fit and by the held-out workspace built right after it.
    basis = default_basis()
    data = _sim(n=9, seed=2)
    pairs = []

    real_fit = ms.fit

    def spy_fit(train, *args, **kwargs):
        pairs.append([{id(r) for r in train.realizations}, None])
        return real_fit(train, *args, **kwargs)

    class SpyWorkspace(LikelihoodWorkspace):
        def __init__(self, held_out, basis_):
            pairs[-1][1] = {id(r) for r in held_out.realizations}
            super().__init__(held_out, basis_)

    monkeypatch.setattr(ms, "fit", spy_fit)
    monkeypatch.setattr(ms, "LikelihoodWorkspace", SpyWorkspace)

    cv_score(data, basis, FitConfig(p1=1, p2=1), (1e-4,) * 4, folds=3, seed=6)
    assert len(pairs) == 3
    everyone = {id(r) for r in data.realizations}
    for train, held_out in pairs:
        assert held_out is not None
        assert train & held_out == set()
        assert train | held_out == everyone


def test_cv_nonconvergence_poisons_candidate(monkeypatch):
    basis = default_basis()
    data = _sim(n=8, seed=1)

    class Unconverged:
        converged = False

    monkeypatch.setattr(ms, "fit", lambda *a, **k: Unconverged())
    val = cv_score(data, basis, FitConfig(p1=1, p2=1), (1e-4,) * 4, folds=2, seed=0)
    assert val == -np.inf


def test_sequential_cv_singleton_grids_evaluate_once(monkeypatch):
    basis = default_basis()
    data = _sim(n=8, seed=8)
    calls = []

    def fake_score(data_, basis_, config_, xi, **kwargs):
        calls.append(tuple(xi))
        return -5.0

    monkeypatch.setattr(ms, "cv_score", fake_score)
    init = (1e-4, 1e-4, 1e-6, 1e-4)
    plan = CvPlan(grid=tuple((v,) for v in init), init_xi=init)
    out = sequential_cv(data, basis, FitConfig(p1=1, p2=1), plan)
    assert out.xi == init
    assert calls == [init]  # memoized: every sweep revisits the same point
    assert out.table == [(init, -5.0)]


def test_sequential_cv_improves_and_reproduces():
    basis = default_basis()
    data = _sim(n=12, seed=11)
    config = FitConfig(p1=1, p2=1)
    init = (1e-2, 1e-2, 1e-2, 1e-2)
    grid = ((1e-4, 1e-2), (1e-2,), (1e-2,), (1e-4, 1e-2))
    plan = CvPlan(folds=3, grid=grid, init_xi=init, seed=2)
    first = sequential_cv(data, basis, config, plan)
    init_score = dict(first.table)[init]
    assert first.score >= init_score
    assert first.xi in [xi for xi, _ in first.table]
    second = sequential_cv(data, basis, config, plan)
    assert first.xi == second.xi and first.table == second.table


def test_cv_plan_validation():
    with pytest.raises(ValueError):
        CvPlan(folds=1)
    with pytest.raises(ValueError):
        CvPlan(grid=((1e-4,),) * 3)
    with pytest.raises(ValueError):
        CvPlan(grid=((),) * 4)
    with pytest.raises(ValueError):
        CvPlan(grid=((1e-4,), (1e-4,), (-1e-4,), (1e-4,)))
    with pytest.raises(ValueError):
        CvPlan(sweep_order=(0, 1, 2, 2))
    with pytest.raises(ValueError):
        CvPlan(sweeps=0)


def test_choose_components_thresholds():
    basis = default_basis()
    base = random_orthonormal_theta(basis, p1=3, p2=3, seed=4)
    theta = dataclasses.replace(base,
                                var_u=np.array([77.0, 23.0, 1e-9]),
                                var_v=np.array([60.0, 25.0, 15.0]))
    low = choose_components(theta, threshold=0.75)
    assert low.p1 == 1
    high = choose_components(theta, threshold=0.90)
    assert high.p1 == 2
    assert high.p2 == 3  # 60 + 25 = 85 < 90, needs all three
    np.testing.assert_allclose(high.proportions_u[-1], 1.0)
    assert np.all(np.diff(high.proportions_v) > 0)


def test_choose_components_equal_variances_full_ceiling():
    basis = default_basis()
    base = random_orthonormal_theta(basis, p1=2, p2=2, seed=3)
    theta = dataclasses.replace(base, var_u=np.array([1.0, 1.0]),
                                var_v=np.array([1.0, 1.0]))
    pick = choose_components(theta, threshold=1.0)
    assert (pick.p1, pick.p2) == (2, 2)
    with pytest.raises(ValueError):
        choose_components(theta, threshold=0.0)
