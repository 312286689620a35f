"""Smoothing-parameter selection by cross-validation, component counts
by explained variability.

The CV criterion is the summed held-out Laplace log-density over a
seeded subject partition.  The four penalty weights are searched one
coordinate at a time on log-spaced grids; joint optimization over the
4-D grid is deliberately out of scope.  Scores are memoized by the full
weight vector, so repeated visits to the same candidate (including the
degenerate all-singleton-grid case) cost one evaluation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np

from markcov.basis import BasisSystem
from markcov.estimation import FitConfig, fit
from markcov.likelihood import LikelihoodWorkspace, ModelParams, evaluate
from markcov.model import Dataset, Theta

DEFAULT_GRID = tuple(float(x) for x in np.logspace(-8, -1, 7))


@dataclass
class CvPlan:
    """Search plan for the four penalty weights."""

    folds: int = 5
    grid: tuple[tuple[float, ...], ...] = (DEFAULT_GRID,) * 4
    sweep_order: tuple[int, int, int, int] = (0, 1, 2, 3)
    init_xi: tuple[float, float, float, float] = (1e-4, 1e-4, 1e-6, 1e-4)
    sweeps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        self.grid = tuple(tuple(float(g) for g in coord) for coord in self.grid)
        if len(self.grid) != 4 or any(len(coord) == 0 for coord in self.grid):
            raise ValueError("grid must provide a nonempty candidate list per weight")
        if any(g < 0 for coord in self.grid for g in coord):
            raise ValueError("penalty weights cannot be negative")
        if sorted(self.sweep_order) != [0, 1, 2, 3]:
            raise ValueError("sweep_order must permute (0, 1, 2, 3)")
        if self.sweeps < 1:
            raise ValueError("sweeps must be at least 1")


@dataclass
class CvResult:
    xi: tuple[float, float, float, float]
    score: float
    table: list  # (xi tuple, score) in evaluation order


@dataclass
class ComponentChoice:
    p1: int
    p2: int
    proportions_u: np.ndarray  # cumulative variance proportions
    proportions_v: np.ndarray


def fold_labels(n: int, folds: int, seed: int) -> np.ndarray:
    """Seeded fold assignment of ``n`` subjects into ``folds`` groups."""
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    labels = np.empty(n, dtype=int)
    labels[np.random.default_rng(seed).permutation(n)] = np.arange(n) % folds
    return labels


def _subset(data: Dataset, keep: np.ndarray) -> Dataset:
    ids = None if data.ids is None else tuple(data.ids[i] for i in np.nonzero(keep)[0])
    return Dataset(realizations=tuple(r for r, k in zip(data.realizations, keep) if k),
                   domain=data.domain, ids=ids)


def _fold_contribution(args):
    data, basis, config, label_mask = args
    train = _subset(data, ~label_mask)
    test = _subset(data, label_mask)
    if train.n == 0:
        raise ValueError("a training fold is empty; reduce folds")
    try:
        result = fit(train, basis, config)
    except np.linalg.LinAlgError:
        return -np.inf
    if not result.converged:
        return -np.inf
    ws = LikelihoodWorkspace(test, basis)
    res = evaluate(ws, ModelParams.from_theta(result.theta),
                   mode_tol=config.mode_tol)
    return float(res.ll.sum())


def cv_score(data: Dataset, basis: BasisSystem, config: FitConfig,
             xi, folds: int = 5, seed: int = 0, threads: int = 1) -> float:
    """Summed held-out log-density over a seeded subject partition.

    A fold whose fit fails or does not converge poisons the score with
    -inf, so the candidate is never selected.
    """
    labels = fold_labels(data.n, folds, seed)
    cfg = dataclasses.replace(config, xi=tuple(float(z) for z in xi))
    tasks = [(data, basis, cfg, labels == f) for f in range(folds)]
    if threads > 1:
        with get_context("fork").Pool(processes=threads) as pool:
            parts = pool.map(_fold_contribution, tasks)
    else:
        parts = [_fold_contribution(t) for t in tasks]
    return float(sum(parts))


def sequential_cv(data: Dataset, basis: BasisSystem, config: FitConfig,
                  plan: CvPlan | None = None, threads: int = 1) -> CvResult:
    """Coordinate-wise grid search of the CV criterion.

    Sweeps the four weights in ``plan.sweep_order``, holding the others
    fixed; the incumbent value always competes, so the final score never
    drops below the initial one.
    """
    plan = plan or CvPlan()
    xi = [float(z) for z in plan.init_xi]
    cache: dict[tuple, float] = {}
    table: list[tuple[tuple, float]] = []

    def score_at(vec):
        key = tuple(vec)
        if key not in cache:
            cache[key] = cv_score(data, basis, config, key, folds=plan.folds,
                                  seed=plan.seed, threads=threads)
            table.append((key, cache[key]))
        return cache[key]

    best = score_at(xi)
    for _ in range(plan.sweeps):
        for j in plan.sweep_order:
            candidates = list(plan.grid[j])
            if xi[j] not in candidates:
                candidates.append(xi[j])
            for cand in candidates:
                trial = list(xi)
                trial[j] = cand
                val = score_at(trial)
                if val > best:
                    best = val
                    xi = trial
    if not np.isfinite(best):
        raise RuntimeError("cross-validation failed for every candidate")
    return CvResult(xi=tuple(xi), score=best, table=table)


def choose_components(theta: Theta, threshold: float = 0.90) -> ComponentChoice:
    """Smallest component counts reaching the variance-proportion threshold.

    Run a pilot fit with generous counts, then keep the leading
    components whose cumulative share of the total score variance
    reaches ``threshold`` for each process.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")

    def cut(variances):
        if variances.size == 0:
            return 0, np.zeros(0)
        cum = np.cumsum(variances) / variances.sum()
        return int(np.searchsorted(cum, threshold - 1e-12) + 1), cum

    p1, prop_u = cut(theta.var_u)
    p2, prop_v = cut(theta.var_v)
    return ComponentChoice(p1=p1, p2=p2, proportions_u=prop_u, proportions_v=prop_v)
