"""Mask-ordering check against the additive information oracle.

Under an additive scorer whose marginal information grows with region
weight, the minimiser of ``(f(1) - f(m))^2 + lam * mean(m)`` never gives a
heavier region a smaller mask.  :func:`run_suite` trains single-scale masks
on random weightings and compares the learned region ranking to the weight
ranking and to an exhaustive grid-search minimiser of the same objective.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .explain import MdmConfig, init_masks, train_mask, upsample_mask
from .models import ActivationSelector, AdditiveOracle


@dataclass
class TrialResult:
    weights: np.ndarray
    trained: np.ndarray
    grid: np.ndarray
    rho_trained: float
    rho_grid: float
    rho_agree: float

    @property
    def passed(self) -> bool:
        return min(self.rho_trained, self.rho_grid, self.rho_agree) >= 0.9


@dataclass
class SuiteResult:
    trials: list[TrialResult]
    required: int

    @property
    def n_passed(self) -> int:
        return sum(t.passed for t in self.trials)

    @property
    def passed(self) -> bool:
        return self.n_passed >= self.required


def draw_weights(rng: np.random.Generator, n: int = 4, margin: float = 0.1) -> np.ndarray:
    """Nonnegative weights summing to at most 1 with every pair at least ``margin`` apart."""
    while True:
        w = rng.dirichlet(np.ones(n)) * rng.uniform(0.8, 1.0)
        if min(abs(a - b) for a, b in itertools.combinations(w, 2)) >= margin:
            return w


def objective(oracle: AdditiveOracle, region_masks: np.ndarray, lam: float) -> np.ndarray:
    """The abbreviated per-region objective for each row of region mask values.

    All regions must have equal area so the mean over cells equals the mean
    over regions.
    """
    m = np.atleast_2d(region_masks)
    w = np.asarray(oracle.weights)
    full = w.sum() / oracle.gain
    f = (m ** oracle.exponent) @ w / oracle.gain
    return (full - f) ** 2 + lam * m.mean(axis=1)


def grid_minimizer(oracle: AdditiveOracle, lam: float, levels: int = 11) -> np.ndarray:
    grid = np.array(list(itertools.product(np.linspace(0.0, 1.0, levels),
                                           repeat=len(oracle.regions))))
    return grid[int(np.argmin(objective(oracle, grid, lam)))]


def _rho(a, b) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(spearmanr(a, b)[0])


def run_trial(weights, exponent: float = 0.5, lam: float = 0.05, size: int = 4,
              iterations: int = 1500, lr: float = 0.01) -> TrialResult:
    """One 2×2-region oracle on a ``size``×``size`` grid, mask cells aligned with pixels."""
    oracle = AdditiveOracle.grid((size, size), 2, 2, weights, exponent=exponent)
    cfg = MdmConfig(n_scales=1, extents=((size, size),), iterations=iterations, lr=lr, lambdas=lam)
    mask = init_masks(cfg, (size, size), [lam])[0]
    trained, _ = train_mask(oracle, np.ones((1, size, size)), ActivationSelector.logit(0), mask, cfg)
    means = oracle.region_means(upsample_mask(trained, size, size).data)
    grid = grid_minimizer(oracle, lam)
    w = np.asarray(weights, dtype=np.float64)
    return TrialResult(w, means, grid, _rho(means, w), _rho(grid, w), _rho(grid, means))


def run_suite(trials: int = 20, seed: int = 0, exponent: float = 0.5, lam: float = 0.05,
              required: int = 18, **kw) -> SuiteResult:
    rng = np.random.default_rng(seed)
    results = [run_trial(draw_weights(rng), exponent, lam, **kw) for _ in range(trials)]
    return SuiteResult(results, required)
