"""Synthetic data generators for the benchmarking experiments.

``gen_benchmark`` builds a sum of three two-leaf trees over (x1, x2) in
[-1, 1]^2 whose regions are split by the diagonals x1 <= x2, x1 <= -x2 and
the axis x1 <= 0; each region receives a constant mean plus one spatially
correlated draw.  ``gen_friedman`` is the usual smooth benchmark function
with optional pure-noise covariates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gp import kernel_matrix

BENCHMARK_MEANS = ((-10.0, 5.0), (0.0, 20.0), (10.0, -15.0))


@dataclass(frozen=True)
class BenchmarkSpec:
    n: int
    spatial_lengthscale: float = 3.0
    spatial_precision: float = 0.1
    noise_precision: float = 10.0
    seed: int = 0


@dataclass(frozen=True)
class FriedmanSpec:
    n: int
    p: int = 5
    noise_precision: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.p < 5:
            raise ValueError("friedman needs at least five covariates")


def benchmark_regions(X: np.ndarray):
    """Left-region indicators of the three components, each a bool array."""
    return (X[:, 0] <= X[:, 1], X[:, 0] <= -X[:, 1], X[:, 0] <= 0.0)


def benchmark_mean(X: np.ndarray) -> np.ndarray:
    """Deterministic part of the benchmark response (region means only)."""
    X = np.asarray(X, dtype=float)
    out = np.zeros(X.shape[0])
    for (mu_left, mu_right), left in zip(BENCHMARK_MEANS, benchmark_regions(X)):
        out += np.where(left, mu_left, mu_right)
    return out


def gen_benchmark(spec: BenchmarkSpec, rng=None):
    """Draw (X, y, truth); truth is y minus the iid noise vector.

    The spatially correlated term of each region is one draw from the
    region's kernel (lengthscale 3 in both inputs, precision 0.1); a small
    positive jitter keeps the factorisations stable.
    """
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    if spec.n < 2:
        raise ValueError("need at least two rows")
    X = rng.uniform(-1.0, 1.0, size=(spec.n, 2))
    truth = benchmark_mean(X)
    ls = np.full(2, spec.spatial_lengthscale)
    for left in benchmark_regions(X):
        for rows in (np.flatnonzero(left), np.flatnonzero(~left)):
            if rows.size == 0:
                continue
            omega = kernel_matrix(X[rows], ls, spec.spatial_precision, 1e-10)
            chol = np.linalg.cholesky(omega)
            truth[rows] += chol @ rng.standard_normal(rows.size)
    noise = rng.standard_normal(spec.n) / math.sqrt(spec.noise_precision)
    return X, truth + noise, truth


def friedman_mean(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return (10.0 * np.sin(np.pi * X[:, 0] * X[:, 1])
            + 20.0 * (X[:, 2] - 0.5) ** 2
            + 10.0 * X[:, 3]
            + 5.0 * X[:, 4])


def gen_friedman(spec: FriedmanSpec, rng=None):
    """Draw (X, y, truth) from the Friedman function with iid noise.

    Covariates beyond the fifth never enter the mean; they are pure noise
    dimensions used to probe variable-relevance behaviour.
    """
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    X = rng.uniform(0.0, 1.0, size=(spec.n, spec.p))
    truth = friedman_mean(X)
    noise = rng.standard_normal(spec.n) / math.sqrt(spec.noise_precision)
    return X, truth + noise, truth
