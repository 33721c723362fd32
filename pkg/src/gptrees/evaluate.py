"""Model fitting pipeline, prediction aggregation, scoring, and CV."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve

from . import gp, io, sampler, trees
from .sampler import Hyperparams, PosteriorDraws, TrainData


def fit_model(dataset: io.Dataset, hp: Hyperparams, variant, seed,
              gp_cols=None, rot_cols=None, verbose: bool = False,
              check_invariants: bool = False) -> PosteriorDraws:
    """Normalise, calibrate and sample; returns draws that carry the transform."""
    transform, norm = io.fit_transform(dataset)
    data = TrainData(
        X=norm.x, y=norm.y,
        continuous_cols=norm.continuous_cols,
        categorical_cols=norm.categorical_cols,
        gp_cols=tuple(gp_cols) if gp_cols is not None else None,
        rot_cols=tuple(rot_cols) if rot_cols is not None else None,
    )
    hp = sampler.calibrate(norm.y, norm.x, hp)
    draws = sampler.run(data, hp, variant, np.random.default_rng(seed),
                        verbose=verbose, check_invariants=check_invariants,
                        seed_label=seed)
    draws.transform = transform
    draws.schema = dataset.schema
    return draws


@dataclass
class PredictionSet:
    """Per-draw point predictions plus lazily generated interval replicates.

    ``draw_means`` is (M, n_star) on the original target scale whenever the
    draws carry a transform.  Interval replicates add the per-draw noise
    N(0, 1/tau) (rescaled to the original units) and are derived per test
    row from (seed, row), so any access order gives the same values.
    """

    draw_means: np.ndarray
    tau_draws: np.ndarray
    noise_scale: float
    n_interval_draws: int
    seed: int
    original_scale: bool = True
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.draw_means.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.draw_means.mean(axis=0)

    def replicates(self, i: int) -> np.ndarray:
        """All M*Q interval replicates for test row i."""
        rng = np.random.default_rng([self.seed, i])
        sd = self.noise_scale / np.sqrt(self.tau_draws)
        eps = rng.standard_normal((self.tau_draws.shape[0], self.n_interval_draws))
        return (self.draw_means[:, i, None] + sd[:, None] * eps).ravel()

    def intervals(self, level: float):
        """Empirical central interval endpoints at the given coverage level."""
        if not 0.0 <= level < 1.0:
            raise ValueError("coverage level must lie in [0, 1)")
        lo_q, hi_q = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
        lo = np.empty(self.n_rows)
        hi = np.empty(self.n_rows)
        for i in range(self.n_rows):
            reps = self.replicates(i)
            lo[i], hi[i] = np.quantile(reps, [lo_q, hi_q])
        return lo, hi

    def crps(self, y: np.ndarray) -> float:
        """Dataset CRPS: mean over rows of the per-row replicate score."""
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.n_rows:
            raise ValueError("length mismatch")
        return float(np.mean([crps(self.replicates(i), y[i]) for i in range(self.n_rows)]))


def predict(draws: PosteriorDraws, X_star: np.ndarray, Q: Optional[int] = None,
            seed: int = 0) -> PredictionSet:
    """Aggregate per-draw predictions over normalised test rows.

    Every retained draw routes each test row through each tree; GP leaves
    condition on the stored leaf values, constant leaves emit their value.
    The per-draw tree contributions are summed and then back-transformed.
    """
    if not draws.draws:
        raise ValueError("no retained draws")
    X_star = np.asarray(X_star, dtype=float)
    M = len(draws.draws)
    n_star = X_star.shape[0]
    gp_leaves = sampler.resolve_variant(draws.variant).gp_leaves
    gp_cols = list(draws.gp_cols)
    X_star_gp = np.ascontiguousarray(X_star[:, gp_cols]) if gp_leaves else None
    x_train_gp = np.ascontiguousarray(draws.x_train[:, gp_cols]) if gp_leaves else None

    diagnostics: dict = {}
    # consecutive draws usually share tree objects and length-scales, so a
    # small LRU of factorised leaf bundles removes most Cholesky work; the
    # cap keeps memory bounded on long chains with high sweep acceptance
    from collections import OrderedDict
    bundles: OrderedDict = OrderedDict()
    means = np.empty((M, n_star))
    for m, draw in enumerate(draws.draws):
        total = np.zeros(n_star)
        for t, tree in enumerate(draw.trees):
            leaf_of = trees.assign_rows(tree, X_star, diagnostics if m == 0 else None)
            values = draw.leaf_values[t]
            if not gp_leaves:
                for lid in np.unique(leaf_of):
                    rows = np.flatnonzero(leaf_of == lid)
                    total[rows] += values[lid][0]
                continue
            ls = draw.lengthscales[t]
            key = (id(tree), t, ls.tobytes())
            leaf_bundles = bundles.get(key)
            if leaf_bundles is None:
                kern = draws.hp.kernel_state(ls)
                leaf_bundles = {lid: gp.build_bundle(x_train_gp[tree.leaf_rows(lid)], kern)
                                for lid in tree.leaf_ids()}
                bundles[key] = leaf_bundles
                if len(bundles) > 256:
                    bundles.popitem(last=False)
            else:
                bundles.move_to_end(key)
            for lid in np.unique(leaf_of):
                rows = np.flatnonzero(leaf_of == lid)
                total[rows] += gp.gp_predict_mean(values[lid], X_star_gp[rows],
                                                  leaf_bundles[lid])
        means[m] = total

    transform = draws.transform
    if transform is not None:
        means = transform.inverse_y(means)
        noise_scale = transform.y_scale
        original = True
    else:
        noise_scale = 1.0
        original = False
    return PredictionSet(
        draw_means=means,
        tau_draws=np.array([d.tau for d in draws.draws]),
        noise_scale=noise_scale,
        n_interval_draws=Q if Q is not None else draws.hp.n_interval_draws,
        seed=seed,
        original_scale=original,
        diagnostics=diagnostics,
    )


def predict_dataset(draws: PosteriorDraws, dataset: io.Dataset, Q: Optional[int] = None,
                    seed: int = 0) -> PredictionSet:
    """Predict for a raw dataset by applying the stored training transform."""
    if draws.transform is None:
        raise ValueError("draws carry no transform; use predict() with normalised rows")
    return predict(draws, draws.transform.transform_x(dataset.x), Q=Q, seed=seed)


def rmse(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Root mean squared error."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError("inputs must be equal-length non-empty vectors")
    diff = y - y_hat
    return float(np.sqrt(np.mean(diff * diff)))


def crps(samples, y: float) -> float:
    """CRPS of the empirical distribution of ``samples`` against scalar y.

    mean|X - y| - (1/2) mean_{i,k}|X_i - X_k| over all ordered pairs,
    computed in O(m log m) through the sorted-sample identity for the mean
    absolute difference.  Non-negative, and zero only for a point mass at y.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    m = x.size
    if m < 2:
        raise ValueError("need at least two replicates")
    term1 = float(np.mean(np.abs(x - y)))
    k = np.arange(1.0, m + 1.0)
    pair_sum = float(np.sum((2.0 * k - m - 1.0) * x))  # sum_{i<k} (x_k - x_i)
    return term1 - pair_sum / (m * m)


@dataclass(frozen=True)
class CvRow:
    repetition: int
    fold: int
    variant: str
    rmse: float
    crps: float


@dataclass
class CvReport:
    """Per-(repetition, fold, variant) scores with median and rank summaries."""

    rows: list
    variants: tuple
    repetitions: int
    folds: int

    def value(self, metric: str, rep: int, fold: int, variant: str) -> float:
        for r in self.rows:
            if (r.repetition, r.fold, r.variant) == (rep, fold, variant):
                return getattr(r, metric)
        raise KeyError((rep, fold, variant))

    def medians(self) -> dict:
        out = {}
        for v in self.variants:
            vals_r = [r.rmse for r in self.rows if r.variant == v]
            vals_c = [r.crps for r in self.rows if r.variant == v]
            out[v] = {"rmse": float(np.median(vals_r)), "crps": float(np.median(vals_c))}
        return out

    def ranks(self, metric: str) -> dict:
        """Per-partition ranks, 1 = best; ties broken by variant order."""
        out = {}
        for rep in range(self.repetitions):
            for fold in range(self.folds):
                vals = [(self.value(metric, rep, fold, v), i) for i, v in enumerate(self.variants)]
                order = sorted(range(len(vals)), key=lambda i: vals[i])
                rank = {self.variants[i]: pos + 1 for pos, i in enumerate(order)}
                out[(rep, fold)] = rank
        return out

    def mean_ranks(self, metric: str) -> dict:
        ranks = self.ranks(metric)
        return {v: float(np.mean([r[v] for r in ranks.values()])) for v in self.variants}


def fold_assignments(n: int, folds: int, rng) -> np.ndarray:
    """Shuffled-index striping: balanced fold sizes within one row."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if folds > n:
        raise ValueError(f"cannot partition {n} rows into {folds} non-empty folds")
    perm = rng.permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[perm] = np.arange(n) % folds
    return out


def _one_cv_job(args):
    dataset, hp, variant, seed, q, gp_cols, rot_cols, train_idx, test_idx = args
    train = dataset.take(train_idx)
    test = dataset.take(test_idx)
    draws = fit_model(train, hp, variant, seed, gp_cols=gp_cols, rot_cols=rot_cols)
    pred = predict_dataset(draws, test, Q=q, seed=seed)
    return rmse(test.y, pred.mean), pred.crps(test.y)


def cross_validate(dataset: io.Dataset, hp: Hyperparams, variants: Sequence[str],
                   repetitions: int = 5, folds: int = 5, rng=None, n_jobs: int = 1,
                   gp_cols=None, rot_cols=None, verbose: bool = False) -> CvReport:
    """Repeated k-fold cross-validation over model variants.

    Fold assignments are redrawn per repetition; every (repetition, fold,
    variant) job runs with a seed pre-drawn from ``rng`` so the report is
    identical no matter how the jobs are scheduled.
    """
    rng = np.random.default_rng(rng)
    n = dataset.n
    variants = [sampler.resolve_variant(v).letter for v in variants]
    assignments = [fold_assignments(n, folds, rng) for _ in range(repetitions)]
    seeds = rng.integers(0, 2**63 - 1, size=(repetitions, folds, len(variants)))

    jobs = []
    keys = []
    for rep in range(repetitions):
        fold_of = assignments[rep]
        for fold in range(folds):
            test_idx = np.flatnonzero(fold_of == fold)
            train_idx = np.flatnonzero(fold_of != fold)
            for vi, variant in enumerate(variants):
                jobs.append((dataset, hp, variant, int(seeds[rep, fold, vi]),
                             hp.n_interval_draws, gp_cols, rot_cols, train_idx, test_idx))
                keys.append((rep, fold, variant))

    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_one_cv_job, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_one_cv_job(job))
            if verbose:
                rep, fold, variant = keys[i]
                print(f"[cv] rep={rep} fold={fold} variant={variant} "
                      f"rmse={results[-1][0]:.4f} crps={results[-1][1]:.4f}")

    rows = [CvRow(rep, fold, v, r, c)
            for (rep, fold, v), (r, c) in zip(keys, results)]
    return CvReport(rows=rows, variants=tuple(variants),
                    repetitions=repetitions, folds=folds)
