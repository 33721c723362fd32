"""Backfitting MCMC over a sum of trees with GP or constant leaf models.

One sweep updates each tree in turn against its partial residuals: an MH
step on the tree structure (likelihood marginalised over all leaf
parameters), a Gibbs draw of the per-observation leaf values, and an MH
sweep over the tree's per-dimension kernel length-scales.  After all trees,
the residual precision gets its conjugate gamma update.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import optimize, stats

from . import gp, trees
from .gp import KernelState, LOG_2PI, build_bundle, rescale_dim
from .trees import (CHANGE, CHANGE_PROJECT, GROW, GROW_PROJECT, PRUNE,
                    DecisionTree, MoveConfig)

DEFAULT_MOVE_PROBS = (0.15, 0.15, 0.2, 0.2, 0.3)  # grow, grow-proj, change, change-proj, prune
DEFAULT_ANGLE_GRID = tuple((k + 1) * math.pi / 40 for k in range(10))
DEFAULT_LENGTHSCALE_GRID = (0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0,
                            6.0, 7.0, 8.0, 9.0, 10.0, 50.0)


@dataclass(frozen=True)
class Hyperparams:
    """Sampler configuration; precisions default to the induced-prior rule.

    With defaults active, nu = tau_mu = 4 k^2 T, which places the prior sum
    of T stump contributions over roughly (y_min, y_max) after the target is
    rescaled to [-0.5, 0.5].  ``tau_rate`` is data-dependent and filled by
    :func:`calibrate`.
    """

    n_trees: int = 10
    k: float = 2.0
    alpha: float = 0.95
    beta: float = 2.0
    nu: Optional[float] = None
    tau_mu: Optional[float] = None
    kappa: float = 0.3
    mix_shape1: float = 2.0
    mix_rate1: float = 2.5
    mix_shape2: float = 5000.0
    mix_rate2: float = 100.0
    tau_shape: float = 3.0
    tau_rate: Optional[float] = None
    tau_quantile: float = 0.9
    move_probs: tuple = DEFAULT_MOVE_PROBS
    angle_grid: tuple = DEFAULT_ANGLE_GRID
    lengthscale_grid: tuple = DEFAULT_LENGTHSCALE_GRID
    n_mcmc: int = 2000
    n_burnin: int = 500
    n_interval_draws: int = 10
    min_leaf: int = 1
    nugget: float = 1e-8
    nugget_max: float = 1e-4

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        if len(self.move_probs) != 5 or abs(sum(self.move_probs) - 1.0) > 1e-12:
            raise ValueError("move_probs must be five probabilities summing to 1")
        if self.n_burnin >= self.n_mcmc:
            raise ValueError("n_burnin must be smaller than n_mcmc")
        scale = 4.0 * self.k ** 2 * self.n_trees
        if self.nu is None:
            object.__setattr__(self, "nu", scale)
        if self.tau_mu is None:
            object.__setattr__(self, "tau_mu", scale)

    def kernel_state(self, lengthscales) -> KernelState:
        return KernelState(lengthscales=np.asarray(lengthscales, dtype=float),
                           nu=self.nu, tau_mu=self.tau_mu,
                           nugget=self.nugget, nugget_max=self.nugget_max)


@dataclass(frozen=True)
class Variant:
    letter: str
    gp_leaves: bool
    rotated_moves: bool


VARIANTS = {
    "A": Variant("A", gp_leaves=False, rotated_moves=False),
    "B": Variant("B", gp_leaves=False, rotated_moves=True),
    "C": Variant("C", gp_leaves=True, rotated_moves=False),
    "D": Variant("D", gp_leaves=True, rotated_moves=True),
}


def resolve_variant(variant) -> Variant:
    if isinstance(variant, Variant):
        return variant
    try:
        return VARIANTS[str(variant).upper()]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected one of A, B, C, D")


def move_probabilities(hp: Hyperparams, variant: Variant) -> dict:
    """Move distribution for a variant.

    Without projection moves, each projected move's mass folds into its
    plain counterpart, giving (0.3, 0.4, 0.3) at the default settings.
    """
    g, gp_, c, cp, pr = hp.move_probs
    if variant.rotated_moves:
        return {GROW: g, GROW_PROJECT: gp_, CHANGE: c, CHANGE_PROJECT: cp, PRUNE: pr}
    return {GROW: g + gp_, CHANGE: c + cp, PRUNE: pr}


@dataclass(frozen=True)
class TrainData:
    """Normalised training arrays plus the column roles the sampler needs."""

    X: np.ndarray
    y: np.ndarray
    continuous_cols: tuple
    categorical_cols: tuple = ()
    gp_cols: Optional[tuple] = None
    rot_cols: Optional[tuple] = None

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y row counts differ")
        if self.gp_cols is None:
            object.__setattr__(self, "gp_cols", tuple(self.continuous_cols))
        if self.rot_cols is None:
            object.__setattr__(self, "rot_cols", tuple(self.continuous_cols))


def partial_residuals(y: np.ndarray, fits: np.ndarray, t: int) -> np.ndarray:
    """Target minus the summed fits of every tree except ``t``."""
    return y - (fits.sum(axis=1) - fits[:, t])


def gibbs_tau(y: np.ndarray, y_hat: np.ndarray, tau_shape: float, tau_rate: float, rng) -> float:
    """Conjugate gamma draw of the residual precision."""
    resid = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    shape = 0.5 * y.shape[0] + tau_shape
    rate = 0.5 * float(resid @ resid) + tau_rate
    return float(rng.gamma(shape, 1.0 / rate))


def _gamma_logpdf(x: float, shape: float, rate: float) -> float:
    from scipy.special import gammaln

    return shape * math.log(rate) + (shape - 1.0) * math.log(x) - rate * x \
        - float(gammaln(shape))


def lengthscale_log_prior(x: float, hp: Hyperparams) -> float:
    """Log density of the two-component gamma mixture over a length-scale."""
    lp1 = _gamma_logpdf(x, hp.mix_shape1, hp.mix_rate1)
    lp2 = _gamma_logpdf(x, hp.mix_shape2, hp.mix_rate2)
    return float(np.logaddexp(math.log(hp.kappa) + lp1, math.log1p(-hp.kappa) + lp2))


def ols_precision(y: np.ndarray, X: np.ndarray):
    """Residual precision of a least-squares fit of y on [1, X].

    Rank deficiency is absorbed by the pseudo-inverse solve; with too few
    rows for any residual degrees of freedom the sample variance of y is
    used instead (with a warning).
    """
    import warnings

    n, p = X.shape
    if n <= p + 1:
        warnings.warn("not enough rows for an OLS residual variance; using var(y)")
        sigma2 = float(np.var(y, ddof=1)) if n > 1 else 1.0
        return 1.0 / max(sigma2, 1e-12)
    design = np.column_stack([np.ones(n), X])
    coef, _res, rank, _sv = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    dof = n - rank
    sigma2 = float(resid @ resid) / max(dof, 1)
    return 1.0 / max(sigma2, 1e-12)


def solve_tau_rate(tau_shape: float, tau_hat: float, quantile: float) -> float:
    """Rate d with Pr(tau >= tau_hat) = quantile under Gamma(shape, d).

    The upper tail is monotone decreasing in d, so the root is bracketed by
    doubling and found with Brent's method.
    """

    def tail_gap(d):
        return stats.gamma.sf(tau_hat, tau_shape, scale=1.0 / d) - quantile

    lo, hi = 1e-12, 1.0 / max(tau_hat, 1e-12)
    while tail_gap(hi) > 0.0:
        hi *= 10.0
        if hi > 1e18:
            raise RuntimeError("failed to bracket the gamma-rate root")
    return float(optimize.brentq(tail_gap, lo, hi, xtol=1e-15, rtol=8.9e-16))


def calibrate(y: np.ndarray, X: np.ndarray, hp: Hyperparams) -> Hyperparams:
    """Fill the data-driven pieces of ``hp`` from the rescaled target.

    Expects y already mapped to [-0.5, 0.5]; nu and tau_mu come from the
    induced-prior rule (already set unless overridden) and the residual
    precision prior is anchored at the OLS estimate.
    """
    y = np.asarray(y, dtype=float)
    if abs(y.min() + 0.5) > 1e-6 or abs(y.max() - 0.5) > 1e-6:
        raise ValueError("calibrate expects the target rescaled to [-0.5, 0.5]")
    tau_hat = ols_precision(y, np.asarray(X, dtype=float))
    rate = solve_tau_rate(hp.tau_shape, tau_hat, hp.tau_quantile)
    return replace(hp, tau_rate=rate)


class GPLeaf:
    """Leaf with a GP over its rows; the bundle caches all factorisations."""

    __slots__ = ("rows", "bundle")

    def __init__(self, rows, bundle):
        self.rows = rows
        self.bundle = bundle

    def loglik(self, resid_rows, tau):
        return gp.leaf_log_marginal(resid_rows, self.bundle, tau)

    def draw(self, resid_rows, tau, rng):
        return gp.sample_leaf_values(resid_rows, self.bundle, tau, rng)

    def rescaled(self, dim, value):
        return GPLeaf(self.rows, rescale_dim(self.bundle, dim, value))


class ConstantLeaf:
    """Standard constant-mean leaf: the zero-kernel limit in closed form."""

    __slots__ = ("rows", "tau_mu")

    def __init__(self, rows, tau_mu):
        self.rows = rows
        self.tau_mu = tau_mu

    def loglik(self, resid_rows, tau):
        n = resid_rows.shape[0]
        s = float(resid_rows.sum())
        q = float(resid_rows @ resid_rows)
        logdet = -n * math.log(tau) + math.log1p(tau * n / self.tau_mu)
        quad = tau * q - tau * tau * s * s / (self.tau_mu + tau * n)
        return -0.5 * (n * LOG_2PI + logdet + quad)

    def draw(self, resid_rows, tau, rng):
        n = resid_rows.shape[0]
        var = 1.0 / (self.tau_mu + n * tau)
        mean = tau * float(resid_rows.sum()) * var
        value = mean + math.sqrt(var) * rng.standard_normal()
        return np.full(n, value)


class TreeSampler:
    """Sampling state for a single tree of the ensemble."""

    def __init__(self, data: TrainData, hp: Hyperparams, variant: Variant,
                 move_cfg: MoveConfig):
        self.data = data
        self.hp = hp
        self.variant = variant
        self.move_cfg = move_cfg
        self.X_gp = np.ascontiguousarray(data.X[:, list(data.gp_cols)])
        n = data.X.shape[0]
        self.tree = DecisionTree.stump(n)
        self.lengthscales = np.ones(len(data.gp_cols))
        # the grid is the entire support the sweep ever visits, so the
        # mixture prior is a lookup table
        self._log_prior = {float(v): lengthscale_log_prior(float(v), hp)
                           for v in set(hp.lengthscale_grid) | {1.0}}
        self.leaves = {0: self._make_leaf(np.arange(n))}
        self.leaf_values = {0: np.zeros(n)}
        self.fitted = np.zeros(n)
        self._ll = {}

    def _make_leaf(self, rows):
        if self.variant.gp_leaves:
            kern = self.hp.kernel_state(self.lengthscales)
            return GPLeaf(rows, build_bundle(self.X_gp[rows], kern))
        return ConstantLeaf(rows, self.hp.tau_mu)

    def refresh_logliks(self, resid, tau):
        self._ll = {lid: self.leaves[lid].loglik(resid[self.leaves[lid].rows], tau)
                    for lid in sorted(self.leaves)}

    def tree_step(self, resid, tau, rng):
        """One MH proposal on the tree structure.

        The acceptance ratio is the marginalised leaf-likelihood ratio times
        the topology-prior ratio; only the leaves touched by the move enter
        the likelihood part since the others cancel exactly.
        Returns (accepted, move_kind).
        """
        self.refresh_logliks(resid, tau)
        prop = trees.propose_move(self.tree, self.data.X, self.move_cfg, rng)
        if not prop.valid:
            return False, prop.kind
        try:
            new_leaves = {lid: self._make_leaf(prop.tree.leaf_rows(lid))
                          for lid in prop.new_leaf_ids}
            ll_new = {lid: new_leaves[lid].loglik(resid[new_leaves[lid].rows], tau)
                      for lid in prop.new_leaf_ids}
        except gp.NumericsError:
            return False, prop.kind
        log_ratio = (sum(ll_new[lid] for lid in sorted(ll_new))
                     - sum(self._ll[lid] for lid in prop.old_leaf_ids)
                     + trees.log_tree_prior(prop.tree, self.hp.alpha, self.hp.beta)
                     - trees.log_tree_prior(self.tree, self.hp.alpha, self.hp.beta))
        # accept with probability min(1, exp(log_ratio)); exp underflow is a
        # certain rejection and u = 0 a certain acceptance, both exact
        if rng.uniform() >= math.exp(min(log_ratio, 0.0)):
            return False, prop.kind
        self.tree = prop.tree
        for lid in prop.old_leaf_ids:
            self.leaves.pop(lid, None)
            self._ll.pop(lid, None)
        self.leaves.update(new_leaves)
        self._ll.update(ll_new)
        return True, prop.kind

    def draw_values(self, resid, tau, rng):
        """Gibbs draw of every leaf's values; refreshes the fitted vector."""
        values = {}
        fitted = np.empty_like(self.fitted)
        for lid in sorted(self.leaves):
            leaf = self.leaves[lid]
            vals = leaf.draw(resid[leaf.rows], tau, rng)
            values[lid] = vals
            fitted[leaf.rows] = vals
        self.leaf_values = values
        self.fitted = fitted
        return fitted

    def lengthscale_step(self, resid, tau, rng):
        """Coordinate-wise MH sweep over the kernel length-scales.

        Each dimension proposes uniformly from the grid (a symmetric
        proposal) and is accepted on the whole-tree marginal likelihood
        times the mixture prior.  No-op for constant-leaf variants.
        """
        if not self.variant.gp_leaves:
            return 0
        grid = self.hp.lengthscale_grid
        n_accepted = 0
        for j in range(self.lengthscales.shape[0]):
            cand = float(grid[rng.integers(len(grid))])
            cur = float(self.lengthscales[j])
            if cand == cur:
                n_accepted += 1
                continue
            try:
                cand_leaves = {lid: leaf.rescaled(j, cand) for lid, leaf in self.leaves.items()}
                ll_cand = {lid: cand_leaves[lid].loglik(resid[cand_leaves[lid].rows], tau)
                           for lid in sorted(cand_leaves)}
            except gp.NumericsError:
                continue
            log_ratio = (sum(ll_cand[k] for k in sorted(ll_cand))
                         - sum(self._ll[k] for k in sorted(self._ll))
                         + self._log_prior[cand] - self._log_prior[cur])
            if rng.uniform() < math.exp(min(log_ratio, 0.0)):
                self.lengthscales[j] = cand
                self.leaves = cand_leaves
                self._ll = ll_cand
                n_accepted += 1
        return n_accepted


@dataclass
class Draw:
    """One retained posterior state."""

    trees: tuple
    lengthscales: np.ndarray
    tau: float
    fitted: np.ndarray
    leaf_values: tuple


@dataclass
class PosteriorDraws:
    """Retained draws plus everything needed to reproduce predictions."""

    draws: list
    hp: Hyperparams
    variant: str
    seed: object
    x_train: np.ndarray
    gp_cols: tuple
    rot_cols: tuple
    continuous_cols: tuple
    categorical_cols: tuple
    tau_trace: np.ndarray
    acceptance: dict
    acceptance_all: dict = None
    transform: object = None
    schema: object = None

    @property
    def n_draws(self) -> int:
        return len(self.draws)

    def acceptance_rates(self) -> dict:
        return {kind: (c["accepted"] / c["proposed"] if c["proposed"] else float("nan"))
                for kind, c in self.acceptance.items()}


def run(data: TrainData, hp: Hyperparams, variant, rng, verbose: bool = False,
        check_invariants: bool = False, seed_label=None) -> PosteriorDraws:
    """Run the full backfitting sampler and keep the post-burnin draws.

    ``rng`` may be a Generator or anything accepted by
    ``np.random.default_rng``; identical inputs give bit-identical output.
    """
    variant = resolve_variant(variant)
    rng = np.random.default_rng(rng)
    if hp.tau_rate is None:
        hp = calibrate(data.y, data.X, hp)
    move_cfg = MoveConfig(
        move_probs=move_probabilities(hp, variant),
        angle_grid=tuple(hp.angle_grid),
        continuous_cols=tuple(data.continuous_cols),
        categorical_cols=tuple(data.categorical_cols),
        rotation_cols=tuple(data.rot_cols) if variant.rotated_moves else (),
        min_leaf=hp.min_leaf,
    )
    n = data.X.shape[0]
    T = hp.n_trees
    samplers = [TreeSampler(data, hp, variant, move_cfg) for _ in range(T)]
    fits = np.zeros((n, T))
    tau = 1.0

    ll0 = samplers[0].leaves[0].loglik(data.y, tau)
    if not math.isfinite(ll0):
        raise gp.NumericsError(
            f"non-finite likelihood at initialisation (n={n}, "
            f"y range [{data.y.min():.3g}, {data.y.max():.3g}])")

    move_kinds = list(move_probabilities(hp, variant))
    counts = {k: {"proposed": 0, "accepted": 0} for k in move_kinds}
    counts_all = {k: {"proposed": 0, "accepted": 0} for k in move_kinds}
    draws = []
    tau_trace = np.empty(hp.n_mcmc)

    for m in range(1, hp.n_mcmc + 1):
        retained = m > hp.n_burnin
        for t in range(T):
            ts = samplers[t]
            resid = partial_residuals(data.y, fits, t)
            accepted, kind = ts.tree_step(resid, tau, rng)
            counts_all[kind]["proposed"] += 1
            counts_all[kind]["accepted"] += int(accepted)
            if retained:
                counts[kind]["proposed"] += 1
                counts[kind]["accepted"] += int(accepted)
            fits[:, t] = ts.draw_values(resid, tau, rng)
            ts.lengthscale_step(resid, tau, rng)
        tau = gibbs_tau(data.y, fits.sum(axis=1), hp.tau_shape, hp.tau_rate, rng)
        tau_trace[m - 1] = tau

        if check_invariants:
            _check_state(samplers, fits, data.X)
        if retained:
            draws.append(Draw(
                trees=tuple(ts.tree for ts in samplers),
                lengthscales=np.array([ts.lengthscales for ts in samplers]),
                tau=tau,
                fitted=fits.sum(axis=1),
                leaf_values=tuple(dict(ts.leaf_values) for ts in samplers),
            ))
        if verbose and m % 100 == 0:
            depth = np.mean([ts.tree.max_depth() for ts in samplers])
            rates = ", ".join(
                f"{k}={c['accepted'] / c['proposed']:.2f}" if c["proposed"] else f"{k}=--"
                for k, c in counts_all.items())
            print(f"[iter {m}] tau={tau:.4f} mean_depth={depth:.2f} accept: {rates}",
                  file=sys.stderr)

    return PosteriorDraws(
        draws=draws, hp=hp, variant=variant.letter, seed=seed_label,
        x_train=data.X.copy(), gp_cols=tuple(data.gp_cols), rot_cols=tuple(data.rot_cols),
        continuous_cols=tuple(data.continuous_cols),
        categorical_cols=tuple(data.categorical_cols),
        tau_trace=tau_trace, acceptance=counts, acceptance_all=counts_all,
    )


def _check_state(samplers, fits, X):
    """Test-mode invariants: leaf partitions and fitted-column consistency."""
    for t, ts in enumerate(samplers):
        trees.check_partition(ts.tree, X.shape[0])
        routed = trees.assign_rows(ts.tree, X)
        if not np.array_equal(routed, ts.tree.leaf_assignments):
            raise AssertionError(f"tree {t}: stored assignments disagree with routing")
        recon = np.empty(X.shape[0])
        for lid, vals in ts.leaf_values.items():
            recon[ts.tree.leaf_rows(lid)] = vals
        if not np.array_equal(recon, fits[:, t]):
            raise AssertionError(f"tree {t}: fitted column out of sync with leaf values")
