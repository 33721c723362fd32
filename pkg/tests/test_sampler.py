import math

import numpy as np
import pytest
from scipy import stats

from gptrees import evaluate, io, sampler, trees
from gptrees.sampler import (ConstantLeaf, Hyperparams, TrainData, TreeSampler,
                             calibrate, gibbs_tau, lengthscale_log_prior,
                             move_probabilities, ols_precision, partial_residuals,
                             resolve_variant, run, solve_tau_rate)
from oracles import gamma_mixture_logpdf, gamma_upper_tail


def make_data(rng, n=40, p=2):
    X = rng.random((n, p))
    y = np.sin(3 * X[:, 0]) + X[:, 1] + 0.1 * rng.standard_normal(n)
    y = (y - y.min()) / (y.max() - y.min()) - 0.5
    return TrainData(X=X, y=y, continuous_cols=tuple(range(p)))


class TestHyperparams:
    def test_default_precisions(self):
        hp = Hyperparams()
        assert hp.nu == hp.tau_mu == 160.0  # 4 * 2^2 * 10

    def test_single_tree_precisions(self):
        hp = Hyperparams(n_trees=1, k=2.0)
        assert hp.nu == hp.tau_mu == 16.0

    def test_explicit_override_kept(self):
        hp = Hyperparams(nu=99.0)
        assert hp.nu == 99.0
        assert hp.tau_mu == 160.0

    def test_validation(self):
        with pytest.raises(ValueError):
            Hyperparams(kappa=1.5)
        with pytest.raises(ValueError):
            Hyperparams(move_probs=(0.5, 0.5, 0.0, 0.0, 0.1))
        with pytest.raises(ValueError):
            Hyperparams(n_mcmc=100, n_burnin=100)
        with pytest.raises(ValueError):
            Hyperparams(alpha=1.0)

    def test_variant_move_probabilities(self):
        hp = Hyperparams()
        with_rot = move_probabilities(hp, resolve_variant("D"))
        assert with_rot == {"grow": 0.15, "grow-project": 0.15, "change": 0.2,
                            "change-project": 0.2, "prune": 0.3}
        no_rot = move_probabilities(hp, resolve_variant("A"))
        assert no_rot == {"grow": pytest.approx(0.3), "change": pytest.approx(0.4),
                          "prune": pytest.approx(0.3)}

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            resolve_variant("E")


class TestCalibrate:
    def test_tau_rate_solution_matches_tail_oracle(self):
        rate = solve_tau_rate(3.0, 100.0, 0.9)
        assert rate == pytest.approx(0.01102065328249321, abs=1e-8)
        assert gamma_upper_tail(100.0, 3.0, rate) == pytest.approx(0.9, abs=1e-10)

    def test_calibrate_fills_rate(self, rng):
        data = make_data(rng, n=60)
        hp = calibrate(data.y, data.X, Hyperparams())
        assert hp.tau_rate is not None and hp.tau_rate > 0
        tau_hat = ols_precision(data.y, data.X)
        assert stats.gamma.sf(tau_hat, hp.tau_shape, scale=1.0 / hp.tau_rate) == \
            pytest.approx(hp.tau_quantile, abs=1e-9)

    def test_requires_rescaled_target(self, rng):
        data = make_data(rng)
        with pytest.raises(ValueError):
            calibrate(data.y * 3.0, data.X, Hyperparams())

    def test_ols_short_data_falls_back_to_variance(self, rng):
        y = np.array([0.1, -0.2, 0.3])
        X = rng.random((3, 4))
        with pytest.warns(UserWarning):
            tau_hat = ols_precision(y, X)
        assert tau_hat == pytest.approx(1.0 / np.var(y, ddof=1))

    def test_ols_rank_deficient_uses_pseudoinverse(self, rng):
        X = rng.random((30, 2))
        X = np.column_stack([X, X[:, 0]])  # duplicated column
        y = X[:, 0] + 0.01 * rng.standard_normal(30)
        assert ols_precision(y, X) > 0


class TestPartialResiduals:
    def test_single_tree_returns_target(self, rng):
        y = rng.normal(size=7)
        fits = rng.normal(size=(7, 1))
        np.testing.assert_allclose(partial_residuals(y, fits, 0), y)

    def test_zero_other_fits(self, rng):
        y = rng.normal(size=5)
        fits = np.zeros((5, 3))
        fits[:, 1] = rng.normal(size=5)
        np.testing.assert_allclose(partial_residuals(y, fits, 1), y)

    def test_direct_subtraction(self):
        y = np.array([1.0, 2.0])
        fits = np.column_stack([np.zeros(2), np.array([0.5, 0.5])])
        np.testing.assert_allclose(partial_residuals(y, fits, 0), [0.5, 1.5])


class TestGibbsTau:
    def test_zero_residual_gamma_moments(self, rng):
        y = rng.normal(size=10)
        draws = np.array([gibbs_tau(y, y, 3.0, 2.0, rng) for _ in range(100_000)])
        shape, rate = 10 / 2 + 3.0, 2.0
        se = math.sqrt(shape / rate**2 / draws.size)
        assert abs(draws.mean() - shape / rate) < 3 * se

    def test_unit_residuals_example(self, rng):
        y = np.array([1.0, 1.0])
        y_hat = np.zeros(2)
        draws = np.array([gibbs_tau(y, y_hat, 3.0, 1.0, rng) for _ in range(100_000)])
        # Ga(2/2 + 3, 0.5*2 + 1) = Ga(4, 2), mean 2
        se = math.sqrt(4.0 / 4.0 / draws.size)
        assert abs(draws.mean() - 2.0) < 3 * se


class TestLengthscalePrior:
    def test_density_at_small_value(self):
        hp = Hyperparams()
        assert math.exp(lengthscale_log_prior(0.8, hp)) == pytest.approx(0.203002924855, rel=1e-9)

    def test_density_at_grid_max_matches_oracle(self):
        # the second mixture component peaks at 50, so the density there is O(0.4)
        hp = Hyperparams()
        want = gamma_mixture_logpdf(50.0, hp.kappa, hp.mix_shape1, hp.mix_rate1,
                                    hp.mix_shape2, hp.mix_rate2)
        assert lengthscale_log_prior(50.0, hp) == pytest.approx(want, abs=1e-9)
        # only the first component's contribution is negligible at 50
        first = hp.kappa * stats.gamma.pdf(50.0, hp.mix_shape1, scale=1.0 / hp.mix_rate1)
        assert first < 1e-50

    def test_identical_proposal_always_accepted(self, rng):
        data = make_data(rng)
        hp = Hyperparams(n_trees=1, lengthscale_grid=(1.0,), tau_rate=1.0)
        variant = resolve_variant("D")
        ts = TreeSampler(data, hp, variant, _move_cfg(data, hp, variant))
        ts.refresh_logliks(data.y, 1.0)
        before = ts.lengthscales.copy()
        accepted = ts.lengthscale_step(data.y, 1.0, rng)
        assert accepted == len(data.gp_cols)
        np.testing.assert_array_equal(ts.lengthscales, before)


def _move_cfg(data, hp, variant):
    return trees.MoveConfig(
        move_probs=move_probabilities(hp, variant),
        angle_grid=tuple(hp.angle_grid),
        continuous_cols=tuple(data.continuous_cols),
        categorical_cols=tuple(data.categorical_cols),
        rotation_cols=tuple(data.rot_cols) if variant.rotated_moves else (),
        min_leaf=hp.min_leaf,
    )


class TestTreeStep:
    def test_identical_proposal_always_accepted(self, rng, monkeypatch):
        data = make_data(rng)
        hp = Hyperparams(n_trees=1, tau_rate=1.0)
        variant = resolve_variant("D")
        ts = TreeSampler(data, hp, variant, _move_cfg(data, hp, variant))

        def same_tree_proposal(tree, X, cfg, _rng, kind=None):
            return trees.MoveProposal(kind="change", node_ids=(0,), tree=tree,
                                      valid=True, old_leaf_ids=(0,), new_leaf_ids=(0,))

        monkeypatch.setattr(trees, "propose_move", same_tree_proposal)
        for _ in range(25):
            accepted, kind = ts.tree_step(data.y, 1.0, rng)
            assert accepted and kind == "change"

    def test_invalid_proposal_counts_as_rejection(self, rng, monkeypatch):
        data = make_data(rng)
        hp = Hyperparams(n_trees=1, tau_rate=1.0)
        variant = resolve_variant("D")
        ts = TreeSampler(data, hp, variant, _move_cfg(data, hp, variant))
        monkeypatch.setattr(trees, "propose_move",
                            lambda *a, **k: trees.MoveProposal(kind="prune"))
        accepted, kind = ts.tree_step(data.y, 1.0, rng)
        assert not accepted and kind == "prune"

    def test_acceptance_ratio_in_unit_interval(self, rng):
        # gamma* = min(1, exp(log_ratio)) by construction; verify the log
        # ratio is finite over many random proposals
        data = make_data(rng, n=60)
        hp = calibrate(data.y, data.X, Hyperparams(n_trees=2))
        variant = resolve_variant("D")
        ts = TreeSampler(data, hp, variant, _move_cfg(data, hp, variant))
        for _ in range(400):
            ts.refresh_logliks(data.y, 2.0)
            prop = trees.propose_move(ts.tree, data.X, ts.move_cfg, rng)
            if not prop.valid:
                continue
            new_leaves = {lid: ts._make_leaf(prop.tree.leaf_rows(lid))
                          for lid in prop.new_leaf_ids}
            ll_new = sum(l.loglik(data.y[l.rows], 2.0) for l in new_leaves.values())
            ll_old = sum(ts._ll[lid] for lid in prop.old_leaf_ids)
            log_ratio = (ll_new - ll_old
                         + trees.log_tree_prior(prop.tree, hp.alpha, hp.beta)
                         - trees.log_tree_prior(ts.tree, hp.alpha, hp.beta))
            gamma_star = min(1.0, math.exp(min(log_ratio, 0.0)))
            assert 0.0 <= gamma_star <= 1.0 and math.isfinite(log_ratio)
            ts.tree_step(data.y, 2.0, rng)


class TestConstantLeaf:
    def test_loglik_matches_mvn_density(self, rng):
        tau_mu, tau = 160.0, 2.3
        rows = np.arange(4)
        leaf = ConstantLeaf(rows, tau_mu)
        r = rng.normal(size=4)
        cov = np.eye(4) / tau + np.ones((4, 4)) / tau_mu
        want = stats.multivariate_normal(mean=np.zeros(4), cov=cov).logpdf(r)
        assert leaf.loglik(r, tau) == pytest.approx(want, rel=1e-10)

    def test_draw_is_constant_with_conjugate_moments(self, rng):
        tau_mu, tau = 20.0, 4.0
        leaf = ConstantLeaf(np.arange(3), tau_mu)
        r = np.array([0.5, 0.7, 0.9])
        draws = np.array([leaf.draw(r, tau, rng) for _ in range(50_000)])
        assert np.all(draws.min(axis=1) == draws.max(axis=1))  # constant per draw
        var = 1.0 / (tau_mu + 3 * tau)
        mean = tau * r.sum() * var
        got = draws[:, 0]
        assert abs(got.mean() - mean) < 4 * math.sqrt(var / draws.shape[0])
        assert abs(got.var() - var) < 5 * var * math.sqrt(2.0 / draws.shape[0])


class TestRun:
    def test_single_retained_draw(self, rng):
        data = make_data(rng)
        hp = Hyperparams(n_trees=3, n_mcmc=6, n_burnin=5)
        out = run(data, hp, "D", rng)
        assert out.n_draws == 1
        assert out.tau_trace.shape == (6,)

    def test_first_proposals_are_grow_type(self, rng):
        # every tree is a stump when it receives its first proposal
        data = make_data(rng)
        hp = Hyperparams(n_trees=6, n_mcmc=1, n_burnin=0)
        out = run(data, hp, "D", rng)
        proposed = {k for k, c in out.acceptance_all.items() if c["proposed"] > 0}
        assert proposed <= {"grow", "grow-project"}
        assert sum(c["proposed"] for c in out.acceptance_all.values()) == 6

    def test_variant_a_has_no_projection_moves(self, rng):
        data = make_data(rng)
        hp = Hyperparams(n_trees=3, n_mcmc=20, n_burnin=10)
        out = run(data, hp, "A", rng)
        assert set(out.acceptance) == {"grow", "change", "prune"}

    def test_variant_a_leaf_values_constant(self, rng):
        data = make_data(rng)
        hp = Hyperparams(n_trees=2, n_mcmc=12, n_burnin=10)
        out = run(data, hp, "A", rng)
        for draw in out.draws:
            for lv in draw.leaf_values:
                for vals in lv.values():
                    assert np.all(vals == vals[0])

    def test_determinism(self, rng):
        data = make_data(rng, n=50)
        hp = Hyperparams(n_trees=4, n_mcmc=40, n_burnin=20)
        a = run(data, hp, "D", np.random.default_rng(123))
        b = run(data, hp, "D", np.random.default_rng(123))
        assert a.n_draws == b.n_draws
        np.testing.assert_array_equal(a.tau_trace, b.tau_trace)
        for da, db in zip(a.draws, b.draws):
            np.testing.assert_array_equal(da.fitted, db.fitted)
            np.testing.assert_array_equal(da.lengthscales, db.lengthscales)
            for ta, tb in zip(da.trees, db.trees):
                assert ta.nodes == tb.nodes

    def test_invariants_hold_during_sampling(self, rng):
        data = make_data(rng, n=80, p=3)
        hp = Hyperparams(n_trees=3, n_mcmc=30, n_burnin=10)
        run(data, hp, "D", rng, check_invariants=True)
        run(data, hp, "A", rng, check_invariants=True)

    def test_auto_calibration(self, rng):
        data = make_data(rng)
        hp = Hyperparams(n_trees=2, n_mcmc=8, n_burnin=4)
        out = run(data, hp, "C", rng)
        assert out.hp.tau_rate is not None

    def test_nonfinite_initial_likelihood_aborts(self, rng):
        from gptrees.gp import NumericsError
        X = rng.random((10, 2))
        y = np.full(10, np.nan)
        data = TrainData(X=X, y=y, continuous_cols=(0, 1))
        hp = Hyperparams(n_trees=2, n_mcmc=4, n_burnin=2, tau_rate=1.0)
        with pytest.raises(NumericsError, match="initialisation"):
            run(data, hp, "D", rng)

    def test_verbose_progress_line_on_stderr(self, rng, capfd):
        data = make_data(rng)
        hp = Hyperparams(n_trees=2, n_mcmc=100, n_burnin=50)
        run(data, hp, "A", rng, verbose=True)
        err = capfd.readouterr().err
        assert "[iter 100]" in err
        assert "tau=" in err and "mean_depth=" in err and "grow=" in err


class TestAffineInvariance:
    def test_rescaled_target_gives_rescaled_predictions(self, rng):
        X = rng.random((40, 2))
        y = np.sin(4 * X[:, 0]) + 0.2 * rng.standard_normal(40)
        hp = Hyperparams(n_trees=3, n_mcmc=50, n_burnin=25)
        ds1 = io.from_arrays(X, y)
        ds2 = io.from_arrays(X, 3.0 * y - 7.0)
        d1 = evaluate.fit_model(ds1, hp, "D", seed=11)
        d2 = evaluate.fit_model(ds2, hp, "D", seed=11)
        p1 = evaluate.predict_dataset(d1, ds1, seed=5)
        p2 = evaluate.predict_dataset(d2, ds2, seed=5)
        np.testing.assert_allclose(p2.mean, 3.0 * p1.mean - 7.0, atol=1e-8)
