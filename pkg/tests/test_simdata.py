import numpy as np
import pytest

from gptrees import simdata
from gptrees.gp import kernel_matrix
from gptrees.simdata import (BenchmarkSpec, FriedmanSpec, benchmark_mean,
                             benchmark_regions, friedman_mean, gen_benchmark,
                             gen_friedman)


class TestBenchmark:
    def test_all_left_region_mean(self):
        # x1 <= x2, x1 <= -x2, x1 <= 0  ->  -10 + 0 + 10 = 0
        X = np.array([[-0.5, -0.2]])
        assert benchmark_mean(X)[0] == pytest.approx(0.0)

    def test_all_right_region_mean(self):
        # x1 > x2, x1 > -x2, x1 > 0  ->  5 + 20 - 15 = 10
        X = np.array([[0.5, 0.2]])
        assert benchmark_mean(X)[0] == pytest.approx(10.0)

    def test_noise_variance(self):
        spec = BenchmarkSpec(n=10_000, seed=3)
        _X, y, truth = gen_benchmark(spec)
        noise = y - truth
        se = 0.1 * np.sqrt(2.0 / (spec.n - 1))
        assert abs(noise.var(ddof=1) - 0.1) < 3 * se

    def test_regions_partition_rows(self):
        X, _y, _t = gen_benchmark(BenchmarkSpec(n=500, seed=1))
        for left in benchmark_regions(X):
            assert np.count_nonzero(left) + np.count_nonzero(~left) == 500

    def test_deterministic_given_seed(self):
        a = gen_benchmark(BenchmarkSpec(n=64, seed=9))
        b = gen_benchmark(BenchmarkSpec(n=64, seed=9))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_two_rows_minimum(self):
        with pytest.raises(ValueError):
            gen_benchmark(BenchmarkSpec(n=1))

    @pytest.mark.slow
    def test_spatial_term_covariance(self):
        # repeated spatial draws at fixed rows reproduce the kernel; with
        # n^2/2 entries a few outliers beyond 3 SE are expected by chance
        rng = np.random.default_rng(42)
        n, reps = 500, 2000
        X = rng.uniform(-1, 1, size=(n, 2))
        omega = kernel_matrix(X, [3.0, 3.0], 0.1, 1e-10)
        chol = np.linalg.cholesky(omega)
        draws = (chol @ rng.standard_normal((n, reps))).T
        emp = np.cov(draws.T, bias=True)
        se = np.sqrt((np.outer(np.diag(omega), np.diag(omega)) + omega**2) / reps)
        frac_in = np.mean(np.abs(emp - omega) <= 3 * se)
        assert frac_in >= 0.985


class TestFriedman:
    def test_mean_at_half_point(self):
        X = np.full((1, 5), 0.5)
        assert friedman_mean(X)[0] == pytest.approx(14.571067811865476, abs=1e-9)

    def test_mean_vanishes(self):
        X = np.array([[0.0, 0.3, 0.5, 0.0, 0.0]])
        assert friedman_mean(X)[0] == pytest.approx(0.0, abs=1e-12)

    def test_noise_dims_do_not_enter_truth(self):
        rng = np.random.default_rng(0)
        X = rng.random((50, 10))
        t1 = friedman_mean(X)
        X2 = X.copy()
        X2[:, 5:] = rng.random((50, 5))
        np.testing.assert_array_equal(t1, friedman_mean(X2))

    def test_p_below_five_rejected(self):
        with pytest.raises(ValueError):
            FriedmanSpec(n=10, p=4)

    def test_deterministic_given_seed(self):
        a = gen_friedman(FriedmanSpec(n=32, p=7, seed=5))
        b = gen_friedman(FriedmanSpec(n=32, p=7, seed=5))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_noise_level(self):
        _X, y, truth = gen_friedman(FriedmanSpec(n=20_000, p=5, seed=8))
        noise = y - truth
        se = 0.01 * np.sqrt(2.0 / 19_999)
        assert abs(noise.var(ddof=1) - 0.01) < 3 * se
