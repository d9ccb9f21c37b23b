import numpy as np
import pytest

import mnarimpute.solvers as solvers_mod
from mnarimpute.linalg import svd_soft_threshold
from mnarimpute.solvers import (
    GridSearchResult,
    SolverError,
    SolveOptions,
    fista_solve,
    ista_solve,
    lambda_grid_search,
    penalized_objective,
    weighted_ls_gradient,
)
from tests.test_linalg import nuclear_subgradient_gap


def masked_problem(rng, n=20, p=10, miss=0.3, scale=1.0):
    y = scale * rng.standard_normal((n, p))
    mask = (rng.random((n, p)) > miss).astype(float)
    return y, mask


class TestGradient:
    def test_zero_at_full_data_optimum(self, rng):
        y = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(weighted_ls_gradient(y, y, np.ones_like(y)), 0.0)

    def test_zero_mask(self, rng):
        y = rng.standard_normal((4, 3))
        theta = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(weighted_ls_gradient(theta, y, np.zeros_like(y)), 0.0)

    def test_hand_computed(self):
        theta = np.array([[1.0, 2.0], [3.0, 4.0]])
        y = np.array([[0.0, 2.0], [3.0, 0.0]])
        mask = np.array([[1.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(
            weighted_ls_gradient(theta, y, mask), np.array([[1.0, 0.0], [0.0, 0.0]])
        )

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            weighted_ls_gradient(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            weighted_ls_gradient(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))

    def test_masked_nan_placeholders_ignored(self):
        y = np.array([[1.0, np.nan]])
        mask = np.array([[1.0, 0.0]])
        g = weighted_ls_gradient(np.zeros((1, 2)), y, mask)
        np.testing.assert_array_equal(g, np.array([[-1.0, 0.0]]))


def reference_prox_gradient_iterates(y, mask, lam, iters):
    """Independently coded proximal-gradient update: explicit gradient step then prox."""
    y0 = np.where(mask == 1.0, y, 0.0)
    theta = np.zeros_like(y0)
    out = []
    for _ in range(iters):
        theta = svd_soft_threshold(theta - mask * (theta - y0), lam)
        out.append(theta)
    return out


def softimpute_iterates(y, mask, lam, iters):
    """The imputation form: fill missing cells with the iterate, then shrink."""
    y0 = np.where(mask == 1.0, y, 0.0)
    theta = np.zeros_like(y0)
    out = []
    for _ in range(iters):
        theta = svd_soft_threshold(mask * y0 + (1.0 - mask) * theta, lam)
        out.append(theta)
    return out


class TestIsta:
    def test_no_penalty_full_mask_recovers_y(self, rng):
        a = rng.standard_normal((6, 2))
        y = a @ rng.standard_normal((2, 5))  # rank deficient
        res = ista_solve(y, np.ones_like(y), SolveOptions(lam=0.0, rel_tol=1e-12))
        np.testing.assert_allclose(res.theta_hat, y, atol=1e-10)
        assert res.converged

    def test_huge_lambda_gives_zero_after_one_step(self, rng):
        y, mask = masked_problem(rng)
        lam = np.linalg.svd(y * mask, compute_uv=False)[0] + 1.0
        res = ista_solve(y, mask, SolveOptions(lam=lam))
        np.testing.assert_array_equal(res.theta_hat, 0.0)
        assert res.iterations_run <= 2

    def test_matches_independent_prox_gradient(self, rng):
        # the imputation form and the gradient form are the same map
        for _ in range(5):
            y, mask = masked_problem(rng)
            res = ista_solve(y, mask, SolveOptions(lam=1.0, max_iters=50, rel_tol=0.0))
            ref = reference_prox_gradient_iterates(y, mask, 1.0, 50)
            assert np.abs(res.theta_hat - ref[-1]).max() <= 1e-10

    def test_objective_trace_monotone(self, rng):
        y, mask = masked_problem(rng, scale=2.0)
        res = ista_solve(y, mask, SolveOptions(lam=0.8, max_iters=120, rel_tol=0.0))
        diffs = np.diff(res.objective_trace)
        assert np.all(diffs <= 1e-10 * max(res.objective_trace[0], 1.0))

    def test_trace_values_are_exact_objective(self, rng):
        y, mask = masked_problem(rng)
        res = ista_solve(y, mask, SolveOptions(lam=0.5, max_iters=30, rel_tol=0.0))
        assert res.final_objective == pytest.approx(
            penalized_objective(res.theta_hat, y, mask, 0.5), abs=1e-9
        )

    def test_fixed_point_satisfies_stationarity(self, rng):
        y, mask = masked_problem(rng, n=8, p=6)
        lam = 0.6
        res = ista_solve(y, mask, SolveOptions(lam=lam, max_iters=5000, rel_tol=1e-14))
        theta = res.theta_hat
        # mask*(theta - y) must lie in -lam * (nuclear subdifferential at theta)
        grad = weighted_ls_gradient(theta, y, mask)
        assert nuclear_subgradient_gap(theta - grad, theta, lam) < 1e-6

    def test_mask_validation(self, rng):
        y = rng.standard_normal((3, 3))
        with pytest.raises(ValueError):
            ista_solve(y, 0.5 * np.ones_like(y), SolveOptions(lam=1.0))


class TestFista:
    def test_no_penalty_full_mask(self, rng):
        y = rng.standard_normal((10, 6))
        res = fista_solve(y, np.ones_like(y), SolveOptions(lam=0.0, max_iters=50, rel_tol=1e-12))
        assert res.final_objective <= 1e-8
        np.testing.assert_allclose(res.theta_hat, y, atol=1e-8)

    def test_first_iterate_equals_ista(self, rng):
        y, mask = masked_problem(rng)
        opts = SolveOptions(lam=0.7, max_iters=1, rel_tol=0.0)
        a = ista_solve(y, mask, opts).theta_hat
        b = fista_solve(y, mask, opts).theta_hat
        np.testing.assert_array_equal(a, b)

    def test_not_worse_than_ista_at_200_iterations(self, rng):
        y, mask = masked_problem(rng, n=30, p=20)
        lam = 0.1 * np.linalg.svd(y * mask, compute_uv=False)[0]
        opts = SolveOptions(lam=lam, max_iters=200, rel_tol=0.0)
        obj_i = ista_solve(y, mask, opts).final_objective
        obj_f = fista_solve(y, mask, SolveOptions(lam=lam, max_iters=200, rel_tol=0.0)).final_objective
        assert obj_f <= obj_i + 1e-12

    def test_conventional_momentum_seed_flag(self, rng):
        y, mask = masked_problem(rng)
        res = fista_solve(y, mask, SolveOptions(lam=0.5, max_iters=80, rel_tol=0.0, kappa0=1.0))
        assert np.isfinite(res.final_objective)


class TestGridSearch:
    def test_single_element_grid(self, rng):
        y, mask = masked_problem(rng)
        gsr = lambda_grid_search(y, mask, [0.5], lambda r: r.final_objective, SolveOptions(lam=0.5))
        assert gsr.best_lambda == 0.5
        assert len(gsr.sweep) == 1

    def test_objective_decreases_with_lambda_on_noiseless_instance(self, rng):
        u = rng.standard_normal((12, 1))
        v = rng.standard_normal((1, 6))
        y = u @ v
        mask = np.ones_like(y)
        gsr = lambda_grid_search(
            y, mask, [10.0, 1.0, 0.1], lambda r: r.final_objective,
            SolveOptions(lam=1.0, max_iters=300, rel_tol=1e-10),
        )
        scores = [pt.score for pt in gsr.sweep]
        assert scores[0] > scores[1] > scores[2]
        assert gsr.best_lambda == 0.1

    def test_warm_start_matches_cold_sweep_on_oracle(self, rng):
        # oracle selector: total error against the generating matrix
        theta = rng.standard_normal((15, 2)) @ rng.standard_normal((2, 8))
        y = theta + 0.3 * rng.standard_normal(theta.shape)
        mask = (rng.random(theta.shape) > 0.3).astype(float)
        grid = list(np.geomspace(5.0, 0.05, 8))

        def oracle(res):
            return float(np.sum((res.theta_hat - theta) ** 2))

        opts = SolveOptions(lam=1.0, max_iters=400, rel_tol=1e-9)
        warm = lambda_grid_search(y, mask, grid, oracle, opts, warm_start=True)
        cold = lambda_grid_search(y, mask, grid, oracle, opts, warm_start=False)
        assert warm.best_lambda == cold.best_lambda

    def test_ties_break_toward_larger_lambda(self, rng):
        y, mask = masked_problem(rng)
        gsr = lambda_grid_search(y, mask, [2.0, 1.0], lambda r: 1.0, SolveOptions(lam=1.0))
        assert gsr.best_lambda == 2.0

    def test_grid_validation(self, rng):
        y, mask = masked_problem(rng)
        opts = SolveOptions(lam=1.0)
        with pytest.raises(ValueError):
            lambda_grid_search(y, mask, [], lambda r: 0.0, opts)
        with pytest.raises(ValueError):
            lambda_grid_search(y, mask, [1.0, 2.0], lambda r: 0.0, opts)
        with pytest.raises(ValueError):
            lambda_grid_search(y, mask, [1.0, -2.0], lambda r: 0.0, opts)

    def test_per_point_failures_recorded(self, rng, monkeypatch):
        y, mask = masked_problem(rng)
        real_solve = solvers_mod.solve

        def flaky(y_, mask_, opts, theta_init=None):
            if opts.lam < 1.0:
                raise SolverError("synthetic failure")
            return real_solve(y_, mask_, opts, theta_init=theta_init)

        monkeypatch.setattr(solvers_mod, "solve", flaky)
        gsr = lambda_grid_search(y, mask, [2.0, 0.5], lambda r: r.final_objective, SolveOptions(lam=1.0))
        assert gsr.best_lambda == 2.0
        assert gsr.sweep[1].error is not None

    def test_all_points_failing_raises(self, rng, monkeypatch):
        y, mask = masked_problem(rng)

        def broken(*a, **k):
            raise SolverError("down")

        monkeypatch.setattr(solvers_mod, "solve", broken)
        with pytest.raises(SolverError):
            lambda_grid_search(y, mask, [1.0], lambda r: 0.0, SolveOptions(lam=1.0))


class TestEquivalenceProperty:
    def test_softimpute_and_prox_gradient_identical_iterates(self, rng):
        for _ in range(8):
            y, mask = masked_problem(rng, n=15, p=9, miss=0.4)
            lam = float(rng.uniform(0.2, 2.0))
            a = softimpute_iterates(y, mask, lam, 50)
            b = reference_prox_gradient_iterates(y, mask, lam, 50)
            worst = max(np.abs(x1 - x2).max() for x1, x2 in zip(a, b))
            assert worst <= 1e-10
