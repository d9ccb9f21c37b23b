import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnarimpute.linalg import (
    SvdConvergenceError,
    nuclear_norm,
    numerical_rank,
    soft_threshold_with_values,
    svd,
    svd_soft_threshold,
)


def random_matrix(rng, n, p, scale=1.0):
    return scale * rng.standard_normal((n, p))


class TestSvd:
    def test_identity(self):
        f = svd(np.eye(3))
        np.testing.assert_allclose(f.singular_values, np.ones(3))
        np.testing.assert_allclose(f.u, np.eye(3))
        np.testing.assert_allclose(f.vt, np.eye(3))

    def test_diagonal(self):
        f = svd(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(f.singular_values, [3.0, 1.0])

    def test_reconstruction_random(self, rng):
        x = random_matrix(rng, 5, 4)
        f = svd(x)
        # direct multiplication oracle
        rel = np.linalg.norm(f.reconstruct() - x) / np.linalg.norm(x)
        assert rel < 1e-10

    def test_singular_values_sorted_nonnegative(self, rng):
        for _ in range(10):
            f = svd(random_matrix(rng, 6, 3))
            s = f.singular_values
            assert np.all(s >= 0)
            assert np.all(np.diff(s) <= 0)

    def test_orthonormal_columns(self, rng):
        f = svd(random_matrix(rng, 7, 4))
        np.testing.assert_allclose(f.u.T @ f.u, np.eye(4), atol=1e-12)
        np.testing.assert_allclose(f.vt @ f.vt.T, np.eye(4), atol=1e-12)

    def test_sign_convention_deterministic(self, rng):
        x = random_matrix(rng, 6, 5)
        f1, f2 = svd(x), svd(x.copy())
        np.testing.assert_array_equal(f1.u, f2.u)
        np.testing.assert_array_equal(f1.vt, f2.vt)
        # first non-negligible entry of each left vector is positive
        for k in range(f1.u.shape[1]):
            col = f1.u[:, k]
            nz = np.nonzero(np.abs(col) > 1e-12 * np.abs(col).max())[0]
            assert col[nz[0]] > 0

    def test_rejects_nonfinite(self):
        x = np.ones((2, 2))
        x[0, 0] = np.nan
        with pytest.raises(ValueError):
            svd(x)
        with pytest.raises(ValueError):
            svd(np.array([1.0, 2.0]))


class TestNuclearNorm:
    def test_identity(self):
        assert nuclear_norm(np.eye(2)) == pytest.approx(2.0)

    def test_zero(self):
        assert nuclear_norm(np.zeros((3, 5))) == 0.0

    def test_rank_one_outer_product(self, rng):
        u = rng.standard_normal(6)
        v = rng.standard_normal(4)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        # single nonzero singular value equals |u| * |v| = 1
        assert nuclear_norm(np.outer(u, v)) == pytest.approx(1.0, abs=1e-12)


def nuclear_subgradient_gap(x, z, lam):
    """How far x - z is from lam * (subdifferential of the nuclear norm at z).

    Decomposes g = (x - z) / lam against the SVD of z: on the positive
    singular directions it must equal the identity coupling, off them its
    spectral norm must be at most 1.
    """
    g = (x - z) / lam
    f = svd(z)
    tol = 1e-10 * max(f.singular_values[0], 1.0) if f.singular_values.size else 0.0
    pos = f.singular_values > tol
    u_r, v_r = f.u[:, pos], f.vt[pos, :].T
    gap = 0.0
    if pos.any():
        gap = max(gap, np.abs(u_r.T @ g @ v_r - np.eye(pos.sum())).max())
        # off-space cross terms must vanish
        gap = max(gap, np.abs(g @ v_r - u_r @ (u_r.T @ g @ v_r)).max())
        gap = max(gap, np.abs(u_r.T @ g - (u_r.T @ g @ v_r) @ v_r.T).max())
    resid = g - u_r @ u_r.T @ g @ v_r @ v_r.T if pos.any() else g
    spec = np.linalg.svd(resid, compute_uv=False)[0] if resid.size else 0.0
    gap = max(gap, max(spec - 1.0, 0.0))
    return gap


class TestSoftThreshold:
    def test_diagonal_shrinkage(self):
        z = svd_soft_threshold(np.diag([3.0, 1.0]), 2.0)
        np.testing.assert_allclose(z, np.diag([1.0, 0.0]), atol=1e-12)

    def test_lambda_zero_identity(self, rng):
        x = random_matrix(rng, 5, 5)
        np.testing.assert_allclose(svd_soft_threshold(x, 0.0), x, atol=1e-10)

    def test_optimality_conditions(self, rng):
        # z minimizes 0.5 ||x - z||^2 + lam ||z||_*: subgradient condition
        # plus random perturbations never improving the objective.
        x = random_matrix(rng, 4, 4)
        lam = 0.5
        z = svd_soft_threshold(x, lam)
        assert nuclear_subgradient_gap(x, z, lam) < 1e-8

        def objective(w):
            return 0.5 * np.sum((x - w) ** 2) + lam * nuclear_norm(w)

        base = objective(z)
        for _ in range(100):
            delta = random_matrix(rng, 4, 4)
            delta /= np.linalg.norm(delta)
            assert objective(z + 1e-3 * delta) >= base - 1e-8

    def test_returned_singular_values_match(self, rng):
        x = random_matrix(rng, 6, 4)
        z, svals = soft_threshold_with_values(x, 0.7)
        assert float(svals.sum()) == pytest.approx(nuclear_norm(z), abs=1e-10)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            svd_soft_threshold(np.eye(2), -0.1)


class TestProxProperties:
    def test_firm_nonexpansiveness(self, rng):
        for _ in range(25):
            n, p = rng.integers(2, 7, size=2)
            x1, x2 = random_matrix(rng, n, p), random_matrix(rng, n, p)
            lam = float(rng.uniform(0, 2))
            d_out = np.linalg.norm(svd_soft_threshold(x1, lam) - svd_soft_threshold(x2, lam))
            assert d_out <= np.linalg.norm(x1 - x2) + 1e-12

    def test_nuclear_norm_never_increases(self, rng):
        for _ in range(20):
            x = random_matrix(rng, 5, 6)
            lam = float(rng.uniform(0, 3))
            assert nuclear_norm(svd_soft_threshold(x, lam)) <= nuclear_norm(x) + 1e-10

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), extra=st.floats(0.0, 5.0))
    def test_kills_matrix_above_top_singular_value(self, seed, extra):
        x = np.random.default_rng(seed).standard_normal((4, 3))
        sigma_max = np.linalg.svd(x, compute_uv=False)[0]
        z = svd_soft_threshold(x, sigma_max + extra)
        assert np.abs(z).max() < 1e-12


class TestNumericalRank:
    def test_counts_above_relative_threshold(self, rng):
        a = rng.standard_normal((8, 2))
        b = rng.standard_normal((5, 2))
        assert numerical_rank(a @ b.T) == 2

    def test_zero_matrix(self):
        assert numerical_rank(np.zeros((3, 3))) == 0
