"""SVD, nuclear norm and singular-value soft-thresholding.

Everything here is a pure function of its inputs; the solvers and the EM
machinery call these in tight loops, so the matrices are kept as plain
float64 ndarrays throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

# Singular values below RANK_TOL * sigma_max count as zero when reporting rank.
RANK_TOL = 1e-12


class SvdConvergenceError(RuntimeError):
    """The SVD routine failed to converge on the given matrix."""


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``x = u @ diag(singular_values) @ vt``."""

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"expected a 2-d matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("matrix contains NaN or Inf entries")
    return x


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Deterministic sign convention: first non-negligible component of each
    # left singular vector is made positive (the matching right vector flips
    # with it, so the product is unchanged).
    u = u.copy()
    vt = vt.copy()
    for k in range(u.shape[1]):
        col = u[:, k]
        nz = np.nonzero(np.abs(col) > 1e-12 * max(np.abs(col).max(), 1e-300))[0]
        if nz.size and col[nz[0]] < 0:
            u[:, k] = -col
            vt[k, :] = -vt[k, :]
    return u, vt


def svd(x) -> SvdFactors:
    """Thin SVD with non-increasing singular values and fixed vector signs."""
    x = _as_matrix(x)
    try:
        u, s, vt = np.linalg.svd(x, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails on ill-conditioned input; gesvd is slower
        # but more robust.
        try:
            u, s, vt = scipy.linalg.svd(x, full_matrices=False, lapack_driver="gesvd")
        except Exception as exc:  # pragma: no cover - hard to trigger
            raise SvdConvergenceError(f"SVD did not converge on {x.shape} matrix") from exc
    u, vt = _fix_signs(u, vt)
    return SvdFactors(u=u, singular_values=s, vt=vt)


def nuclear_norm(x) -> float:
    """Sum of singular values."""
    x = _as_matrix(x)
    try:
        s = np.linalg.svd(x, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(f"SVD did not converge on {x.shape} matrix") from exc
    return float(np.sum(s))


def soft_threshold_with_values(x, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Apply the nuclear-norm prox and also return the shrunk singular values.

    The shrunk values are the singular values of the output, so callers can
    obtain its nuclear norm without a second decomposition.
    """
    if lam < 0:
        raise ValueError(f"threshold must be non-negative, got {lam}")
    f = svd(x)
    s = np.maximum(f.singular_values - lam, 0.0)
    return (f.u * s) @ f.vt, s


def svd_soft_threshold(x, lam: float) -> np.ndarray:
    """Proximal operator of ``lam * ||.||_*``: shrink each singular value by lam."""
    z, _ = soft_threshold_with_values(x, lam)
    return z


def numerical_rank(x, rel_tol: float = RANK_TOL) -> int:
    """Number of singular values above rel_tol * sigma_max."""
    s = svd(x).singular_values
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))
