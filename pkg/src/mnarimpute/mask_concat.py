"""Implicit estimators that append the mask to the data matrix.

Two flavours: plain nuclear-norm completion of the n x 2p concatenation
[mask*y | mask], and a heterogeneous exponential-family fit that treats
the appended mask columns as Bernoulli with a logit link instead of
pretending they are Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .linalg import nuclear_norm, soft_threshold_with_values
from .solvers import STOP_DELTA, SolveOptions, solve

COLUMN_TYPES = ("gaussian", "bernoulli")


class LineSearchError(RuntimeError):
    """Backtracking failed to find an acceptable step."""


@dataclass(frozen=True)
class LinkFunction:
    """Convex log-partition g and its derivative for one column."""

    tag: str
    g: Callable[[np.ndarray], np.ndarray]
    gprime: Callable[[np.ndarray], np.ndarray]


def gaussian_link(sigma2: float) -> LinkFunction:
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    return LinkFunction(
        tag="gaussian",
        g=lambda x: 0.5 * sigma2 * x * x,
        gprime=lambda x: sigma2 * x,
    )


def bernoulli_link() -> LinkFunction:
    return LinkFunction(
        tag="bernoulli",
        g=lambda x: np.logaddexp(0.0, x),
        gprime=expit,
    )


def gaussian_bernoulli_links(p: int, sigma2: float) -> list[LinkFunction]:
    """Standard link layout for the concatenated matrix: p data columns then p mask columns."""
    return [gaussian_link(sigma2)] * p + [bernoulli_link()] * p


@dataclass
class ConcatProblem:
    augmented_data: np.ndarray
    augmented_mask: np.ndarray
    column_types: tuple[str, ...]


def _check_pair(y, mask):
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if y.shape != mask.shape or y.ndim != 2:
        raise ValueError("y and mask must be 2-d with identical shapes")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask entries must be 0 or 1 (non-binary mask column)")
    obs = mask == 1.0
    if not np.all(np.isfinite(y[obs])):
        raise ValueError("y has non-finite entries at observed positions")
    return np.where(obs, y, 0.0), mask


def build_concat_problem(y, mask) -> ConcatProblem:
    """Assemble [mask*y | mask] with mask [mask | 1]; the mask half is always observed."""
    y0, mask = _check_pair(y, mask)
    p = y0.shape[1]
    return ConcatProblem(
        augmented_data=np.hstack([mask * y0, mask]),
        augmented_mask=np.hstack([mask, np.ones_like(mask)]),
        column_types=("gaussian",) * p + ("bernoulli",) * p,
    )


def concat_solve(y, mask, lam: float, opts: SolveOptions) -> np.ndarray:
    """Nuclear-norm completion of the concatenated system; returns the data block.

    The right half of the solution parametrizes the mask and is dropped for
    imputation purposes.
    """
    problem = build_concat_problem(y, mask)
    run_opts = SolveOptions(
        lam=lam,
        max_iters=opts.max_iters,
        rel_tol=opts.rel_tol,
        algorithm=opts.algorithm,
        kappa0=opts.kappa0,
    )
    res = solve(problem.augmented_data, problem.augmented_mask, run_opts)
    p = np.asarray(y).shape[1]
    return res.theta_hat[:, :p]


def quasi_nll(theta, x, obs_mask, links: Sequence[LinkFunction]) -> float:
    """Observed-cell quasi negative log-likelihood sum(obs * (-x*theta + g(theta)))."""
    total = 0.0
    for j, link in enumerate(links):
        col = obs_mask[:, j] * (-x[:, j] * theta[:, j] + link.g(theta[:, j]))
        total += float(col.sum())
    return total


def quasi_nll_grad(theta, x, obs_mask, links: Sequence[LinkFunction]) -> np.ndarray:
    """Entrywise gradient obs * (g'(theta) - x)."""
    grad = np.empty_like(theta)
    for j, link in enumerate(links):
        grad[:, j] = obs_mask[:, j] * (link.gprime(theta[:, j]) - x[:, j])
    return grad


@dataclass
class ExpfamResult:
    theta_hat: np.ndarray
    objective_trace: np.ndarray
    iterations_run: int
    converged: bool


def _proximal_gradient_expfam(
    x, obs_mask, links: Sequence[LinkFunction], lam: float, opts: SolveOptions
) -> ExpfamResult:
    theta = np.zeros_like(x)
    smooth = quasi_nll(theta, x, obs_mask, links)
    trace = []
    converged = False
    iters = 0
    for _ in range(opts.max_iters):
        grad = quasi_nll_grad(theta, x, obs_mask, links)
        step = 1.0
        for _ in range(60):
            cand, svals = soft_threshold_with_values(theta - step * grad, step * lam)
            diff = cand - theta
            smooth_cand = quasi_nll(cand, x, obs_mask, links)
            bound = smooth + float(np.sum(grad * diff)) + float(np.sum(diff * diff)) / (2.0 * step)
            if smooth_cand <= bound + 1e-12 * max(abs(bound), 1.0):
                break
            step *= 0.5
        else:
            raise LineSearchError("backtracking exhausted (step below 1e-18)")
        iters += 1
        trace.append(smooth_cand + lam * float(svals.sum()))
        rel = float(np.linalg.norm(cand - theta) / (np.linalg.norm(theta) + STOP_DELTA))
        theta = cand
        smooth = smooth_cand
        if rel <= opts.rel_tol:
            converged = True
            break
    return ExpfamResult(
        theta_hat=theta,
        objective_trace=np.asarray(trace),
        iterations_run=iters,
        converged=converged,
    )


def expfam_solve(y, mask, lam: float, links: Sequence[LinkFunction], opts: SolveOptions) -> np.ndarray:
    """Penalized quasi-likelihood fit of the concatenated matrix.

    Minimizes sum_ij obs_ij * (-x_ij * t_ij + g_j(t_ij)) + lam * ||t||_* over
    the full n x 2p parameter matrix by proximal gradient with backtracking,
    and returns the data-block natural parameters.  Under the Gaussian link
    the natural parameter is mean / sigma^2, so callers imputing on the data
    scale apply g' (multiply by sigma^2).
    """
    problem = build_concat_problem(y, mask)
    if len(links) != problem.augmented_data.shape[1]:
        raise ValueError(
            f"need {problem.augmented_data.shape[1]} links, got {len(links)}"
        )
    for j, link in enumerate(links):
        if link.tag == "bernoulli":
            col = problem.augmented_data[:, j]
            if not np.all((col == 0.0) | (col == 1.0)):
                raise ValueError(f"bernoulli column {j} contains non-binary values")
    res = _proximal_gradient_expfam(
        problem.augmented_data, problem.augmented_mask, links, lam, opts
    )
    p = np.asarray(y).shape[1]
    return res.theta_hat[:, :p]


def expfam_objective(theta_aug, y, mask, lam: float, links: Sequence[LinkFunction]) -> float:
    """Full penalized objective at an augmented parameter matrix (test hook)."""
    problem = build_concat_problem(y, mask)
    return quasi_nll(theta_aug, problem.augmented_data, problem.augmented_mask, links) + lam * nuclear_norm(theta_aug)
