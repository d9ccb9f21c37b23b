"""Nuclear-norm penalized weighted least squares.

Two solvers for

    min_T  0.5 * ||(Y - T) * mask||_F^2 + lam * ||T||_*

an iterative soft-thresholding scheme written in its imputation form
(fill the missing cells with the current iterate, then shrink), and its
momentum-accelerated variant.  The smooth part has a 1-Lipschitz gradient
``mask * (T - Y)``, so both use unit step size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .linalg import nuclear_norm, soft_threshold_with_values

ALGORITHMS = ("ista", "fista")

# Denominator offset in the relative-change stopping rule
# ||T_t - T_{t-1}|| / (||T_{t-1}|| + STOP_DELTA) <= rel_tol;
# the same convention is used by the EM loop.
STOP_DELTA = 1e-3


class SolverError(RuntimeError):
    """Numerical failure inside a solver (non-finite objective, SVD failure)."""


@dataclass(frozen=True)
class SolveOptions:
    lam: float
    max_iters: int = 500
    rel_tol: float = 1e-6
    algorithm: str = "fista"
    # Momentum seed from the accelerated algorithm as published; set to 1.0
    # for the textbook schedule.
    kappa0: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")


@dataclass
class SolveResult:
    theta_hat: np.ndarray
    objective_trace: np.ndarray
    iterations_run: int
    converged: bool
    lam: float
    algorithm: str
    wall_time_s: float = 0.0

    @property
    def final_objective(self) -> float:
        return float(self.objective_trace[-1])


def _check_problem(y, mask) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if y.shape != mask.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs mask {mask.shape}")
    if y.ndim != 2:
        raise ValueError("y and mask must be 2-d")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask entries must be 0 or 1")
    obs = mask == 1.0
    if not np.all(np.isfinite(y[obs])):
        raise ValueError("y has non-finite entries at observed positions")
    # Masked-out cells may hold NaN placeholders; normalize them to zero so
    # mask * y is always well defined.
    return np.where(obs, y, 0.0), mask


def weighted_ls_gradient(theta, y, mask) -> np.ndarray:
    """Gradient of the smooth part: mask * (theta - y)."""
    y0, mask = _check_problem(y, mask)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != y0.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape} vs y {y0.shape}")
    return mask * (theta - y0)


def penalized_objective(theta, y, mask, lam: float) -> float:
    """0.5 * ||(y - theta) * mask||_F^2 + lam * ||theta||_*."""
    y0, mask = _check_problem(y, mask)
    resid = (y0 - theta) * mask
    return 0.5 * float(np.sum(resid * resid)) + lam * nuclear_norm(theta)


def _rel_change(new, old) -> float:
    return float(np.linalg.norm(new - old) / (np.linalg.norm(old) + STOP_DELTA))


def _data_fit(theta, y0, mask) -> float:
    resid = (y0 - theta) * mask
    return 0.5 * float(np.sum(resid * resid))


def ista_solve(y, mask, opts: SolveOptions, theta_init=None) -> SolveResult:
    """Iterative soft-thresholding in imputation form.

    Each step shrinks the singular values of ``mask*y + (1-mask)*theta``,
    which is the unit-step proximal gradient step written without the
    explicit gradient.
    """
    y0, mask = _check_problem(y, mask)
    t0 = time.perf_counter()
    theta = np.zeros_like(y0) if theta_init is None else np.array(theta_init, dtype=float)
    trace = []
    converged = False
    iters = 0
    for _ in range(opts.max_iters):
        filled = mask * y0 + (1.0 - mask) * theta
        theta_new, svals = soft_threshold_with_values(filled, opts.lam)
        obj = _data_fit(theta_new, y0, mask) + opts.lam * float(svals.sum())
        if not np.isfinite(obj):
            raise SolverError("objective became non-finite; check input scaling")
        trace.append(obj)
        iters += 1
        rel = _rel_change(theta_new, theta)
        theta = theta_new
        if rel <= opts.rel_tol:
            converged = True
            break
    return SolveResult(
        theta_hat=theta,
        objective_trace=np.asarray(trace),
        iterations_run=iters,
        converged=converged,
        lam=opts.lam,
        algorithm="ista",
        wall_time_s=time.perf_counter() - t0,
    )


def fista_solve(y, mask, opts: SolveOptions, theta_init=None) -> SolveResult:
    """Accelerated proximal gradient with the published momentum schedule.

    kappa_{k+1} = (1 + sqrt(1 + 4 kappa_k^2)) / 2 and the prox is applied at
    the extrapolated point Xi; the first step coincides with the plain
    scheme because Xi_0 = Theta_0.
    """
    y0, mask = _check_problem(y, mask)
    t0 = time.perf_counter()
    theta = np.zeros_like(y0) if theta_init is None else np.array(theta_init, dtype=float)
    xi = theta.copy()
    kappa = opts.kappa0
    trace = []
    converged = False
    iters = 0
    for _ in range(opts.max_iters):
        grad_step = xi - mask * (xi - y0)
        theta_new, svals = soft_threshold_with_values(grad_step, opts.lam)
        obj = _data_fit(theta_new, y0, mask) + opts.lam * float(svals.sum())
        if not np.isfinite(obj):
            raise SolverError("objective became non-finite; check input scaling")
        trace.append(obj)
        iters += 1
        kappa_new = (1.0 + np.sqrt(1.0 + 4.0 * kappa * kappa)) / 2.0
        xi = theta_new + ((kappa - 1.0) / kappa_new) * (theta_new - theta)
        kappa = kappa_new
        rel = _rel_change(theta_new, theta)
        theta = theta_new
        if rel <= opts.rel_tol:
            converged = True
            break
    return SolveResult(
        theta_hat=theta,
        objective_trace=np.asarray(trace),
        iterations_run=iters,
        converged=converged,
        lam=opts.lam,
        algorithm="fista",
        wall_time_s=time.perf_counter() - t0,
    )


def solve(y, mask, opts: SolveOptions, theta_init=None) -> SolveResult:
    if opts.algorithm == "ista":
        return ista_solve(y, mask, opts, theta_init=theta_init)
    return fista_solve(y, mask, opts, theta_init=theta_init)


@dataclass
class GridPoint:
    lam: float
    score: float
    result: SolveResult | None
    error: str | None = None


@dataclass
class GridSearchResult:
    best_lambda: float
    result: SolveResult
    sweep: list[GridPoint] = field(default_factory=list)


def lambda_grid_search(
    y,
    mask,
    grid,
    selector,
    opts: SolveOptions,
    warm_start: bool = True,
) -> GridSearchResult:
    """Solve along a descending lambda grid and keep the best scored point.

    ``selector`` maps a SolveResult to a real score (lower is better); ties
    go to the larger lambda.  With warm starting each solution initializes
    the next, which is why the grid must be sorted descending.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty lambda grid")
    if any(g <= 0 for g in grid):
        raise ValueError("grid values must be strictly positive")
    if any(a <= b for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be sorted in strictly descending order")

    sweep: list[GridPoint] = []
    best: GridPoint | None = None
    theta_prev = None
    for lam in grid:
        pt_opts = SolveOptions(
            lam=lam,
            max_iters=opts.max_iters,
            rel_tol=opts.rel_tol,
            algorithm=opts.algorithm,
            kappa0=opts.kappa0,
        )
        try:
            res = solve(y, mask, pt_opts, theta_init=theta_prev if warm_start else None)
        except (SolverError, ValueError) as exc:
            sweep.append(GridPoint(lam=lam, score=np.inf, result=None, error=str(exc)))
            continue
        if warm_start:
            theta_prev = res.theta_hat
        score = float(selector(res))
        pt = GridPoint(lam=lam, score=score, result=res)
        sweep.append(pt)
        if best is None or score < best.score:
            best = pt
    if best is None or best.result is None:
        raise SolverError("every grid point failed")
    return GridSearchResult(best_lambda=best.lam, result=best.result, sweep=sweep)
