"""Monte-Carlo EM for the penalized joint likelihood of data and mask.

Alternates a simulated E-step (SIR draws for every missing cell, kept as
the imputed-mean matrix V plus the stacked per-column designs) with two
separable M-steps: a nuclear-norm prox solve for the parameter matrix and
per-column logistic fits for the mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .linalg import nuclear_norm
from .mechanism import (
    PHI1_CLAMP,
    DegenerateColumnError,
    DegenerateWeightsError,
    MechanismParams,
    fit_logistic_column,
)
from .solvers import ALGORITHMS, SolveOptions, solve


@dataclass(frozen=True)
class McemConfig:
    lam: float
    sigma: float
    ns: int = 1000
    proposal_factor: int = 10
    delta: float = 1e-3
    tau: float = 1e-2
    extra_iters: int = 10
    max_em_iters: int = 100
    inner_solver: str = "fista"
    inner_max_iters: int = 500
    inner_rel_tol: float = 1e-6
    phi_sharing: str = "per_column"
    scale_columns: bool = False
    # Drop the mechanism factor from the E-step (missing cells are then
    # filled with their plain conditional mean); used for the reduction to
    # the iterative soft-thresholding scheme under ignorable missingness.
    disable_mechanism: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.ns < 1 or self.proposal_factor < 1:
            raise ValueError("ns and proposal_factor must be >= 1")
        if self.inner_solver not in ALGORITHMS:
            raise ValueError(f"inner_solver must be one of {ALGORITHMS}")
        if self.phi_sharing not in ("per_column", "shared"):
            raise ValueError("phi_sharing must be 'per_column' or 'shared'")
        if self.tau < 0 or self.delta <= 0:
            raise ValueError("tau must be >= 0 and delta > 0")


@dataclass
class EStepResult:
    v_matrix: np.ndarray
    designs: dict[int, np.ndarray]
    mc_variance: np.ndarray


@dataclass
class McemState:
    theta_hat: np.ndarray
    phi_hat: MechanismParams | None
    iteration: int
    v_matrix: np.ndarray
    designs: dict[int, np.ndarray] = field(default_factory=dict)
    stopping_history: list[float] = field(default_factory=list)
    q_trace: list[float] = field(default_factory=list)
    converged: bool = False


def _check_inputs(y, mask):
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if y.shape != mask.shape or y.ndim != 2:
        raise ValueError("y and mask must be 2-d with identical shapes")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask entries must be 0 or 1")
    obs = mask == 1.0
    if not np.all(np.isfinite(y[obs])):
        raise ValueError("y has non-finite entries at observed positions")
    if np.any(mask.sum(axis=0) < 1):
        raise ValueError("every column needs at least one observed entry")
    return np.where(obs, y, 0.0), mask


def _resample_rows(proposals, weights, totals, ns, rng):
    # Row-wise categorical resampling via one flattened searchsorted; each
    # row's normalized cdf is shifted by its row index so the bins never
    # overlap across rows.
    m, width = proposals.shape
    cum = np.cumsum(weights, axis=1)
    norm = cum / totals[:, None]
    norm[:, -1] = 1.0
    offsets = np.arange(m)[:, None]
    u = rng.random((m, ns))
    flat = np.searchsorted((norm + offsets).ravel(), (u + offsets).ravel(), side="right")
    idx = flat.reshape(m, ns) - offsets * width
    return np.take_along_axis(proposals, idx, axis=1)


def e_step(y, mask, theta_hat, phi_hat: MechanismParams, cfg: McemConfig, rng) -> EStepResult:
    """Simulate every missing cell and assemble V and the stacked designs.

    V keeps observed values exactly; a missing cell holds the mean of its
    ns resampled draws.  The design for column j stacks (omega, v) rows for
    all i, one block per Monte-Carlo replicate.
    """
    y0, mask = _check_inputs(y, mask)
    v_matrix = y0.copy()
    mc_variance = np.zeros_like(y0)
    designs: dict[int, np.ndarray] = {}
    n = y0.shape[0]
    m_props = cfg.proposal_factor * cfg.ns

    missing_cols = np.where((mask == 0.0).any(axis=0))[0]
    for j in missing_cols:
        rows = np.where(mask[:, j] == 0.0)[0]
        phi1, phi2 = phi_hat.pair_for(int(j))
        centers = theta_hat[rows, j]
        proposals = centers[:, None] + cfg.sigma * rng.standard_normal((rows.size, m_props))
        weights = expit(phi1 * (proposals - phi2))
        totals = weights.sum(axis=1)
        bad = np.where(~np.isfinite(totals) | (totals <= 0.0))[0]
        if bad.size:
            i = int(rows[bad[0]])
            raise DegenerateWeightsError(
                f"importance weights degenerate at cell ({i}, {int(j)}) with phi=({phi1}, {phi2})"
            )
        draws = _resample_rows(proposals, weights, totals, cfg.ns, rng)
        v_matrix[rows, j] = draws.mean(axis=1)
        mc_variance[rows, j] = draws.var(axis=1)

        v_blocks = np.repeat(y0[:, j][None, :], cfg.ns, axis=0)
        v_blocks[:, rows] = draws.T
        designs[int(j)] = np.column_stack([np.tile(mask[:, j], cfg.ns), v_blocks.ravel()])
    return EStepResult(v_matrix=v_matrix, designs=designs, mc_variance=mc_variance)


def m_step_theta(v_matrix, cfg: McemConfig) -> np.ndarray:
    """Prox solve of the fully observed surrogate problem.

    The Gaussian data term carries 1/(2 sigma^2), so on the unscaled
    residuals the effective shrinkage threshold is lam * sigma^2.  With a
    full mask the inner solver lands on the closed-form prox after one step.
    """
    v_matrix = np.asarray(v_matrix, dtype=float)
    opts = SolveOptions(
        lam=cfg.lam * cfg.sigma**2,
        max_iters=cfg.inner_max_iters,
        rel_tol=cfg.inner_rel_tol,
        algorithm=cfg.inner_solver,
    )
    return solve(v_matrix, np.ones_like(v_matrix), opts).theta_hat


def m_step_phi(
    designs: dict[int, np.ndarray],
    sharing: str = "per_column",
    warm: MechanismParams | None = None,
) -> MechanismParams:
    """Re-estimate the mechanism from the stacked designs.

    `warm` seeds the iterative fit with the previous EM iteration's
    parameters, which usually saves a few reweighting passes.
    """
    if not designs:
        raise ValueError("no designs: there are no missing-affected columns")

    def _init_for(j):
        if warm is None:
            return None
        phi1, phi2 = warm.pair_for(j)
        if abs(phi1) >= PHI1_CLAMP:  # do not inherit a saturated start
            return None
        return (-phi1 * phi2, phi1)  # (intercept, slope)

    if sharing == "shared":
        stacked = np.vstack([designs[j] for j in sorted(designs)])
        fit = fit_logistic_column(stacked, init=_init_for(next(iter(sorted(designs)))))
        return MechanismParams.shared((fit.phi1, fit.phi2))
    pairs = {}
    for j in sorted(designs):
        try:
            fit = fit_logistic_column(designs[j], init=_init_for(j))
        except DegenerateColumnError as exc:
            raise DegenerateColumnError(f"column {j}: {exc}") from exc
        pairs[j] = (fit.phi1, fit.phi2)
    return MechanismParams.per_column(pairs)


def _mechanism_nll(designs, phi: MechanismParams, ns: int) -> float:
    total = 0.0
    for j, design in designs.items():
        phi1, phi2 = phi.pair_for(j)
        eta = phi1 * (design[:, 1] - phi2)
        r = 1.0 - design[:, 0]
        total += -float(np.sum(r * eta - np.logaddexp(0.0, eta))) / ns
    return total


def _penalized_q(theta, est: EStepResult, phi, cfg: McemConfig) -> float:
    # Monte-Carlo estimate of the penalized expected negative log-likelihood
    # (additive constants dropped).
    resid = est.v_matrix - theta
    gauss = 0.5 / cfg.sigma**2 * float(np.sum(resid * resid + est.mc_variance))
    mech = _mechanism_nll(est.designs, phi, cfg.ns) if (est.designs and phi is not None) else 0.0
    return gauss + mech + cfg.lam * nuclear_norm(theta)


def _init_phi(y0, mask, sharing: str) -> MechanismParams:
    # Mild, centered start: unit slope at the observed mean of each column.
    missing_cols = np.where((mask == 0.0).any(axis=0))[0]
    if sharing == "shared":
        obs = mask[:, missing_cols] == 1.0
        center = float(y0[:, missing_cols][obs].mean())
        return MechanismParams.shared((1.0, center))
    pairs = {}
    for j in missing_cols:
        obs = mask[:, j] == 1.0
        pairs[int(j)] = (1.0, float(y0[obs, j].mean()))
    return MechanismParams.per_column(pairs)


def mcem_fit(
    y,
    mask,
    cfg: McemConfig,
    rng: np.random.Generator,
    theta_init=None,
    phi_init: MechanismParams | None = None,
) -> McemState:
    """Run the EM loop until the estimate stabilizes.

    Stops once the relative change of the parameter matrix drops below tau,
    then runs extra_iters further iterations for stability.  If the budget
    runs out first the last iterate is returned flagged as not converged.
    """
    y0, mask = _check_inputs(y, mask)

    if not (mask == 0.0).any():
        theta = m_step_theta(y0, cfg)
        return McemState(
            theta_hat=theta,
            phi_hat=None,
            iteration=1,
            v_matrix=y0.copy(),
            converged=True,
        )

    if theta_init is None:
        init_opts = SolveOptions(
            lam=cfg.lam,
            max_iters=cfg.inner_max_iters,
            rel_tol=cfg.inner_rel_tol,
            algorithm=cfg.inner_solver,
        )
        theta = solve(y0, mask, init_opts).theta_hat
    else:
        theta = np.array(theta_init, dtype=float)
    phi = phi_init if phi_init is not None else _init_phi(y0, mask, cfg.phi_sharing)

    history: list[float] = []
    q_trace: list[float] = []
    est = EStepResult(v_matrix=y0.copy(), designs={}, mc_variance=np.zeros_like(y0))
    converged = False
    extra_left: int | None = None
    iteration = 0

    for _ in range(cfg.max_em_iters):
        iteration += 1
        if cfg.scale_columns:
            ref = est.v_matrix if iteration > 1 else y0
            scale = np.maximum(ref.std(axis=0), 1e-8)
        else:
            scale = None

        if cfg.disable_mechanism:
            v = mask * y0 + (1.0 - mask) * theta
            est = EStepResult(v_matrix=v, designs={}, mc_variance=np.zeros_like(y0))
            theta_new = m_step_theta(v, cfg)
        elif scale is not None:
            est_s = e_step(y0 / scale, mask, theta / scale, phi, cfg, rng)
            theta_new = m_step_theta(est_s.v_matrix, cfg) * scale
            phi = m_step_phi(est_s.designs, cfg.phi_sharing, warm=phi)
            est = EStepResult(
                v_matrix=est_s.v_matrix * scale,
                designs=est_s.designs,
                mc_variance=est_s.mc_variance * scale**2,
            )
        else:
            est = e_step(y0, mask, theta, phi, cfg, rng)
            theta_new = m_step_theta(est.v_matrix, cfg)
            phi = m_step_phi(est.designs, cfg.phi_sharing, warm=phi)

        q_trace.append(_penalized_q(theta_new, est, phi, cfg))
        rel = float(np.linalg.norm(theta_new - theta) / (np.linalg.norm(theta) + cfg.delta))
        history.append(rel)
        theta = theta_new

        if extra_left is not None:
            extra_left -= 1
            if extra_left <= 0:
                break
        elif rel <= cfg.tau:
            converged = True
            extra_left = cfg.extra_iters
            if extra_left <= 0:
                break

    return McemState(
        theta_hat=theta,
        phi_hat=phi if not cfg.disable_mechanism else None,
        iteration=iteration,
        v_matrix=est.v_matrix,
        designs=est.designs,
        stopping_history=history,
        q_trace=q_trace,
        converged=converged,
    )
