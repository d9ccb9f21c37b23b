"""Missing-data mechanism models.

Covers the self-masked logistic and probit probability maps, mask
simulation, the sampling-importance-resampling draw from the conditional
law of a missing entry, and the weighted logistic regression used to
re-estimate the mechanism parameters.

Convention used everywhere: the returned probability is the probability
that an entry is MISSING (mask = 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, ndtr

FAMILIES = ("self_masked_logistic", "self_masked_probit", "mar_driver")
SHARING_MODES = ("per_column", "shared")

# Bound on |phi1| when the logistic fit separates; beyond this the Bernoulli
# likelihood is numerically saturated anyway.
PHI1_CLAMP = 50.0


class DegenerateWeightsError(RuntimeError):
    """All importance weights are zero or non-finite."""


class DegenerateColumnError(ValueError):
    """Logistic fit is impossible (responses all identical)."""


def logistic_missing_prob(y_val, phi1: float, phi2: float):
    """P(missing | y) = sigmoid(phi1 * (y - phi2)); stable for any finite input."""
    return expit(phi1 * (np.asarray(y_val, dtype=float) - phi2))


def probit_missing_prob(y_val):
    """P(missing | y) = standard Gaussian CDF of y."""
    return ndtr(np.asarray(y_val, dtype=float))


@dataclass(frozen=True)
class MechanismParams:
    """Per-column (phi1, phi2) pairs, or a single shared pair."""

    mode: str
    by_column: Mapping[int, tuple[float, float]] = field(default_factory=dict)
    shared_pair: tuple[float, float] | None = None

    def __post_init__(self):
        if self.mode not in SHARING_MODES:
            raise ValueError(f"mode must be one of {SHARING_MODES}")
        if self.mode == "shared":
            if self.shared_pair is None:
                raise ValueError("shared mode needs exactly one (phi1, phi2) pair")
        elif not self.by_column:
            raise ValueError("per_column mode needs at least one column pair")

    @classmethod
    def per_column(cls, pairs: Mapping[int, tuple[float, float]]) -> "MechanismParams":
        return cls(mode="per_column", by_column=dict(pairs))

    @classmethod
    def shared(cls, pair: tuple[float, float]) -> "MechanismParams":
        return cls(mode="shared", shared_pair=(float(pair[0]), float(pair[1])))

    def pair_for(self, j: int) -> tuple[float, float]:
        if self.mode == "shared":
            assert self.shared_pair is not None
            return self.shared_pair
        return self.by_column[j]


@dataclass(frozen=True)
class MechanismSpec:
    family: str
    target_columns: tuple[int, ...]
    params: MechanismParams | None = None
    driver_column: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        object.__setattr__(self, "target_columns", tuple(sorted(self.target_columns)))
        if self.family == "mar_driver":
            if self.driver_column is None:
                raise ValueError("mar_driver requires a driver column")
            if self.driver_column in self.target_columns:
                raise ValueError("driver column must not be a target column")
            if self.params is None:
                raise ValueError("mar_driver requires mechanism parameters")
        if self.family == "self_masked_logistic":
            if self.params is None:
                raise ValueError("logistic mechanism requires parameters")
            if self.params.mode == "per_column":
                missing = [j for j in self.target_columns if j not in self.params.by_column]
                if missing:
                    raise ValueError(f"no (phi1, phi2) pair for target columns {missing}")


def missing_probabilities(y, spec: MechanismSpec) -> np.ndarray:
    """Per-entry P(missing); zero outside the target columns."""
    y = np.asarray(y, dtype=float)
    probs = np.zeros_like(y)
    if not spec.target_columns:
        raise ValueError("mechanism has an empty target column set")
    for j in spec.target_columns:
        if spec.family == "self_masked_logistic":
            phi1, phi2 = spec.params.pair_for(j)
            probs[:, j] = logistic_missing_prob(y[:, j], phi1, phi2)
        elif spec.family == "self_masked_probit":
            probs[:, j] = probit_missing_prob(y[:, j])
        else:  # mar_driver: missingness driven by another column's value
            phi1, phi2 = spec.params.pair_for(j)
            probs[:, j] = logistic_missing_prob(y[:, spec.driver_column], phi1, phi2)
    return probs


def sample_mask(y, spec: MechanismSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw a binary mask (1 = observed) with independent Bernoulli entries."""
    probs = missing_probabilities(y, spec)
    return (rng.random(probs.shape) >= probs).astype(float)


@dataclass(frozen=True)
class SirOptions:
    proposal_count: int
    sample_count: int
    sigma: float

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.proposal_count < self.sample_count:
            raise ValueError("proposal_count must be >= sample_count")
        # Domination condition for the Gaussian envelope.
        if self.sigma <= (2.0 * np.pi) ** -0.5:
            raise ValueError(f"sigma must exceed (2*pi)^(-1/2) ~= 0.3989, got {self.sigma}")


def sir_sample(
    theta_ij: float,
    phi_j: tuple[float, float],
    omega_ij: int,
    opts: SirOptions,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw from [y_ij | missing] by sampling-importance-resampling.

    Proposals come from N(theta_ij, sigma^2), which equals the prior factor
    of the target density, so the importance weight reduces to the missing
    probability at each proposal.
    """
    if omega_ij != 0:
        raise ValueError("sir_sample applies to missing cells only (omega must be 0)")
    phi1, phi2 = phi_j
    proposals = theta_ij + opts.sigma * rng.standard_normal(opts.proposal_count)
    weights = logistic_missing_prob(proposals, phi1, phi2)
    total = float(weights.sum())
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateWeightsError(
            f"importance weights degenerate (total={total}) at theta={theta_ij}, phi={phi_j}"
        )
    idx = rng.choice(opts.proposal_count, size=opts.sample_count, replace=True, p=weights / total)
    return proposals[idx]


@dataclass
class LogisticFit:
    phi1: float
    phi2: float
    intercept: float
    slope: float
    log_likelihood: float
    iterations: int
    separated: bool


def _bernoulli_loglik(eta: np.ndarray, r: np.ndarray) -> float:
    # sum r*eta - log(1 + e^eta), computed stably
    return float(np.sum(r * eta - np.logaddexp(0.0, eta)))


def fit_logistic_column(j_matrix, max_iters: int = 60, tol: float = 1e-9, init=None) -> LogisticFit:
    """Fit the mechanism parameters from a stacked (omega, v) design.

    The first column holds the observation indicator, the second the data
    value (observed cells repeated once per Monte-Carlo replicate, missing
    cells one draw per replicate).  A logistic regression of the missingness
    indicator 1 - omega on v is fit by iteratively reweighted least squares
    with step halving; (phi1, phi2) are recovered from slope and intercept
    (slope = phi1, intercept = -phi1 * phi2).
    """
    j_matrix = np.asarray(j_matrix, dtype=float)
    if j_matrix.ndim != 2 or j_matrix.shape[1] != 2:
        raise ValueError(f"design must have two columns, got shape {j_matrix.shape}")
    omega = j_matrix[:, 0]
    v = j_matrix[:, 1]
    r = 1.0 - omega
    if np.all(r == r[0]):
        raise DegenerateColumnError("column is entirely observed or entirely missing")

    if init is not None:
        beta = np.array([float(init[0]), float(init[1])])
    else:
        beta = np.array([np.log((r.mean() + 1e-12) / (1.0 - r.mean() + 1e-12)), 0.0])
    ll = _bernoulli_loglik(beta[0] + beta[1] * v, r)
    iters = 0
    for _ in range(max_iters):
        iters += 1
        eta = beta[0] + beta[1] * v
        p = expit(eta)
        w = np.maximum(p * (1.0 - p), 1e-10)
        resid = r - p
        # 2x2 normal equations of the Newton step
        sw = w.sum()
        swv = float(w @ v)
        swvv = float(w @ (v * v))
        g0 = resid.sum()
        g1 = float(resid @ v)
        det = sw * swvv - swv * swv
        if det <= 0 or not np.isfinite(det):
            break
        step = np.array([(swvv * g0 - swv * g1) / det, (sw * g1 - swv * g0) / det])
        # step halving: accept only likelihood-improving updates
        scale = 1.0
        accepted = False
        for _ in range(40):
            cand = beta + scale * step
            ll_new = _bernoulli_loglik(cand[0] + cand[1] * v, r)
            if ll_new >= ll:
                beta, ll_accept = cand, ll_new
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        improved = ll_accept - ll
        ll = ll_accept
        if improved < tol * (abs(ll) + 1.0):
            break

    intercept, slope = float(beta[0]), float(beta[1])
    separated = abs(slope) > PHI1_CLAMP
    if separated:
        slope = float(np.sign(slope)) * PHI1_CLAMP
        # Refit the intercept at the clamped slope so the implied missing
        # rate stays calibrated.  The score is monotone decreasing in the
        # intercept, so bisection cannot run away the way Newton can when
        # the fitted probabilities saturate.
        bound = PHI1_CLAMP * float(np.abs(v).max()) + 40.0
        lo, hi = -bound, bound

        def score(b0):
            return float(np.sum(r - expit(b0 + slope * v)))

        if score(lo) <= 0.0:
            intercept = lo
        elif score(hi) >= 0.0:
            intercept = hi
        else:
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if score(mid) > 0.0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-10 * max(1.0, abs(hi)):
                    break
            intercept = 0.5 * (lo + hi)
        ll = _bernoulli_loglik(intercept + slope * v, r)

    phi1 = slope
    phi2 = -intercept / slope if abs(slope) > 1e-12 else 0.0
    return LogisticFit(
        phi1=phi1,
        phi2=phi2,
        intercept=intercept,
        slope=slope,
        log_likelihood=ll,
        iterations=iters,
        separated=separated,
    )


def solve_center_for_rate(phi1: float, values, target_rate: float) -> float:
    """Center phi2 such that mean sigmoid(phi1*(values - phi2)) hits target_rate.

    Used when a scenario pins the slope and the expected missing fraction
    instead of the center.  Monotone in phi2 for phi1 != 0.
    """
    values = np.asarray(values, dtype=float).ravel()
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must lie strictly between 0 and 1")
    if phi1 == 0.0:
        raise ValueError("phi1 = 0 makes the rate independent of phi2")

    def gap(phi2):
        return float(np.mean(logistic_missing_prob(values, phi1, phi2))) - target_rate

    span = max(np.abs(values).max(), 1.0)
    lo, hi = -span - 50.0, span + 50.0
    if gap(lo) * gap(hi) > 0:
        raise ValueError("target rate is not reachable for these values")
    return float(brentq(gap, lo, hi, xtol=1e-10))
