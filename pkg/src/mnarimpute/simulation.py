"""Simulation-study engine.

Generates low-rank signal plus Gaussian noise, applies a missingness
mechanism, runs the competing estimators over a lambda grid with oracle
selection, and aggregates the two normalized error metrics over seeded
replications.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .mask_concat import build_concat_problem, expfam_solve, gaussian_bernoulli_links
from .mcem import McemConfig, mcem_fit
from .mechanism import MechanismParams, MechanismSpec, sample_mask, solve_center_for_rate
from .solvers import SolveOptions, lambda_grid_search, solve

METHODS = (
    "model_mcem",
    "mask_concat",
    "mask_expfam",
    "mar_fista",
    "mar_softimpute",
    "mean_impute",
)


def generate_low_rank(n: int, p: int, rank: int, rng: np.random.Generator, decorrelate=None) -> np.ndarray:
    """Rank-`rank` Gaussian factor product, rescaled to unit entry variance.

    `decorrelate=(a, b)` makes column b population-decorrelated from column
    a (their factor loadings are orthogonalized), which needs rank >= 2.
    """
    if not 1 <= rank < min(n, p):
        raise ValueError(f"rank must satisfy 1 <= rank < min(n, p), got {rank}")
    a = rng.standard_normal((n, rank))
    b = rng.standard_normal((p, rank))
    if decorrelate is not None:
        ja, jb = decorrelate
        if rank < 2:
            raise ValueError("decorrelating two columns requires rank >= 2")
        ref = b[ja]
        norm_before = np.linalg.norm(b[jb])
        b[jb] = b[jb] - (b[jb] @ ref) / (ref @ ref) * ref
        if np.linalg.norm(b[jb]) < 1e-10:
            raise ValueError("degenerate draw: columns cannot be decorrelated")
        b[jb] *= norm_before / np.linalg.norm(b[jb])
    theta = a @ b.T
    return theta / theta.std()


def add_noise(theta, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    theta = np.asarray(theta, dtype=float)
    return theta + math.sqrt(sigma2) * rng.standard_normal(theta.shape)


def prediction_error(theta_hat, y, mask) -> float:
    """||(theta_hat - y) * (1-mask)||_F^2 / ||y * (1-mask)||_F^2; NaN if no missing cells."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    hidden = 1.0 - np.asarray(mask, dtype=float)
    den = float(np.sum((y * hidden) ** 2))
    if den == 0.0:
        return float("nan")
    return float(np.sum(((theta_hat - y) * hidden) ** 2)) / den


def total_error(theta_hat, theta) -> float:
    """||theta_hat - theta||_F^2 / ||theta||_F^2; NaN for a zero signal."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta = np.asarray(theta, dtype=float)
    den = float(np.sum(theta * theta))
    if den == 0.0:
        return float("nan")
    return float(np.sum((theta_hat - theta) ** 2)) / den


def mean_impute(y, mask) -> np.ndarray:
    """Replace every entry of each column by that column's observed mean."""
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=float)
    counts = mask.sum(axis=0)
    if np.any(counts < 1):
        raise ValueError(f"fully missing columns: {np.where(counts < 1)[0].tolist()}")
    means = np.where(mask == 1.0, y, 0.0).sum(axis=0) / counts
    return np.tile(means, (y.shape[0], 1))


def estimate_sigma2(y, rank: int) -> float:
    """Noise variance from the rank-`rank` SVD residual.

    Residual sum of squares over np - n*rank - rank*p + rank^2, the count of
    observations minus estimated parameters.
    """
    y = np.asarray(y, dtype=float)
    n, p = y.shape
    if not 0 <= rank <= min(n, p):
        raise ValueError("rank out of range")
    dof = n * p - n * rank - rank * p + rank * rank
    if dof <= 0:
        raise ValueError(f"non-positive degrees of freedom ({dof})")
    svals = np.linalg.svd(y, compute_uv=False)
    rss = float(np.sum(svals[rank:] ** 2))
    return rss / dof


def auto_lambda_grid(design, size: int = 15, span: float = 100.0) -> tuple[float, ...]:
    """Log-spaced grid from the spectral norm of the design down by `span`."""
    top = float(np.linalg.svd(np.asarray(design, dtype=float), compute_uv=False)[0])
    top = max(top, 1e-6)
    return tuple(np.geomspace(top, top / span, size).tolist())


@dataclass(frozen=True)
class Scenario:
    n: int
    p: int
    rank: int
    sigma2: float
    mechanism: MechanismSpec
    replications: int
    methods: tuple[str, ...] = METHODS
    lambda_grid: tuple[float, ...] | None = None
    grid_size: int = 15
    grid_span: float = 100.0
    seed: int = 0
    ns: int = 1000
    proposal_factor: int = 10
    max_em_iters: int = 100
    em_tau: float = 1e-2
    em_extra_iters: int = 10
    solver_max_iters: int = 500
    solver_rel_tol: float = 1e-6
    target_overall_missing_rate: float | None = None
    decorrelate_driver: bool = False
    mcem_phi_sharing: str | None = None
    scale_columns: bool = False

    def __post_init__(self):
        if self.rank >= min(self.n, self.p):
            raise ValueError("rank must be < min(n, p)")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.lambda_grid is not None:
            object.__setattr__(self, "lambda_grid", tuple(float(g) for g in self.lambda_grid))

    def phi_sharing(self) -> str:
        if self.mcem_phi_sharing is not None:
            return self.mcem_phi_sharing
        params = self.mechanism.params
        if params is not None and params.mode == "shared" and self.mechanism.family == "self_masked_logistic":
            return "shared"
        return "per_column"


@dataclass
class MethodRecord:
    method: str
    replication: int
    prediction_error: float
    total_error: float
    lambda_selected: float
    wall_time_s: float
    lambda_total_oracle: float = float("nan")
    error: str | None = None
    info: dict = field(default_factory=dict)


@dataclass
class CampaignResult:
    scenario: Scenario
    records: list[MethodRecord]
    missing_rates: list[float]
    mechanism_centers: list[float | None]
    summary: dict


def _mcem_config(scenario: Scenario, lam: float) -> McemConfig:
    return McemConfig(
        lam=lam,
        sigma=math.sqrt(scenario.sigma2),
        ns=scenario.ns,
        proposal_factor=scenario.proposal_factor,
        tau=scenario.em_tau,
        extra_iters=scenario.em_extra_iters,
        max_em_iters=scenario.max_em_iters,
        inner_max_iters=scenario.solver_max_iters,
        inner_rel_tol=scenario.solver_rel_tol,
        phi_sharing=scenario.phi_sharing(),
        scale_columns=scenario.scale_columns,
    )


def _oracle_from_sweep(entries, y, mask, theta):
    """Per-metric oracle over (lam, theta_hat) pairs; ties go to larger lambda."""
    best_pred = (float("nan"), float("inf"))
    best_tot = (float("nan"), float("inf"))
    for lam, theta_hat in entries:
        pe = prediction_error(theta_hat, y, mask)
        te = total_error(theta_hat, theta)
        if np.isfinite(pe) and pe < best_pred[1]:
            best_pred = (lam, pe)
        if np.isfinite(te) and te < best_tot[1]:
            best_tot = (lam, te)
    return best_pred, best_tot


def _sweep_entries(method, y, mask, grid, scenario: Scenario, rng) -> tuple[list, dict]:
    """Fit one method over the whole grid; returns [(lam, theta_hat)] and provenance."""
    opts = SolveOptions(
        lam=grid[0],
        max_iters=scenario.solver_max_iters,
        rel_tol=scenario.solver_rel_tol,
        algorithm="ista" if method == "mar_softimpute" else "fista",
    )
    info: dict = {}
    if method == "mean_impute":
        return [(float("nan"), mean_impute(y, mask))], info

    if method in ("mar_fista", "mar_softimpute"):
        gsr = lambda_grid_search(
            y, mask, grid, lambda r: prediction_error(r.theta_hat, y, mask), opts
        )
        entries = [(pt.lam, pt.result.theta_hat) for pt in gsr.sweep if pt.result is not None]
        return entries, info

    if method == "mask_concat":
        problem = build_concat_problem(y, mask)
        p = y.shape[1]
        gsr = lambda_grid_search(
            problem.augmented_data,
            problem.augmented_mask,
            grid,
            lambda r: prediction_error(r.theta_hat[:, :p], y, mask),
            opts,
        )
        entries = [(pt.lam, pt.result.theta_hat[:, :p]) for pt in gsr.sweep if pt.result is not None]
        return entries, info

    if method == "mask_expfam":
        links = gaussian_bernoulli_links(y.shape[1], scenario.sigma2)
        entries = []
        for lam in grid:
            try:
                nat = expfam_solve(y, mask, lam, links, opts)
            except Exception as exc:
                info.setdefault("grid_failures", []).append((lam, f"{type(exc).__name__}: {exc}"))
                continue
            # natural parameter -> data-scale mean via the Gaussian link derivative
            entries.append((lam, scenario.sigma2 * nat))
        if not entries:
            raise RuntimeError(f"every grid point failed: {info['grid_failures']}")
        return entries, info

    if method == "model_mcem":
        entries = []
        iters = []
        for lam in grid:
            # Individual grid points may legitimately blow up (extreme
            # shrinkage can drive the mechanism fit into degeneracy); they
            # are recorded and skipped, the sweep continues.
            try:
                state = mcem_fit(y, mask, _mcem_config(scenario, lam), rng)
            except Exception as exc:
                info.setdefault("grid_failures", []).append((lam, f"{type(exc).__name__}: {exc}"))
                continue
            entries.append((lam, state.theta_hat))
            iters.append(state.iteration)
        info["em_iterations"] = iters
        if not entries:
            raise RuntimeError(f"every grid point failed: {info['grid_failures']}")
        return entries, info

    raise ValueError(f"unknown method {method!r}")


def _resolve_mechanism(scenario: Scenario, y) -> tuple[MechanismSpec, float | None]:
    """Optionally re-center the logistic mechanism to hit a target missing rate."""
    spec = scenario.mechanism
    if scenario.target_overall_missing_rate is None:
        return spec, None
    if spec.family != "self_masked_logistic" or spec.params is None or spec.params.mode != "shared":
        raise ValueError("rate calibration requires a shared self-masked logistic mechanism")
    per_column_rate = scenario.target_overall_missing_rate * scenario.p / len(spec.target_columns)
    if not 0.0 < per_column_rate < 1.0:
        raise ValueError(f"implied per-column missing rate {per_column_rate} is not in (0, 1)")
    phi1 = spec.params.shared_pair[0]
    values = y[:, list(spec.target_columns)]
    phi2 = solve_center_for_rate(phi1, values, per_column_rate)
    calibrated = MechanismSpec(
        family=spec.family,
        target_columns=spec.target_columns,
        params=MechanismParams.shared((phi1, phi2)),
        driver_column=spec.driver_column,
    )
    return calibrated, phi2


def _run_replication(scenario: Scenario, rep: int):
    children = np.random.SeedSequence(scenario.seed).spawn(scenario.replications)
    streams = children[rep].spawn(1 + len(scenario.methods))
    data_rng = np.random.default_rng(streams[0])

    decorrelate = None
    if scenario.decorrelate_driver:
        if scenario.mechanism.family != "mar_driver":
            raise ValueError("decorrelate_driver only applies to mar_driver mechanisms")
        decorrelate = (scenario.mechanism.target_columns[0], scenario.mechanism.driver_column)
    theta = generate_low_rank(scenario.n, scenario.p, scenario.rank, data_rng, decorrelate=decorrelate)
    y = add_noise(theta, scenario.sigma2, data_rng)
    mech, solved_center = _resolve_mechanism(scenario, y)
    mask = sample_mask(y, mech, data_rng)
    missing_rate = float(1.0 - mask.mean())

    records = []
    for k, method in enumerate(scenario.methods):
        rng = np.random.default_rng(streams[1 + k])
        grid = scenario.lambda_grid
        if grid is None:
            if method in ("mask_concat", "mask_expfam"):
                design = np.hstack([mask * np.where(mask == 1.0, y, 0.0), mask])
            else:
                design = mask * np.where(mask == 1.0, y, 0.0)
            grid = auto_lambda_grid(design, scenario.grid_size, scenario.grid_span)
        t0 = time.perf_counter()
        try:
            entries, info = _sweep_entries(method, y, mask, grid, scenario, rng)
            (lam_pred, pred), (lam_tot, tot) = _oracle_from_sweep(entries, y, mask, theta)
            records.append(
                MethodRecord(
                    method=method,
                    replication=rep,
                    prediction_error=pred if np.isfinite(pred) else float("nan"),
                    total_error=tot if np.isfinite(tot) else float("nan"),
                    lambda_selected=lam_pred,
                    lambda_total_oracle=lam_tot,
                    wall_time_s=time.perf_counter() - t0,
                    info=info,
                )
            )
        except Exception as exc:  # failures are recorded, never abort the campaign
            records.append(
                MethodRecord(
                    method=method,
                    replication=rep,
                    prediction_error=float("nan"),
                    total_error=float("nan"),
                    lambda_selected=float("nan"),
                    wall_time_s=time.perf_counter() - t0,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    return records, missing_rate, solved_center


def _quartiles(values):
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    if arr.size == 0:
        return {"median": float("nan"), "q1": float("nan"), "q3": float("nan"), "count": 0}
    return {
        "median": float(np.median(arr)),
        "q1": float(np.quantile(arr, 0.25)),
        "q3": float(np.quantile(arr, 0.75)),
        "count": int(arr.size),
    }


def summarize(records: list[MethodRecord], methods) -> dict:
    by_method = {m: [r for r in records if r.method == m] for m in methods}
    summary: dict = {"methods": {}, "win_rates": {}}
    for m, recs in by_method.items():
        summary["methods"][m] = {
            "prediction_error": _quartiles([r.prediction_error for r in recs]),
            "total_error": _quartiles([r.total_error for r in recs]),
            "wall_time_s": _quartiles([r.wall_time_s for r in recs]),
            "failures": [
                {"replication": r.replication, "error": r.error} for r in recs if r.error
            ],
        }
    for metric in ("prediction_error", "total_error"):
        table: dict = {}
        for m1 in methods:
            row = {}
            vals1 = {r.replication: getattr(r, metric) for r in by_method[m1] if r.error is None}
            for m2 in methods:
                if m1 == m2:
                    continue
                vals2 = {r.replication: getattr(r, metric) for r in by_method[m2] if r.error is None}
                common = [k for k in vals1 if k in vals2
                          and np.isfinite(vals1[k]) and np.isfinite(vals2[k])]
                if common:
                    wins = sum(1 for k in common if vals1[k] < vals2[k])
                    row[m2] = wins / len(common)
                else:
                    row[m2] = float("nan")
            table[m1] = row
        summary["win_rates"][metric] = table
    return summary


def run_campaign(scenario: Scenario, n_jobs: int = 1) -> CampaignResult:
    """Run all replications; aggregation is independent of worker scheduling."""
    reps = range(scenario.replications)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outputs = list(pool.map(_run_replication, [scenario] * scenario.replications, reps))
    else:
        outputs = [_run_replication(scenario, i) for i in reps]

    records: list[MethodRecord] = []
    missing_rates: list[float] = []
    centers: list[float | None] = []
    for recs, rate, center in outputs:
        records.extend(recs)
        missing_rates.append(rate)
        centers.append(center)
    summary = summarize(records, scenario.methods)
    summary["missing_rate"] = {
        "mean": float(np.mean(missing_rates)),
        "per_replication": missing_rates,
    }
    return CampaignResult(
        scenario=scenario,
        records=records,
        missing_rates=missing_rates,
        mechanism_centers=centers,
        summary=summary,
    )


def fit_single(
    method: str,
    y,
    mask,
    lam: float,
    *,
    sigma2: float | None = None,
    rng: np.random.Generator | None = None,
    solver_max_iters: int = 500,
    solver_rel_tol: float = 1e-6,
    mcem_config: McemConfig | None = None,
):
    """Fit one method at one lambda; returns (theta_hat, info).

    The model-based and exponential-family methods need sigma2; the
    model-based method also needs an rng.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=float)
    opts = SolveOptions(
        lam=lam if method != "mean_impute" else 0.0,
        max_iters=solver_max_iters,
        rel_tol=solver_rel_tol,
        algorithm="ista" if method == "mar_softimpute" else "fista",
    )
    if method == "mean_impute":
        return mean_impute(y, mask), {}
    if method in ("mar_fista", "mar_softimpute"):
        res = solve(np.where(mask == 1.0, y, 0.0), mask, opts)
        return res.theta_hat, {"iterations": res.iterations_run, "converged": res.converged}
    if method == "mask_concat":
        from .mask_concat import concat_solve

        return concat_solve(y, mask, lam, opts), {}
    if method == "mask_expfam":
        if sigma2 is None:
            raise ValueError("mask_expfam requires sigma2")
        links = gaussian_bernoulli_links(y.shape[1], sigma2)
        nat = expfam_solve(y, mask, lam, links, opts)
        return sigma2 * nat, {}
    # model_mcem
    if sigma2 is None:
        raise ValueError("model_mcem requires sigma2")
    if rng is None:
        raise ValueError("model_mcem requires an rng")
    cfg = mcem_config if mcem_config is not None else McemConfig(lam=lam, sigma=math.sqrt(sigma2))
    if cfg.lam != lam:
        cfg = replace(cfg, lam=lam)
    state = mcem_fit(y, mask, cfg, rng)
    info = {
        "em_iterations": state.iteration,
        "converged": state.converged,
    }
    if state.phi_hat is not None:
        if state.phi_hat.mode == "shared":
            info["phi_hat"] = {"shared": list(state.phi_hat.shared_pair)}
        else:
            info["phi_hat"] = {str(k): list(v) for k, v in state.phi_hat.by_column.items()}
    return state.theta_hat, info


def holdout_lambda_select(fit_fn, y, mask, grid, rng, holdout_frac: float = 0.2):
    """Pick lambda by masking a fraction of observed cells and scoring them.

    For real data without ground truth.  `fit_fn(y, mask, lam)` must return a
    completed matrix.  Every column keeps at least one observed cell.  Ties
    go to the larger lambda.
    """
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=float)
    train = mask.copy()
    held = np.zeros_like(mask, dtype=bool)
    for j in range(mask.shape[1]):
        obs = np.where(mask[:, j] == 1.0)[0]
        k = min(int(math.floor(holdout_frac * obs.size)), obs.size - 1)
        if k < 1:
            continue
        chosen = rng.choice(obs, size=k, replace=False)
        train[chosen, j] = 0.0
        held[chosen, j] = True
    if not held.any():
        raise ValueError("not enough observed cells to hold out")
    best_lam, best_score = None, float("inf")
    for lam in grid:
        theta_hat = fit_fn(y, train, lam)
        score = float(np.sum((theta_hat[held] - y[held]) ** 2))
        if score < best_score:
            best_lam, best_score = lam, score
    return best_lam, best_score


def scenario_to_dict(scenario: Scenario) -> dict:
    """JSON-friendly resolved scenario (embedded in every report)."""
    d = asdict(scenario)
    mech = d.pop("mechanism")
    params = mech.pop("params")
    if params is not None:
        params["by_column"] = {str(k): list(v) for k, v in params["by_column"].items()}
        if params["shared_pair"] is not None:
            params["shared_pair"] = list(params["shared_pair"])
    mech["params"] = params
    mech["target_columns"] = list(mech["target_columns"])
    d["mechanism"] = mech
    d["methods"] = list(d["methods"])
    if d["lambda_grid"] is not None:
        d["lambda_grid"] = list(d["lambda_grid"])
    return d


def scenario_from_dict(d: dict) -> Scenario:
    """Inverse of scenario_to_dict (accepts the config-file layout)."""
    d = dict(d)
    mech = dict(d.pop("mechanism"))
    params = mech.pop("params", None)
    if params is not None:
        params = MechanismParams(
            mode=params["mode"],
            by_column={int(k): tuple(v) for k, v in params.get("by_column", {}).items()},
            shared_pair=tuple(params["shared_pair"]) if params.get("shared_pair") else None,
        )
    spec = MechanismSpec(
        family=mech["family"],
        target_columns=tuple(mech["target_columns"]),
        params=params,
        driver_column=mech.get("driver_column"),
    )
    if d.get("lambda_grid") is not None:
        d["lambda_grid"] = tuple(d["lambda_grid"])
    if "methods" in d:
        d["methods"] = tuple(d["methods"])
    return Scenario(mechanism=spec, **d)
