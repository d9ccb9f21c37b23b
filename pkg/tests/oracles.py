"""Independent reference implementations used to check the estimators.

Everything here is deliberately written from the definitions (rejection
sampling, quadrature, brute-force scans) rather than sharing code with the
package.
"""

import numpy as np
from scipy.special import expit


def rejection_sample_conditional_missing(theta, phi, sigma, n_samples, rng, max_batches=2000):
    """Exact draws from the law of y given that it is missing.

    Proposes from the Gaussian prior N(theta, sigma^2) and accepts with the
    missing probability sigmoid(phi1*(x - phi2)), which is a valid rejection
    step because that probability is bounded by one.
    """
    phi1, phi2 = phi
    out = []
    for _ in range(max_batches):
        x = theta + sigma * rng.standard_normal(4096)
        keep = rng.random(4096) < expit(phi1 * (x - phi2))
        out.append(x[keep])
        if sum(len(a) for a in out) >= n_samples:
            break
    draws = np.concatenate(out)
    if draws.size < n_samples:
        raise RuntimeError("rejection sampler did not accept enough draws")
    return draws[:n_samples]


def conditional_missing_density(grid, theta, phi, sigma):
    """Normalized target density on a grid via trapezoid quadrature."""
    phi1, phi2 = phi
    g = np.exp(-0.5 * ((grid - theta) / sigma) ** 2) * expit(phi1 * (grid - phi2))
    z = np.trapezoid(g, grid)
    return g / z


def logistic_loglik(intercept, slope, v, r):
    eta = intercept + slope * v
    return float(np.sum(r * eta - np.logaddexp(0.0, eta)))


def grid_search_logistic_mle(v, r, intercepts, slopes):
    """Brute-force likelihood maximization over a parameter grid."""
    best = (None, None, -np.inf)
    for b0 in intercepts:
        for b1 in slopes:
            ll = logistic_loglik(b0, b1, v, r)
            if ll > best[2]:
                best = (b0, b1, ll)
    return best
