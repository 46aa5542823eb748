"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Integer orders use the log-domain binomial expansion of the moment
``A_alpha = E_{z~N(0, s^2)}[(1 - q + q * exp((2z - 1) / (2 s^2)))^alpha]``;
fractional orders integrate the same expectation numerically on a dense
grid in log space. Both reduce to ``alpha / (2 s^2)`` when ``q == 1``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from fewshot_dp.accountant.params import MechanismParams, check_delta

# 1.1 .. 10.95 in steps of 0.05 (contains 1.1, 1.25, 1.5, ...), integers 11..64,
# plus a few large orders for very small epsilon regimes.
DEFAULT_ORDERS: tuple[float, ...] = tuple(
    [round(1.0 + k / 20.0, 2) for k in range(2, 200)]
    + [float(a) for a in range(11, 65)]
    + [128.0, 256.0, 512.0]
)

_GRID_PER_SIGMA = 40
_TAIL_SIGMAS = 15.0


def _lse_rows(m: np.ndarray) -> np.ndarray:
    peak = np.max(m, axis=1)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        return peak + np.log(np.sum(np.exp(m - peak[:, None]), axis=1))


def _log_a_int(q: float, sigma: float, alphas: np.ndarray) -> np.ndarray:
    """Log-moments for integer orders via the binomial expansion, one padded matrix."""
    alphas = np.asarray(alphas, dtype=np.float64)
    k = np.arange(int(alphas.max()) + 1, dtype=np.float64)[None, :]
    a = alphas[:, None]
    with np.errstate(invalid="ignore"):
        log_binom = gammaln(a + 1) - gammaln(k + 1) - gammaln(a - k + 1)
        terms = log_binom + k * math.log(q) + (a - k) * math.log1p(-q) + (k * k - k) / (2 * sigma**2)
    terms = np.where(k <= a, terms, -np.inf)
    return _lse_rows(terms)


def _log_a_frac(q: float, sigma: float, alphas: np.ndarray) -> np.ndarray:
    """Log-moments for many fractional orders on one shared trapezoid grid."""
    lo = -_TAIL_SIGMAS * sigma - 1.0
    hi = float(np.max(alphas)) + _TAIL_SIGMAS * sigma + 1.0
    n = int(math.ceil((hi - lo) * _GRID_PER_SIGMA / sigma)) + 1
    z = np.linspace(lo, hi, n)
    dz = z[1] - z[0]
    log_phi = -0.5 * (z / sigma) ** 2 - math.log(sigma * math.sqrt(2 * math.pi))
    log_ratio = np.logaddexp(math.log1p(-q), math.log(q) + (2 * z - 1) / (2 * sigma**2))
    log_f = log_phi[None, :] + alphas[:, None] * log_ratio[None, :]
    # trapezoid weights in log space
    log_w = np.full(n, math.log(dz))
    log_w[[0, -1]] -= math.log(2.0)
    return _lse_rows(log_f + log_w[None, :])


def _rdp_values(q: float, sigma: float, orders: tuple[float, ...]) -> np.ndarray:
    a = np.asarray(orders, dtype=np.float64)
    if q == 0.0:
        return np.zeros_like(a)
    if q == 1.0:
        return a / (2 * sigma**2)
    log_a = np.empty_like(a)
    is_int = a == np.round(a)
    with np.errstate(over="ignore", invalid="ignore"):
        ints = np.flatnonzero(is_int)
        if len(ints):
            log_a[ints] = _log_a_int(q, sigma, a[ints])
        frac = np.flatnonzero(~is_int)
        if len(frac):
            log_a[frac] = _log_a_frac(q, sigma, a[frac])
    return np.maximum(log_a, 0.0) / (a - 1)


@lru_cache(maxsize=4096)
def _rdp_cached(q: float, sigma: float, orders: tuple[float, ...]) -> np.ndarray:
    out = _rdp_values(q, sigma, orders)
    out = np.where(np.isfinite(out), out, np.inf)
    out.setflags(write=False)
    return out


def rdp_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Per-step RDP at each order; ``inf`` where the computation overflows."""
    return _rdp_cached(float(q), float(sigma), tuple(float(a) for a in orders))


def rdp_to_dp(rdp: np.ndarray, orders, delta: float) -> tuple[float, float]:
    """Convert composed RDP values to epsilon at ``delta``.

    Uses ``eps = rdp + log((a - 1) / a) - (log(delta) + log(a)) / (a - 1)``
    minimised over the orders. Returns ``(eps, best_order)``.
    """
    a = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    eps = rdp + np.log((a - 1) / a) - (math.log(delta) + np.log(a)) / (a - 1)
    eps = np.where(np.isfinite(eps), eps, np.inf)
    i = int(np.argmin(eps))
    if not math.isfinite(eps[i]):
        return math.inf, float(a[i])
    return max(float(eps[i]), 0.0), float(a[i])


def rdp_epsilon(params: MechanismParams, delta: float, orders=DEFAULT_ORDERS) -> float:
    """Epsilon of ``params.steps`` composed subsampled Gaussians at ``delta``."""
    check_delta(delta)
    if params.steps == 0 or params.q == 0.0:
        return 0.0
    curve = params.steps * rdp_curve(params.q, params.sigma, orders)
    return rdp_to_dp(curve, orders, delta)[0]
