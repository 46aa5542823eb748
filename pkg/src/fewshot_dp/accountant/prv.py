"""Numerical privacy-loss accounting by FFT composition.

The privacy loss random variable of one Poisson-subsampled Gaussian step is
discretized onto a uniform grid with mean-preserving randomized rounding,
composed ``T`` times in the Fourier domain, and inverted for epsilon.

The reported epsilon is an upper bound. Three error sources are priced:

* rounding: each step's rounded loss differs from the true loss by a
  zero-mean increment of range ``h``; Hoeffding gives a one-sided shift
  ``t = h * sqrt(T * log(1/eta) / 2)`` that holds except with probability
  ``eta``.
* truncation: loss mass above the per-step grid is charged to delta via a
  union bound over steps; mass below is pushed up to the first grid point.
* wrap-around: the circular FFT window is sized by a Chernoff bound so the
  mass that can alias from above is at most a fixed share of the budget.

Both neighbouring directions (remove and add) are evaluated and the larger
epsilon is reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.fft
from scipy.optimize import brentq, minimize_scalar
from scipy.special import logsumexp
from scipy.stats import norm

from fewshot_dp.accountant.params import MechanismParams, check_delta
from fewshot_dp.errors import ResolutionError

DEFAULT_EPS_ERROR = 0.005
# share of delta spent on numerical error, split between rounding, truncation, wrap
DELTA_ERROR_FRACTION = 1e-3
MAX_GRID = 1 << 25


@dataclass(frozen=True)
class DiscreteLoss:
    """Single-step privacy loss on the grid ``start + k * step``.

    ``pmf`` sums to ``1 - tail_mass``; ``tail_mass`` is the probability that the
    loss exceeds the last grid point.
    """

    start: float
    step: float
    pmf: np.ndarray
    tail_mass: float

    @property
    def values(self) -> np.ndarray:
        return self.start + self.step * np.arange(len(self.pmf))


def _g_inverse(y, q: float, sigma: float):
    """Inverse of ``g(x) = log(1 - q + q * exp((2x - 1) / (2 sigma^2)))``; needs y > log(1-q)."""
    y = np.asarray(y, dtype=np.float64)
    if q == 1.0:
        inner = y
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            inner = y + np.log1p(-(1.0 - q) * np.exp(-y))
    return sigma**2 * (inner - math.log(q)) + 0.5


def _survival_remove(q: float, sigma: float) -> Callable[[np.ndarray], np.ndarray]:
    # x ~ q N(1, s^2) + (1 - q) N(0, s^2); loss = g(x), increasing in x
    floor = math.log1p(-q) if q < 1.0 else -math.inf

    def sf(y):
        y = np.asarray(y, dtype=np.float64)
        out = np.ones_like(y)
        ok = y > floor
        x = _g_inverse(y[ok], q, sigma)
        out[ok] = q * norm.sf((x - 1.0) / sigma) + (1.0 - q) * norm.sf(x / sigma)
        return out

    return sf


def _survival_add(q: float, sigma: float) -> Callable[[np.ndarray], np.ndarray]:
    # x ~ N(0, s^2); loss = -g(x), bounded above by -log(1 - q)
    ceil = -math.log1p(-q) if q < 1.0 else math.inf

    def sf(y):
        y = np.asarray(y, dtype=np.float64)
        out = np.zeros_like(y)
        ok = y < ceil
        x = _g_inverse(-y[ok], q, sigma)
        out[ok] = norm.cdf(x / sigma)
        return out

    return sf


def _level(sf, target: float, lo: float, hi: float) -> float:
    """Smallest y in [lo, hi] (approximately) with sf(y) <= target."""
    f = lambda y: math.log(max(float(sf(np.array([y]))[0]), 1e-320)) - math.log(target)
    while f(hi) > 0:
        hi = hi * 2 + 1
        if hi > 1e6:
            raise ResolutionError("privacy loss tail does not decay; widen the grid")
    while f(lo) < 0:
        lo = lo * 2 - 1
        if lo < -1e6:
            return lo
    return brentq(f, lo, hi, xtol=1e-10)


def discretize(sf, step: float, lo: float, hi: float) -> DiscreteLoss:
    """Mean-preserving randomized rounding of a loss with survival ``sf`` onto a grid.

    Grid point ``a_k`` receives ``avgS(cell k-1) - avgS(cell k)`` where ``avgS`` is
    the cell-averaged survival (Simpson's rule); mass below ``lo`` moves up to it.
    """
    n = int(math.ceil((hi - lo) / step))
    if n + 1 > MAX_GRID:
        raise ResolutionError(
            f"per-step grid needs {n + 1} points; increase eps_error or reduce steps"
        )
    a = lo + step * np.arange(n + 1)
    s_edge = sf(a)
    s_mid = sf(a[:-1] + step / 2)
    avg = (s_edge[:-1] + 4.0 * s_mid + s_edge[1:]) / 6.0
    pmf = np.empty(n + 1)
    pmf[0] = 1.0 - avg[0]
    pmf[1:-1] = avg[:-1] - avg[1:]
    pmf[-1] = avg[-1] - s_edge[-1]
    np.clip(pmf, 0.0, None, out=pmf)
    return DiscreteLoss(start=float(lo), step=float(step), pmf=pmf, tail_mass=float(s_edge[-1]))


def _chernoff_window(loss: DiscreteLoss, steps: int, budget: float) -> tuple[float, float]:
    """Interval holding the ``steps``-fold sum except for ``budget`` mass on each side.

    ``(T * K(lam) - log(budget)) / lam`` is quasi-convex in ``lam`` (its
    numerator's derivative is ``lam * T * K''(lam) >= 0``), so a bounded scalar
    search over ``log(lam)`` finds the tightest bound.
    """
    keep = loss.pmf > 0
    v = loss.values[keep]
    logp = np.log(loss.pmf[keep])
    c = -math.log(budget)

    def edge(sign: float) -> float:
        def bound(log_lam):
            lam = math.exp(log_lam)
            return (steps * float(logsumexp(logp + sign * lam * v)) + c) / lam

        res = minimize_scalar(bound, bounds=(math.log(1e-4), math.log(1e4)), method="bounded",
                              options={"xatol": 1e-3})
        return float(res.fun)

    return -edge(-1.0), edge(1.0)


def _power_spectrum(spec: np.ndarray, n: int) -> np.ndarray:
    """``spec ** n`` by repeated squaring."""
    result = np.ones_like(spec)
    base = spec.copy()
    while n:
        if n & 1:
            result *= base
        n >>= 1
        if n:
            base *= base
    return result


@dataclass(frozen=True)
class ComposedLoss:
    values: np.ndarray
    pmf: np.ndarray
    delta_error: float
    eps_shift: float

    def delta_at(self, eps: float) -> float:
        """Hockey-stick divergence of the composed discrete loss (without error terms)."""
        m = self.values > eps
        return float(np.sum(self.pmf[m] * -np.expm1(eps - self.values[m])))


def compose(sf, params: MechanismParams, delta: float, eps_error: float, lo_hint: float) -> ComposedLoss:
    T = params.steps
    err_budget = delta * DELTA_ERROR_FRACTION
    eta = err_budget / 3.0
    tail_budget = err_budget / 3.0
    wrap_budget = err_budget / 3.0

    step = eps_error / math.sqrt(T * math.log(1.0 / eta) / 2.0)
    hi = _level(sf, tail_budget / T, 0.0, 1.0)
    # mass below ``lo`` is moved up (pessimistic); keep it negligible
    lo = -_level(lambda y: 1.0 - sf(-y), tail_budget / T, 0.0, 1.0) if math.isinf(lo_hint) else lo_hint
    lo = min(lo, hi - 2 * step)
    loss = discretize(sf, step, lo, hi)

    w_lo, w_hi = _chernoff_window(loss, T, wrap_budget)
    span = w_hi - w_lo
    size = int(math.ceil(span / step)) + 2
    if size > MAX_GRID:
        raise ResolutionError(
            f"composition window needs {size} grid points (> {MAX_GRID}); "
            "increase eps_error or split the accounting"
        )
    size = scipy.fft.next_fast_len(size, real=True)
    j_lo = int(math.floor((w_lo - T * loss.start) / loss.step))

    folded = np.bincount(np.arange(len(loss.pmf)) % size, weights=loss.pmf, minlength=size)
    spec = scipy.fft.rfft(folded)
    composed = scipy.fft.irfft(_power_spectrum(spec, T), n=size)
    np.clip(composed, 0.0, None, out=composed)

    r = np.arange(size)
    j = j_lo + np.mod(r - j_lo, size)
    order = np.argsort(j, kind="stable")
    values = T * loss.start + loss.step * j[order].astype(np.float64)
    pmf = composed[order]

    shift = step * math.sqrt(T * math.log(1.0 / eta) / 2.0)
    delta_err = eta + T * loss.tail_mass + wrap_budget
    return ComposedLoss(values=values, pmf=pmf, delta_error=delta_err, eps_shift=shift)


def _epsilon_one_direction(sf, params, delta, eps_error, lo_hint) -> float:
    comp = compose(sf, params, delta, eps_error, lo_hint)
    target = delta - comp.delta_error
    if target <= 0:
        raise ResolutionError("delta is below the numerical error budget; widen the grid")
    if comp.delta_at(0.0) <= target:
        return comp.eps_shift
    top = float(comp.values[-1])
    if comp.delta_at(top) > target:
        raise ResolutionError(
            "requested delta lies beyond the truncated loss grid; widen the grid"
        )
    eps = brentq(lambda e: comp.delta_at(e) - target, 0.0, top, xtol=1e-12)
    return eps + comp.eps_shift


def prv_epsilon(params: MechanismParams, delta: float, eps_error: float = DEFAULT_EPS_ERROR) -> float:
    """Upper bound on epsilon at ``delta`` via numerical loss composition.

    Args:
        params: subsampled Gaussian mechanism.
        delta: target delta.
        eps_error: additive epsilon error allowed for discretization; the
            result exceeds the exact epsilon by at most about ``2 * eps_error``.

    Raises:
        ResolutionError: if the grid cannot represent the request.
    """
    check_delta(delta)
    if params.steps == 0 or params.q == 0.0:
        return 0.0
    q, s = params.q, params.sigma
    remove_floor = math.log1p(-q) if q < 1.0 else -math.inf
    eps = _epsilon_one_direction(_survival_remove(q, s), params, delta, eps_error, remove_floor)
    if q < 1.0:
        eps = max(eps, _epsilon_one_direction(_survival_add(q, s), params, delta, eps_error, -math.inf))
    return float(eps)


def prv_slack(eps_error: float = DEFAULT_EPS_ERROR) -> float:
    """How far ``prv_epsilon`` may exceed the exact epsilon."""
    return 2.0 * eps_error
