"""(epsilon, delta) accounting for Poisson-subsampled Gaussian mechanisms."""

from __future__ import annotations

import math
from enum import Enum

from scipy.optimize import brentq

from fewshot_dp.accountant.params import MechanismParams, PrivacyBudget, check_delta
from fewshot_dp.accountant.prv import DEFAULT_EPS_ERROR, prv_epsilon, prv_slack
from fewshot_dp.accountant.rdp import DEFAULT_ORDERS, rdp_epsilon
from fewshot_dp.errors import CalibrationError, PrivacyParameterError

SIGMA_BOUNDS = (0.1, 1000.0)
CALIBRATION_TOL = 1e-3


class Accountant(str, Enum):
    RDP = "rdp"
    PRV = "prv"


def epsilon(params: MechanismParams, delta: float, accountant: Accountant | str = Accountant.RDP) -> float:
    accountant = Accountant(accountant)
    if accountant is Accountant.RDP:
        return rdp_epsilon(params, delta)
    return prv_epsilon(params, delta)


def convert_delta(
    params: MechanismParams,
    from_delta: float,
    to_delta: float,
    accountant: Accountant | str = Accountant.RDP,
) -> float:
    """Epsilon of the same mechanism re-expressed at ``to_delta``.

    ``from_delta`` is only validated; the mechanism alone determines the curve.
    """
    check_delta(from_delta)
    return epsilon(params, to_delta, accountant)


def calibrate_sigma(
    target: PrivacyBudget,
    q: float,
    steps: int,
    accountant: Accountant | str = Accountant.RDP,
    tol: float = CALIBRATION_TOL,
) -> float:
    """Noise multiplier whose epsilon lies in ``[target - tol, target]``.

    Bisects on ``log(sigma)`` over ``SIGMA_BOUNDS``; epsilon is non-increasing
    in sigma.

    Raises:
        CalibrationError: the target is unreachable inside the bounds.
    """
    if not target.epsilon > 0:
        raise PrivacyParameterError("target epsilon must be positive")
    if steps < 1:
        raise PrivacyParameterError("calibration needs at least one step")
    eps_at = lambda s: epsilon(MechanismParams(s, q, steps), target.delta, accountant)

    lo, hi = SIGMA_BOUNDS
    if Accountant(accountant) is Accountant.PRV:
        lo, hi = _prv_bracket(target, q, steps, tol, eps_at)
    e_lo, e_hi = eps_at(lo), eps_at(hi)
    if e_hi > target.epsilon:
        raise CalibrationError(
            f"epsilon {e_hi:.4g} at sigma={hi:.4g} still exceeds target {target.epsilon}",
            bracket=(e_lo, e_hi),
        )
    if e_lo < target.epsilon - tol:
        raise CalibrationError(
            f"epsilon {e_lo:.4g} at sigma={lo:.4g} is already below target {target.epsilon}",
            bracket=(e_lo, e_hi),
        )
    if e_lo <= target.epsilon:
        return lo
    # Brent on log(sigma) aimed at the middle of the acceptance band; epsilon is
    # only piecewise smooth (minimum over orders), so fall back to bisection.
    aim = target.epsilon - tol / 2
    f = lambda ls: eps_at(math.exp(ls)) - aim
    try:
        s = math.exp(brentq(f, math.log(lo), math.log(hi), xtol=1e-10, rtol=1e-12, maxiter=100))
        e = eps_at(s)
        if target.epsilon - tol <= e <= target.epsilon:
            return s
    except (ValueError, RuntimeError):
        pass
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        e = eps_at(mid)
        if target.epsilon - tol <= e <= target.epsilon:
            return mid
        if e > target.epsilon:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1 < 1e-12:
            break
    # epsilon jumps across the band; the noisier end is the conservative choice
    return hi


def _prv_bracket(target, q, steps, tol, eps_at) -> tuple[float, float]:
    # PRV never exceeds RDP by more than its slack, so the RDP solution (nudged
    # up) bounds sigma from above; walk down geometrically for the lower end
    # instead of evaluating the numerically expensive extreme sigma=0.1.
    lo_bound, hi_bound = SIGMA_BOUNDS
    try:
        hi = min(calibrate_sigma(target, q, steps, Accountant.RDP, tol) * 1.05, hi_bound)
    except CalibrationError:
        hi = hi_bound
    lo = hi
    while lo > lo_bound:
        lo = max(lo / 1.5, lo_bound)
        if eps_at(lo) > target.epsilon:
            break
    return lo, hi


__all__ = [
    "Accountant",
    "CALIBRATION_TOL",
    "DEFAULT_EPS_ERROR",
    "DEFAULT_ORDERS",
    "MechanismParams",
    "PrivacyBudget",
    "SIGMA_BOUNDS",
    "calibrate_sigma",
    "convert_delta",
    "epsilon",
    "prv_epsilon",
    "prv_slack",
    "rdp_epsilon",
]
