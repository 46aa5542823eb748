"""Parameter containers shared by the accountants."""

from __future__ import annotations

import math
from dataclasses import dataclass

from fewshot_dp.errors import PrivacyParameterError


@dataclass(frozen=True)
class MechanismParams:
    """Poisson-subsampled Gaussian mechanism composed over ``steps`` rounds.

    Attributes:
        sigma: noise standard deviation divided by the clipping norm.
        q: Poisson sampling probability per step.
        steps: number of composed applications.
    """

    sigma: float
    q: float
    steps: int

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise PrivacyParameterError(f"sigma must be positive, got {self.sigma}")
        if not (0.0 <= self.q <= 1.0):
            raise PrivacyParameterError(f"q must lie in [0, 1], got {self.q}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise PrivacyParameterError(f"steps must be a non-negative integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise PrivacyParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        check_delta(self.delta)


def check_delta(delta: float) -> float:
    if not (0.0 < delta < 1.0):
        raise PrivacyParameterError(f"delta must lie in (0, 1), got {delta}")
    return float(delta)
