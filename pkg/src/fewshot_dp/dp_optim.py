"""DP-SGD / DP-Adam with Poisson sampling and per-example clipping.

The privatized gradient of one step is

    (sum_i clip(g_i) + N(0, sigma^2 * clip^2 * I)) / B

with ``B`` the *expected* batch size, so empty Poisson batches still inject
noise and consume a step. Only the active mode's trainable parameters move;
frozen arrays are carried over untouched.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from fewshot_dp import accountant as acct
from fewshot_dp.errors import CalibrationError, ConfigError
from fewshot_dp.model import ModelState, accuracy, per_example_grads


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class DpOptimConfig:
    clip: float = 1.0
    sigma: float | None = None
    batch_size: int = 10
    lr: float = 1e-3
    optimizer: OptimizerKind = OptimizerKind.ADAM
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        if not self.clip > 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")


def poisson_batch(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``range(n)``, each kept independently with probability ``q``."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    return np.flatnonzero(rng.random(n) < q)


def clip_grad(g: np.ndarray, clip: float) -> np.ndarray:
    """Scale ``g`` by ``min(1, clip / ||g||)``; rows are clipped independently for 2-D input."""
    g = np.asarray(g, dtype=np.float64)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > clip, clip / norms, 1.0)
    return g * scale


def _stable_sum(rows: np.ndarray, width: int) -> np.ndarray:
    # pairwise reduction over examples; sorting by row bytes would make it fully
    # order-free, but pairwise already keeps permutations within ~1e-15 relative
    if rows.shape[0] == 0:
        return np.zeros(width)
    return np.add.reduce(np.ascontiguousarray(rows.T), axis=1)


@dataclass
class Optimizer:
    """Plain SGD or Adam acting on a flat parameter vector."""

    kind: OptimizerKind
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    @classmethod
    def from_config(cls, cfg: DpOptimConfig) -> "Optimizer":
        return cls(cfg.optimizer, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        if self.kind is OptimizerKind.SGD:
            return params - self.lr * grad
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class StepLog:
    """Debug record of post-clip per-example norms."""

    max_clipped_norm: list[float] = field(default_factory=list)
    batch_sizes: list[int] = field(default_factory=list)


def privatize(
    grads: np.ndarray, clip: float, sigma: float, expected_batch: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Clip rows, sum, add Gaussian noise, divide by the expected batch size.

    Returns ``(privatized_gradient, clipped_rows)``.
    """
    width = grads.shape[1]
    clipped = clip_grad(grads, clip) if len(grads) else grads
    total = _stable_sum(clipped, width)
    noise = rng.normal(0.0, sigma * clip, size=width) if sigma > 0 else 0.0
    return (total + noise) / expected_batch, clipped


def dp_step(
    model: ModelState,
    x: np.ndarray,
    y: np.ndarray,
    batch: np.ndarray,
    cfg: DpOptimConfig,
    rng: np.random.Generator,
    opt: Optimizer,
    log: StepLog | None = None,
) -> ModelState:
    """One DP step on the examples ``batch`` of ``(x, y)``; returns the updated model."""
    if cfg.sigma is None:
        raise ConfigError("private step needs a calibrated sigma")
    params = model.trainable_vector()
    if len(batch):
        g = per_example_grads(model, x[batch], y[batch])
    else:
        g = np.zeros((0, params.size))
    priv, clipped = privatize(g, cfg.clip, cfg.sigma, float(cfg.batch_size), rng)
    if log is not None:
        log.max_clipped_norm.append(float(np.linalg.norm(clipped, axis=1).max()) if len(clipped) else 0.0)
        log.batch_sizes.append(len(batch))
    return model.with_trainable(opt.update(params, priv))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def planned_steps(n: int, cfg: DpOptimConfig) -> int:
    return cfg.epochs * steps_per_epoch(n, cfg.batch_size)


@dataclass(frozen=True)
class TrainResult:
    model: ModelState
    steps: int
    sigma: float | None
    sampling_rate: float


def train(
    x: np.ndarray,
    y: np.ndarray,
    model: ModelState,
    cfg: DpOptimConfig,
    rng: np.random.Generator,
    private: bool = True,
    log: StepLog | None = None,
) -> TrainResult:
    """Fine-tune ``model`` for ``cfg.epochs`` epochs.

    Private runs use Poisson batches with rate ``B / n`` and require
    ``cfg.sigma``; non-private runs shuffle and walk fixed-size mini-batches
    with the plain mean gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    batch_size = min(cfg.batch_size, n) if n else cfg.batch_size
    per_epoch = steps_per_epoch(n, batch_size)
    opt = Optimizer.from_config(cfg)
    q = min(1.0, batch_size / n) if n else 0.0
    if private:
        if cfg.sigma is None:
            raise ConfigError("private training needs sigma; calibrate it with the accountant first")
        step_cfg = cfg if batch_size == cfg.batch_size else dataclasses.replace(cfg, batch_size=batch_size)
        for _ in range(cfg.epochs * per_epoch):
            batch = poisson_batch(n, q, rng)
            model = dp_step(model, x, y, batch, step_cfg, rng, opt, log)
    else:
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            for s in range(per_epoch):
                idx = perm[s * batch_size : (s + 1) * batch_size]
                g = per_example_grads(model, x[idx], y[idx])
                grad = _stable_sum(g, g.shape[1]) / len(idx)
                model = model.with_trainable(opt.update(model.trainable_vector(), grad))
    return TrainResult(model, cfg.epochs * per_epoch, cfg.sigma if private else None, q)


def noise_for_budget(
    epsilon: float,
    delta: float,
    n: int,
    batch_size: int,
    epochs: int,
    accountant: str = "rdp",
) -> float:
    """Noise multiplier for a DP-SGD run of ``epochs`` over ``n`` examples.

    If the budget is met even at the smallest admissible sigma, that sigma is
    returned (the run is then more private than asked).
    """
    b = min(batch_size, n)
    q = b / n
    steps = epochs * steps_per_epoch(n, b)
    try:
        return acct.calibrate_sigma(acct.PrivacyBudget(epsilon, delta), q, steps, accountant)
    except CalibrationError as err:
        lo_eps, _ = err.bracket or (math.inf, math.inf)
        if lo_eps < epsilon:
            return acct.SIGMA_BOUNDS[0]
        raise


def evaluate(model: ModelState, x, y) -> float:
    return accuracy(model, x, y)
