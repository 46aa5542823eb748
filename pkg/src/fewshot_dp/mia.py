"""Likelihood-ratio membership inference against a population of fine-tuned models.

A pool of ``2|D|`` labelled examples is drawn once. Each of ``M + 1`` models
is fine-tuned on an independent 50% subset of the pool. Every model in turn
plays the target: for each pool example the remaining models supply the
logit-confidences of models that did (IN) and did not (OUT) train on it, a
Gaussian is fitted to each side, and the target's own confidence is scored
by the log likelihood ratio. Scores and true membership from all targets are
pooled into a single ROC curve.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from fewshot_dp import dp_optim
from fewshot_dp.dp_optim import DpOptimConfig
from fewshot_dp.errors import ConfigError, MetricError
from fewshot_dp.model import Mode, ModelState, logits
from fewshot_dp.rng import stream
from fewshot_dp.tasks import SyntheticTaskSpec, make_task, pretrained_model

LOGIT_CLAMP = 40.0
VARIANCE_FLOOR = 1e-3
FPR_TARGETS = (1e-3, 1e-2, 1e-1)
# each pool example must be IN (and OUT) for this many models, so that after
# removing any one target at least one of each remains to fit the Gaussians
MIN_SIDE = 2


class VarianceMode(str, Enum):
    PER_EXAMPLE = "per_example"
    GLOBAL = "global"


@dataclass(frozen=True)
class TrainerConfig:
    """Hyperparameters shared by the target and every shadow model."""

    mode: Mode = Mode.HEAD
    epsilon: float | None = None
    delta: float | None = None
    optim: DpOptimConfig = DpOptimConfig(lr=1e-2, epochs=100, batch_size=10, clip=1.0)
    accountant: str = "rdp"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass(frozen=True)
class ShadowPopulation:
    pool_x: np.ndarray
    pool_y: np.ndarray
    masks: np.ndarray  # (M + 1, 2|D|) bool, row i = training set of model i
    models: tuple[ModelState, ...]
    sigmas: tuple[float | None, ...]

    @property
    def n_models(self) -> int:
        return len(self.models)


def sample_pool(spec: SyntheticTaskSpec, size: int, rng: np.random.Generator):
    """``size`` downstream examples with labels cycling through the classes."""
    task = make_task(spec)
    y = np.arange(size) % spec.n_classes
    x = task.target_means[y] + spec.noise * rng.standard_normal((size, spec.dim))
    return x, y


def membership_masks(n_models: int, pool_size: int, rng: np.random.Generator) -> np.ndarray:
    """Independent fair-coin inclusion, with deficient columns redrawn.

    A column (pool example) with fewer than ``MIN_SIDE`` IN or OUT models is
    redrawn until it has enough of both.
    """
    if n_models < 2 * MIN_SIDE:
        raise ConfigError(f"need at least {2 * MIN_SIDE} models, got {n_models}")
    masks = rng.random((n_models, pool_size)) < 0.5
    for j in range(pool_size):
        while not MIN_SIDE <= masks[:, j].sum() <= n_models - MIN_SIDE:
            masks[:, j] = rng.random(n_models) < 0.5
    return masks


@lru_cache(maxsize=256)
def _sigma_for(epsilon: float, delta: float, n: int, batch: int, epochs: int, accountant: str) -> float:
    return dp_optim.noise_for_budget(epsilon, delta, n, batch, epochs, accountant)


def _train_one(spec, cfg: TrainerConfig, x, y, seed: int, index: int):
    base = pretrained_model(spec, cfg.mode)
    private = cfg.epsilon is not None
    opt = cfg.optim
    if private:
        n = len(y)
        delta = cfg.delta if cfg.delta is not None else 1.0 / n
        sigma = _sigma_for(cfg.epsilon, delta, n, min(opt.batch_size, n), opt.epochs, cfg.accountant)
        opt = DpOptimConfig(**{**opt.__dict__, "sigma": sigma})
    res = dp_optim.train(x, y, base, opt, stream(seed, "mia", "model", index), private=private)
    return res.model, res.sigma


def build_population(
    spec: SyntheticTaskSpec,
    dataset_size: int,
    n_shadows: int,
    cfg: TrainerConfig,
    seed: int,
    threads: int = 1,
) -> ShadowPopulation:
    """Train ``n_shadows + 1`` models on random halves of a ``2 * dataset_size`` pool."""
    pool_x, pool_y = sample_pool(spec, 2 * dataset_size, stream(seed, "mia", "pool"))
    masks = membership_masks(n_shadows + 1, 2 * dataset_size, stream(seed, "mia", "masks"))

    def job(i):
        return _train_one(spec, cfg, pool_x[masks[i]], pool_y[masks[i]], seed, i)

    if threads <= 1:
        out = [job(i) for i in range(len(masks))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(job, range(len(masks))))
    return ShadowPopulation(pool_x, pool_y, masks, tuple(m for m, _ in out), tuple(s for _, s in out))


def logit_confidence(p) -> np.ndarray:
    """``log(p / (1 - p))`` clamped to ``[-40, 40]`` (finite at p = 0 or 1)."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = np.log(p) - np.log1p(-p)
    return np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)


def model_confidence(model: ModelState, x, y) -> np.ndarray:
    """Logit-scaled probability of the true label, computed from logits without rounding to p."""
    z = logits(model, np.atleast_2d(x))
    y = np.asarray(y)
    rows = np.arange(len(y))
    true = z[rows, y]
    others = z.copy()
    others[rows, y] = -np.inf
    m = others.max(axis=1)
    lse_others = m + np.log(np.exp(others - m[:, None]).sum(axis=1))
    return np.clip(true - lse_others, -LOGIT_CLAMP, LOGIT_CLAMP)


def _gauss_logpdf(x, mu, var):
    return -0.5 * (np.log(2 * math.pi * var) + (x - mu) ** 2 / var)


def lira_score(conf_in, conf_out, observed: float, var_floor: float = VARIANCE_FLOOR) -> float:
    """Log likelihood ratio of ``observed`` under the IN versus OUT Gaussian."""
    a = np.asarray(conf_in, dtype=np.float64)
    b = np.asarray(conf_out, dtype=np.float64)
    if not len(a) or not len(b):
        raise ValueError("both IN and OUT confidences are required")
    var_in = max(float(a.var()), var_floor)
    var_out = max(float(b.var()), var_floor)
    return float(_gauss_logpdf(observed, a.mean(), var_in) - _gauss_logpdf(observed, b.mean(), var_out))


@dataclass(frozen=True)
class RocMetrics:
    tpr_at_fpr: dict[float, float]
    auc: float
    advantage: float
    fpr: np.ndarray
    tpr: np.ndarray

    def summary(self) -> dict:
        return {
            "tpr_at_fpr": {f"{k:g}": v for k, v in self.tpr_at_fpr.items()},
            "auc": self.auc,
            "advantage": self.advantage,
        }


@dataclass(frozen=True)
class AttackRecord:
    scores: np.ndarray  # (M + 1, 2|D|)
    membership: np.ndarray  # same shape, bool
    metrics: RocMetrics


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) over every unique score threshold, from (0, 0) to (1, 1).

    An example is predicted a member when its score is at least the threshold.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    lab = np.asarray(labels, dtype=bool).ravel()
    n_pos, n_neg = int(lab.sum()), int((~lab).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs at least one member and one non-member")
    order = np.argsort(-s, kind="stable")
    s, lab = s[order], lab[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    # keep the last index of each run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    return fpr, tpr


def roc_metrics(scores, labels, fpr_targets=FPR_TARGETS) -> RocMetrics:
    fpr, tpr = roc_curve(scores, labels)
    at = {}
    for t in fpr_targets:
        ok = fpr <= t
        at[float(t)] = float(tpr[ok].max())
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocMetrics(at, auc, float(np.max(tpr - fpr)), fpr, tpr)


def attack_scores(
    conf: np.ndarray,
    masks: np.ndarray,
    variance: VarianceMode | str = VarianceMode.PER_EXAMPLE,
    var_floor: float = VARIANCE_FLOOR,
) -> np.ndarray:
    """LiRA score of every (target model, pool example) pair.

    ``conf[i, j]`` is model ``i``'s logit-confidence on example ``j``. For
    target ``t`` the IN/OUT statistics of example ``j`` come from all other
    models, obtained by subtracting the target's contribution from totals.
    """
    variance = VarianceMode(variance)
    inc = masks.astype(np.float64)
    exc = 1.0 - inc
    stats = []
    for w in (inc, exc):
        n = w.sum(0)[None, :] - w
        s1 = (w * conf).sum(0)[None, :] - w * conf
        s2 = (w * conf**2).sum(0)[None, :] - w * conf**2
        mu = s1 / n
        var = np.maximum(s2 / n - mu**2, 0.0)
        if variance is VarianceMode.GLOBAL:
            # one variance per target: pooled over all examples' residuals
            var = np.repeat(((var * n).sum(1) / n.sum(1))[:, None], conf.shape[1], axis=1)
        stats.append((mu, np.maximum(var, var_floor)))
    (mu_in, v_in), (mu_out, v_out) = stats
    return _gauss_logpdf(conf, mu_in, v_in) - _gauss_logpdf(conf, mu_out, v_out)


def attack_all(
    pop: ShadowPopulation,
    variance: VarianceMode | str = VarianceMode.PER_EXAMPLE,
    var_floor: float = VARIANCE_FLOOR,
) -> AttackRecord:
    """Each model as target in turn; all (score, membership) pairs pooled into one ROC."""
    conf = np.stack([model_confidence(m, pop.pool_x, pop.pool_y) for m in pop.models])
    scores = attack_scores(conf, pop.masks, variance, var_floor)
    return AttackRecord(scores, pop.masks.copy(), roc_metrics(scores, pop.masks))


def dp_tpr_bound(fpr, epsilon: float, delta: float) -> np.ndarray:
    """Largest TPR an (epsilon, delta)-DP training run allows at a given FPR."""
    fpr = np.asarray(fpr, dtype=np.float64)
    return np.minimum(1.0, np.exp(epsilon) * fpr + delta)
