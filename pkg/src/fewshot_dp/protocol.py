"""Centralized few-shot pipeline: tuning split, budgeted search, sweeps, analysis.

One *cell* of a sweep is a (shots, epsilon, mode) triple. For every seed the
cell samples ``|D| = C * S`` training examples, tunes hyperparameters on a
stratified 70/30 train/validation split of ``D``, retrains the winner on all
of ``D`` and scores it on a held-out test split that tuning never sees.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from fewshot_dp import dp_optim
from fewshot_dp.dp_optim import DpOptimConfig, OptimizerKind
from fewshot_dp.errors import ConfigError, MetricError
from fewshot_dp.model import Mode, accuracy
from fewshot_dp.rng import stream
from fewshot_dp.tasks import SyntheticTaskSpec, pretrained_model, sample_dataset

DEFAULT_TUNER_BUDGET = 20
VALIDATION_FRACTION = 0.3
INTERPOLATION_THRESHOLD = 0.99


@dataclass(frozen=True)
class HyperRanges:
    """Search box for fine-tuning hyperparameters.

    ``batch`` upper bound ``None`` means ``|D|``. All four axes are sampled
    log-uniformly; epochs and batch size are then rounded to integers.
    """

    epochs: tuple[int, int] = (1, 200)
    lr: tuple[float, float] = (1e-7, 1e-2)
    batch: tuple[int, int | None] = (10, None)
    clip: tuple[float, float] = (0.2, 10.0)

    def __post_init__(self):
        problems = []
        limits = {"epochs": (1, 200), "lr": (1e-7, 1e-2), "clip": (0.2, 10.0)}
        for name, (lo_lim, hi_lim) in limits.items():
            lo, hi = getattr(self, name)
            if not lo_lim <= lo <= hi <= hi_lim:
                problems.append(f"{name}: need {lo_lim} <= low <= high <= {hi_lim}, got ({lo}, {hi})")
        b_lo, b_hi = self.batch
        if b_lo < 1 or (b_hi is not None and b_hi < b_lo):
            problems.append(f"batch: need 1 <= low <= high, got ({b_lo}, {b_hi})")
        if problems:
            raise ConfigError("invalid hyperparameter ranges", problems)

    def batch_bounds(self, n: int) -> tuple[int, int]:
        hi = n if self.batch[1] is None else min(self.batch[1], n)
        return min(self.batch[0], hi), hi

    def decode(self, u: np.ndarray, n: int) -> dict:
        """Map a point of the unit cube ``[0, 1]^4`` to concrete hyperparameters."""

        def logmap(t, lo, hi):
            return math.exp(math.log(lo) + float(t) * (math.log(hi) - math.log(lo)))

        b_lo, b_hi = self.batch_bounds(n)
        return {
            "epochs": int(min(self.epochs[1], max(self.epochs[0], round(logmap(u[0], *self.epochs))))),
            "lr": logmap(u[1], *self.lr),
            "batch_size": int(min(b_hi, max(b_lo, round(logmap(u[2], b_lo, b_hi))))),
            "clip": logmap(u[3], *self.clip),
        }


class TunerKind(str, Enum):
    RANDOM = "random"
    TPE = "tpe"


class Tuner:
    """Proposes points of the unit cube; ``observe`` feeds back validation scores.

    Random search draws uniformly. The TPE variant draws its first
    ``n_startup`` points uniformly, then models the best quarter of trials
    and the rest with Gaussian Parzen windows and proposes the candidate
    (out of ``n_candidates`` drawn from the good model) with the largest
    density ratio.
    """

    def __init__(self, kind: TunerKind | str, rng: np.random.Generator, dim: int = 4,
                 n_startup: int = 8, n_candidates: int = 24, gamma: float = 0.25):
        self.kind = TunerKind(kind)
        self.rng = rng
        self.dim = dim
        self.n_startup = n_startup
        self.n_candidates = n_candidates
        self.gamma = gamma
        self.points: list[np.ndarray] = []
        self.scores: list[float] = []

    def propose(self) -> np.ndarray:
        if self.kind is TunerKind.RANDOM or len(self.points) < self.n_startup:
            return self.rng.random(self.dim)
        pts = np.array(self.points)
        order = np.argsort(-np.array(self.scores), kind="stable")
        n_good = max(1, int(math.ceil(self.gamma * len(pts))))
        good, bad = pts[order[:n_good]], pts[order[n_good:]]
        bw = max(0.05, len(pts) ** (-1.0 / (self.dim + 4)) * 0.3)
        centres = good[self.rng.integers(len(good), size=self.n_candidates)]
        cand = np.clip(centres + bw * self.rng.standard_normal(centres.shape), 0.0, 1.0)
        ratio = _parzen_logpdf(cand, good, bw) - _parzen_logpdf(cand, bad, bw)
        return cand[int(np.argmax(ratio))]

    def observe(self, point: np.ndarray, score: float) -> None:
        self.points.append(np.asarray(point, dtype=np.float64))
        self.scores.append(float(score))


def _parzen_logpdf(x: np.ndarray, centres: np.ndarray, bw: float) -> np.ndarray:
    # uniform prior component keeps the density positive when centres is empty
    d2 = ((x[:, None, :] - centres[None, :, :]) ** 2).sum(-1) if len(centres) else np.zeros((len(x), 0))
    k = -0.5 * d2 / bw**2 - x.shape[1] * math.log(bw * math.sqrt(2 * math.pi))
    parts = np.concatenate([k, np.zeros((len(x), 1))], axis=1)
    m = parts.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(parts - m).sum(axis=1, keepdims=True)))[:, 0] - math.log(len(centres) + 1)


def stratified_split(
    labels: np.ndarray, rng: np.random.Generator, val_fraction: float = VALIDATION_FRACTION
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class split of positions ``0..len(labels)-1`` into (train, validation).

    Each class sends ``round(val_fraction * n_c)`` examples to validation but
    always keeps at least one for training, so a single-example class is
    train-only.
    """
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_val = min(int(round(val_fraction * len(idx))), len(idx) - 1)
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


@dataclass(frozen=True)
class CellKey:
    shots: int
    epsilon: float | None
    mode: Mode

    @property
    def label(self) -> str:
        eps = "inf" if self.epsilon is None else f"{self.epsilon:g}"
        return f"S={self.shots} eps={eps} mode={self.mode.value}"


@dataclass(frozen=True)
class CellRun:
    """Outcome of one seed of one cell."""

    shots: int
    epsilon: float | None
    mode: str
    seed: int
    test_accuracy: float
    train_accuracy: float
    steps: int
    sigma: float | None
    delta: float | None
    hyperparameters: dict
    trials: int

    @property
    def key(self) -> CellKey:
        return CellKey(self.shots, self.epsilon, Mode(self.mode))

    def row(self) -> dict:
        d = asdict(self)
        hp = d.pop("hyperparameters")
        d.update({f"hp_{k}": v for k, v in sorted(hp.items())})
        return d


@dataclass(frozen=True)
class SweepResult:
    runs: tuple[CellRun, ...]

    def cells(self) -> list[CellKey]:
        seen: dict[CellKey, None] = {}
        for r in self.runs:
            seen.setdefault(r.key, None)
        return list(seen)

    def cell_runs(self, key: CellKey) -> list[CellRun]:
        return [r for r in self.runs if r.key == key]

    def median(self, key: CellKey, metric: str = "test_accuracy") -> float:
        vals = [getattr(r, metric) for r in self.cell_runs(key)]
        if not vals:
            raise KeyError(f"no runs for cell {key.label}")
        return float(np.median(vals))

    def medians(self, metric: str = "test_accuracy") -> dict[CellKey, float]:
        return {k: self.median(k, metric) for k in self.cells()}

    def curve(self, epsilon: float | None, mode: Mode | str, metric: str = "test_accuracy"):
        """Sorted ``(S, median)`` pairs for one (epsilon, mode) series."""
        mode = Mode(mode)
        pts = [(k.shots, v) for k, v in self.medians(metric).items() if k.epsilon == epsilon and k.mode is mode]
        return sorted(pts)


@dataclass(frozen=True)
class ProtocolConfig:
    """Settings shared by every cell of a sweep."""

    ranges: HyperRanges = field(default_factory=HyperRanges)
    tuner: TunerKind = TunerKind.RANDOM
    budget: int = DEFAULT_TUNER_BUDGET
    optimizer: OptimizerKind = OptimizerKind.ADAM
    accountant: str = "rdp"
    delta: float | None = None
    test_per_class: int = 200

    def __post_init__(self):
        object.__setattr__(self, "tuner", TunerKind(self.tuner))
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        if self.budget < 1:
            raise ConfigError(f"tuner budget must be >= 1, got {self.budget}")


def _fit(x, y, model, hp: dict, epsilon, delta, cfg: ProtocolConfig, rng):
    private = epsilon is not None
    n = len(y)
    sigma = None
    if private:
        sigma = dp_optim.noise_for_budget(epsilon, delta, n, hp["batch_size"], hp["epochs"], cfg.accountant)
    opt_cfg = DpOptimConfig(
        clip=hp["clip"], sigma=sigma, batch_size=hp["batch_size"], lr=hp["lr"],
        optimizer=cfg.optimizer, epochs=hp["epochs"],
    )
    return dp_optim.train(x, y, model, opt_cfg, rng, private=private)


def run_cell_seed(
    task: SyntheticTaskSpec,
    shots: int,
    mode: Mode | str,
    epsilon: float | None,
    seed: int,
    cfg: ProtocolConfig = ProtocolConfig(),
    on_trial: Callable[[dict, float], None] | None = None,
) -> CellRun:
    """Tune, retrain and evaluate one cell for one seed.

    Data and tuner draws are keyed by ``(seed, shots)`` only, so cells that
    differ in epsilon or mode see the same examples and candidate points.
    """
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    mode = Mode(mode)
    data = sample_dataset(task, shots, stream(seed, "data", shots), cfg.test_per_class)
    x, y = data.xy("train")
    n = len(y)
    delta = (cfg.delta if cfg.delta is not None else 1.0 / n) if epsilon is not None else None
    base = pretrained_model(task, mode)

    tr, va = stratified_split(y, stream(seed, "split", shots))
    tune_idx = data.indices("train")
    test_idx = data.indices("test")
    assert not set(tune_idx[tr]) & set(test_idx) and not set(tune_idx[va]) & set(test_idx)
    # no validation examples at all (every class has a single shot): score on train
    x_val, y_val = (x[va], y[va]) if len(va) else (x[tr], y[tr])

    tuner = Tuner(cfg.tuner, stream(seed, "tuner", shots))
    best_hp, best_score = None, -math.inf
    for trial in range(cfg.budget):
        u = tuner.propose()
        hp = cfg.ranges.decode(u, len(tr))
        res = _fit(x[tr], y[tr], base, hp, epsilon, delta, cfg, stream(seed, "trial", shots, trial))
        score = accuracy(res.model, x_val, y_val)
        tuner.observe(u, score)
        if on_trial is not None:
            on_trial(hp, score)
        if score > best_score:
            best_hp, best_score = hp, score

    # refit on all of D; the batch size is re-clipped to the larger set
    final_hp = dict(best_hp)
    final_hp["batch_size"] = min(max(final_hp["batch_size"], cfg.ranges.batch_bounds(n)[0]), n)
    res = _fit(x, y, base, final_hp, epsilon, delta, cfg, stream(seed, "final", shots))
    x_te, y_te = data.xy("test")
    return CellRun(
        shots=shots,
        epsilon=epsilon,
        mode=mode.value,
        seed=seed,
        test_accuracy=accuracy(res.model, x_te, y_te),
        train_accuracy=accuracy(res.model, x, y),
        steps=res.steps,
        sigma=res.sigma,
        delta=delta,
        hyperparameters=final_hp,
        trials=cfg.budget,
    )


def run_protocol(
    task: SyntheticTaskSpec,
    shots: int,
    mode: Mode | str,
    epsilon: float | None,
    seeds: Iterable[int],
    cfg: ProtocolConfig = ProtocolConfig(),
) -> SweepResult:
    """All seeds of one cell (``epsilon=None`` is the non-private baseline)."""
    return SweepResult(tuple(run_cell_seed(task, shots, mode, epsilon, s, cfg) for s in seeds))


def run_sweep(
    task: SyntheticTaskSpec,
    shots: Sequence[int],
    epsilons: Sequence[float | None],
    modes: Sequence[Mode | str],
    seeds: Sequence[int],
    cfg: ProtocolConfig = ProtocolConfig(),
    threads: int = 1,
) -> SweepResult:
    """Every (S, epsilon, mode, seed) job; output order is independent of ``threads``."""
    jobs = [(s, e, Mode(m), seed) for s in shots for e in epsilons for m in modes for seed in seeds]
    run = lambda j: run_cell_seed(task, j[0], j[2], j[1], j[3], cfg)
    if threads <= 1:
        return SweepResult(tuple(map(run, jobs)))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return SweepResult(tuple(pool.map(run, jobs)))


# -- analysis ---------------------------------------------------------------


@dataclass(frozen=True)
class TransferDifficulty:
    score: float
    bucket: str


def td_bucket(score: float) -> str:
    """``[.., 5]`` low, ``(5, 10]`` medium, ``(10, ..)`` high."""
    if score <= 5.0:
        return "low"
    if score <= 10.0:
        return "medium"
    return "high"


def transfer_difficulty(acc_all: float, acc_head: float) -> TransferDifficulty:
    """Relative accuracy loss (in percent) of training only the head versus all parameters."""
    if not acc_all > 0:
        raise MetricError(f"accuracy of the fully fine-tuned model must be positive, got {acc_all}")
    score = 100.0 * (acc_all - acc_head) / acc_all
    return TransferDifficulty(score, td_bucket(score))


@dataclass(frozen=True)
class ShotMultiplier:
    """``min_shots / s_ref``; ``multiplier`` is ``None`` when the curve never catches up."""

    multiplier: float | None
    min_shots: float | None
    target_accuracy: float
    clamped: bool = False

    @property
    def exceeds_grid(self) -> bool:
        return self.multiplier is None


def _curve(points, name: str) -> tuple[np.ndarray, np.ndarray]:
    pts = sorted((float(s), float(a)) for s, a in points)
    if not pts:
        raise ValueError(f"{name} is empty")
    s = np.array([p[0] for p in pts])
    if np.any(np.diff(s) == 0):
        raise ValueError(f"{name} repeats a shot value")
    return s, np.array([p[1] for p in pts])


def shot_multiplier(np_curve, dp_curve, s_ref: float) -> ShotMultiplier:
    """How many times more shots the private curve needs to match non-private at ``s_ref``.

    The private curve is linearly interpolated between its grid points and
    the smallest ``S`` whose interpolated accuracy reaches the non-private
    accuracy at ``s_ref`` is returned relative to ``s_ref``. If the private
    curve already reaches it at its first grid point the result is clamped
    there and flagged.
    """
    np_s, np_a = _curve(np_curve, "non-private curve")
    dp_s, dp_a = _curve(dp_curve, "private curve")
    hit = np.flatnonzero(np_s == float(s_ref))
    if not len(hit):
        raise ValueError(f"s_ref={s_ref} is not a grid point of the non-private curve")
    target = float(np_a[hit[0]])
    if dp_a[0] >= target:
        return ShotMultiplier(dp_s[0] / s_ref, float(dp_s[0]), target, clamped=True)
    for i in range(1, len(dp_s)):
        if dp_a[i] >= target:
            frac = (target - dp_a[i - 1]) / (dp_a[i] - dp_a[i - 1])
            s_min = float(dp_s[i - 1] + frac * (dp_s[i] - dp_s[i - 1]))
            return ShotMultiplier(s_min / s_ref, s_min, target)
    return ShotMultiplier(None, None, target)


@dataclass(frozen=True)
class RegimeReport:
    gap: float
    regime: str


def regime_report(train_acc: float, test_acc: float) -> RegimeReport:
    """Generalization gap plus an interpolating/regularized label."""
    for v in (train_acc, test_acc):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"accuracies must lie in [0, 1], got {v}")
    regime = "interpolating" if train_acc >= INTERPOLATION_THRESHOLD else "regularized"
    return RegimeReport(train_acc - test_acc, regime)
