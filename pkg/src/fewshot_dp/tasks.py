"""Synthetic few-shot tasks with a controllable domain shift.

A task is a set of isotropic Gaussian class clusters whose means live in a
low-dimensional signal subspace ``U`` of the input space. A backbone is
pretrained non-privately on the *source* clusters and
then frozen. Downstream tasks move away from the source with ``shift``:

* cluster means are blended towards freshly drawn ones, and
* the signal subspace is rotated by ``shift * pi / 2`` towards an orthogonal
  partner subspace the backbone was never trained to read.

``shift = 0`` reproduces the source distribution exactly; ``shift = 1``
puts all class information in directions the pretrained features barely
see, which is the desk-scale analogue of a high transfer-difficulty dataset.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from fewshot_dp.dp_optim import Optimizer, OptimizerKind
from fewshot_dp.errors import DimensionError
from fewshot_dp.model import Mode, ModelState, init_model, per_example_grads
from fewshot_dp.rng import stream

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class FewShotDataset:
    """Labelled feature vectors with a split tag per example.

    Labels are class indices ``0 .. n_classes - 1``.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    shots: int
    splits: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        s = np.asarray(self.splits, dtype="<U5")
        if x.ndim != 2 or len(x) != len(y) or len(y) != len(s):
            raise DimensionError("features, labels and splits must align")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise DimensionError(f"labels must lie in [0, {self.n_classes})")
        if not set(np.unique(s)) <= set(SPLITS):
            raise DimensionError(f"unknown split tags {set(np.unique(s)) - set(SPLITS)}")
        for name, arr in (("features", x), ("labels", y), ("splits", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def xy(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.features[idx], self.labels[idx]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Generator settings for one source/downstream task pair.

    Attributes:
        seed: generator seed; identical seeds give identical tasks.
        n_classes: downstream class count.
        dim: input dimension.
        shift: domain-shift control in [0, 1].
        signal_dim: dimension of the subspace carrying class information.
        separation: std of the class-mean coordinates inside the signal subspace.
        noise: isotropic within-class std.
        source_classes: class count of the pretraining task (defaults to n_classes).
        hidden_width / feature_dim: backbone architecture.
    """

    seed: int = 0
    n_classes: int = 5
    dim: int = 16
    shift: float = 0.0
    signal_dim: int = 4
    separation: float = 3.0
    noise: float = 1.0
    source_classes: int | None = None
    hidden_width: int = 64
    feature_dim: int = 8
    pretrain_per_class: int = 200
    pretrain_steps: int = 300
    pretrain_lr: float = 0.01
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.shift <= 1.0:
            raise ValueError(f"shift must lie in [0, 1], got {self.shift}")
        if 2 * self.signal_dim > self.dim:
            raise ValueError("dim must be at least twice signal_dim")

    @property
    def n_source(self) -> int:
        return self.source_classes or self.n_classes

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Task:
    spec: SyntheticTaskSpec
    source_means: np.ndarray
    target_means: np.ndarray

    def sample(self, per_class: int, rng: np.random.Generator, source: bool = False):
        means = self.source_means if source else self.target_means
        c = len(means)
        y = np.repeat(np.arange(c), per_class)
        x = means[y] + self.spec.noise * rng.standard_normal((len(y), self.spec.dim))
        return x, y

    def bayes_accuracy(self, n_per_class: int = 20000, seed: int = 0) -> float:
        """Monte-Carlo accuracy of the optimal (nearest-mean) downstream classifier."""
        x, y = self.sample(n_per_class, stream(seed, "bayes"))
        d = ((x[:, None, :] - self.target_means[None, :, :]) ** 2).sum(-1)
        return float(np.mean(np.argmin(d, axis=1) == y))


def make_task(spec: SyntheticTaskSpec) -> Task:
    rng = stream(spec.seed, "task")
    basis, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
    k = spec.signal_dim
    u, v = basis[:, :k], basis[:, k : 2 * k]

    src_coords = spec.separation * rng.standard_normal((spec.n_source, k))
    fresh = spec.separation * rng.standard_normal((spec.n_classes, k))
    base = src_coords[: spec.n_classes] if spec.n_classes <= spec.n_source else np.vstack(
        [src_coords, fresh[spec.n_source :]]
    )
    s = spec.shift
    # blend keeps the expected mean norm: cos/sin weights instead of (1-s, s)
    theta = s * math.pi / 2
    coords = math.cos(theta) * base + math.sin(theta) * fresh
    target_dirs = math.cos(theta) * u + math.sin(theta) * v
    return Task(spec, src_coords @ u.T, coords @ target_dirs.T)


@lru_cache(maxsize=64)
def _pretrained(spec: SyntheticTaskSpec) -> ModelState:
    task = make_task(spec)
    rng = stream(spec.seed, "pretrain")
    x, y = task.sample(spec.pretrain_per_class, rng, source=True)
    model = init_model(spec.dim, spec.hidden_width, spec.feature_dim, spec.n_source, rng, Mode.ALL)
    # small random head so gradients reach the backbone from step one
    model = model.with_trainable(_with_random_head(model, rng))
    opt = Optimizer(OptimizerKind.ADAM, spec.pretrain_lr)
    params = model.trainable_vector()
    decay = _decay_mask(model)
    for _ in range(spec.pretrain_steps):
        g = per_example_grads(model, x, y).mean(axis=0) + spec.weight_decay * decay * params
        params = opt.update(params, g)
        model = model.with_trainable(params)
    return model


def _with_random_head(model: ModelState, rng: np.random.Generator) -> np.ndarray:
    vec = model.trainable_vector().copy()
    n_head = model.head_W.size + model.head_b.size
    vec[-n_head:] = 0.01 * rng.standard_normal(n_head)
    return vec


def _decay_mask(model: ModelState) -> np.ndarray:
    # decay weights only; FiLM, biases and head are left alone
    parts = []
    for name in Mode.ALL.groups:
        arr = getattr(model, name)
        parts.append(np.full(arr.size, 1.0 if name in ("W1", "W2") else 0.0))
    return np.concatenate(parts)


def pretrained_model(spec: SyntheticTaskSpec, mode: Mode | str = Mode.HEAD) -> ModelState:
    """Frozen pretrained backbone with identity FiLM and a zero downstream head."""
    # the source task does not depend on the shift, so neither does the backbone
    base = _pretrained(dataclasses.replace(spec, shift=0.0))
    return base.with_head(spec.n_classes).with_mode(mode)


def sample_dataset(
    spec: SyntheticTaskSpec,
    shots: int,
    rng: np.random.Generator,
    test_per_class: int = 200,
) -> FewShotDataset:
    """``shots`` training examples per class plus a held-out test split."""
    task = make_task(spec)
    x_tr, y_tr = task.sample(shots, rng)
    x_te, y_te = task.sample(test_per_class, rng)
    splits = np.array(["train"] * len(y_tr) + ["test"] * len(y_te))
    return FewShotDataset(
        np.vstack([x_tr, x_te]), np.concatenate([y_tr, y_te]), spec.n_classes, shots, splits
    )
