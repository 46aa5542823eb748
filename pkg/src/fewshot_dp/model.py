"""Desk-scale classifier ``f(x) = head(backbone(x))`` with FiLM adapters.

The backbone is two dense layers; each layer's pre-activation passes through
a per-channel FiLM transform ``gamma * a + beta`` before the rectifier. The
head is a linear layer on the backbone features. Three parameterization
modes decide what fine-tuning may change:

* ``Mode.HEAD``: head only.
* ``Mode.FILM``: head plus every FiLM scale/offset.
* ``Mode.ALL``: everything.

Parameters are exchanged as flat float64 vectors whose layout is fixed by
``PARAM_ORDER``; ``trainable_slices`` gives the sub-vector for a mode.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

import numpy as np

from fewshot_dp.errors import DimensionError

PARAM_ORDER = ("W1", "b1", "W2", "b2", "gamma1", "beta1", "gamma2", "beta2", "head_W", "head_b")
BACKBONE = ("W1", "b1", "W2", "b2")
FILM = ("gamma1", "beta1", "gamma2", "beta2")
HEAD = ("head_W", "head_b")


class Mode(str, Enum):
    HEAD = "head"
    FILM = "film"
    ALL = "all"

    @property
    def groups(self) -> tuple[str, ...]:
        if self is Mode.HEAD:
            return HEAD
        if self is Mode.FILM:
            return FILM + HEAD
        return PARAM_ORDER


def film_apply(activations, gamma, beta) -> np.ndarray:
    """Elementwise ``gamma * activations + beta`` (broadcast over leading batch axes)."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gamma, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    if g.shape != b.shape or a.shape[-1:] != g.shape:
        raise DimensionError(
            f"FiLM shapes disagree: activations {a.shape}, gamma {g.shape}, beta {b.shape}"
        )
    return g * a + b


@dataclass(frozen=True)
class ModelState:
    """Immutable parameter set plus the active parameterization mode."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray
    head_W: np.ndarray
    head_b: np.ndarray
    mode: Mode = Mode.HEAD

    def __post_init__(self):
        for name in PARAM_ORDER:
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "mode", Mode(self.mode))
        w, d = self.W1.shape
        d_b = self.W2.shape[0]
        expected = {
            "b1": (w,), "W2": (d_b, w), "b2": (d_b,), "gamma1": (w,), "beta1": (w,),
            "gamma2": (d_b,), "beta2": (d_b,), "head_W": (d_b, self.head_b.shape[0]),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def n_classes(self) -> int:
        return self.head_b.shape[0]

    def with_mode(self, mode: Mode | str) -> "ModelState":
        return dataclasses.replace(self, mode=Mode(mode))

    def with_head(self, n_classes: int) -> "ModelState":
        """Fresh zero head for ``n_classes`` (FiLM reset to identity is not implied)."""
        return dataclasses.replace(
            self,
            head_W=np.zeros((self.feature_dim, n_classes)),
            head_b=np.zeros(n_classes),
        )

    def flat(self, groups: tuple[str, ...] = PARAM_ORDER) -> np.ndarray:
        return np.concatenate([getattr(self, g).ravel() for g in groups])

    def trainable_vector(self) -> np.ndarray:
        return self.flat(self.mode.groups)

    def with_trainable(self, vec: np.ndarray) -> "ModelState":
        """Copy with the active mode's trainable parameters replaced by ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (count_learnable(self),):
            raise DimensionError(f"expected {count_learnable(self)} values, got {vec.shape}")
        updates, pos = {}, 0
        for g in self.mode.groups:
            cur = getattr(self, g)
            updates[g] = vec[pos : pos + cur.size].reshape(cur.shape)
            pos += cur.size
        return dataclasses.replace(self, **updates)

    def allclose(self, other: "ModelState", atol: float = 0.0) -> bool:
        return all(
            np.allclose(getattr(self, n), getattr(other, n), rtol=0.0, atol=atol) for n in PARAM_ORDER
        )


def init_model(
    input_dim: int,
    hidden_width: int,
    feature_dim: int,
    n_classes: int,
    rng: np.random.Generator,
    mode: Mode | str = Mode.HEAD,
) -> ModelState:
    """He-initialized backbone, identity FiLM, zero head."""
    W1 = rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(hidden_width, input_dim))
    W2 = rng.normal(0.0, np.sqrt(2.0 / hidden_width), size=(feature_dim, hidden_width))
    return ModelState(
        W1=W1,
        b1=np.zeros(hidden_width),
        W2=W2,
        b2=np.zeros(feature_dim),
        gamma1=np.ones(hidden_width),
        beta1=np.zeros(hidden_width),
        gamma2=np.ones(feature_dim),
        beta2=np.zeros(feature_dim),
        head_W=np.zeros((feature_dim, n_classes)),
        head_b=np.zeros(n_classes),
        mode=Mode(mode),
    )


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Parameter counts of an architecture that is not instantiated here.

    ``backbone`` already contains the FiLM scale/offset parameters (they are
    the normalization layers' own affine terms), so ``All = backbone + head``.
    """

    backbone: int
    film: int
    feature_dim: int
    n_classes: int
    name: str = ""

    @property
    def head(self) -> int:
        return self.feature_dim * self.n_classes + self.n_classes


# Reference backbones (backbone count, FiLM count, feature dim).
REFERENCE_ARCHITECTURES = {
    "R-18": (11_200_000, 7808, 512),
    "R-50": (23_500_000, 11648, 2048),
    "VIT-B": (85_800_000, 38400, 768),
}


def reference_architecture(name: str, n_classes: int) -> ArchitectureDescriptor:
    backbone, film, d_b = REFERENCE_ARCHITECTURES[name]
    return ArchitectureDescriptor(backbone, film, d_b, n_classes, name)


def count_learnable(model: ModelState | ArchitectureDescriptor, mode: Mode | str | None = None) -> int:
    """Number of parameters fine-tuning may change in ``mode`` (default: the model's own)."""
    if isinstance(model, ArchitectureDescriptor):
        mode = Mode(mode or Mode.HEAD)
        if mode is Mode.HEAD:
            return model.head
        if mode is Mode.FILM:
            return model.film + model.head
        return model.backbone + model.head
    mode = Mode(mode) if mode is not None else model.mode
    return int(sum(getattr(model, g).size for g in mode.groups))


def _check_inputs(model: ModelState, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise DimensionError(f"input has dimension {x.shape[-1]}, model expects {model.input_dim}")
    return x


def _activations(model: ModelState, x: np.ndarray):
    z1 = x @ model.W1.T + model.b1
    u1 = film_apply(z1, model.gamma1, model.beta1)
    a1 = np.maximum(u1, 0.0)
    z2 = a1 @ model.W2.T + model.b2
    u2 = film_apply(z2, model.gamma2, model.beta2)
    feats = np.maximum(u2, 0.0)
    return z1, u1, a1, z2, u2, feats


def features(model: ModelState, x) -> np.ndarray:
    """Backbone output ``b(x)`` for one example or a batch."""
    x = _check_inputs(model, x)
    return _activations(model, x)[-1]


def plain_features(model: ModelState, x) -> np.ndarray:
    """Backbone output ignoring FiLM entirely (reference for the identity property)."""
    x = _check_inputs(model, x)
    a1 = np.maximum(x @ model.W1.T + model.b1, 0.0)
    return np.maximum(a1 @ model.W2.T + model.b2, 0.0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logits(model: ModelState, x) -> np.ndarray:
    return features(model, x) @ model.head_W + model.head_b


def forward(model: ModelState, x) -> np.ndarray:
    """Class probabilities ``p(y | x)``; accepts a single vector or an ``(n, d)`` batch."""
    return _softmax(logits(model, x))


def predict(model: ModelState, x) -> np.ndarray:
    return np.argmax(logits(model, x), axis=-1)


def accuracy(model: ModelState, x, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, x) == y))


def cross_entropy(model: ModelState, x, y) -> np.ndarray:
    """Per-example loss ``-log p(y | x)``."""
    x = _check_inputs(model, np.atleast_2d(x))
    y = np.atleast_1d(np.asarray(y))
    z = logits(model, x)
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return logz - z[np.arange(len(y)), y]


def per_example_grads(model: ModelState, x, y) -> np.ndarray:
    """Cross-entropy gradients w.r.t. the mode's trainable parameters, one row per example.

    Returns an array of shape ``(n, count_learnable(model))`` laid out like
    ``model.trainable_vector()``.
    """
    x = _check_inputs(model, np.atleast_2d(x))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = x.shape[0]
    if y.shape != (n,):
        raise DimensionError(f"{n} inputs but {y.shape} labels")
    if n and (y.min() < 0 or y.max() >= model.n_classes):
        raise DimensionError(f"labels must lie in [0, {model.n_classes})")

    z1, u1, a1, z2, u2, feats = _activations(model, x)
    p = _softmax(feats @ model.head_W + model.head_b)
    dlogits = p
    dlogits[np.arange(n), y] -= 1.0

    grads: dict[str, np.ndarray] = {
        "head_W": feats[:, :, None] * dlogits[:, None, :],
        "head_b": dlogits,
    }
    groups = model.mode.groups
    if "gamma2" in groups:
        du2 = (dlogits @ model.head_W.T) * (u2 > 0)
        grads["gamma2"] = du2 * z2
        grads["beta2"] = du2
        dz2 = du2 * model.gamma2
        du1 = (dz2 @ model.W2) * (u1 > 0)
        grads["gamma1"] = du1 * z1
        grads["beta1"] = du1
        if "W1" in groups:
            dz1 = du1 * model.gamma1
            grads["W2"] = dz2[:, :, None] * a1[:, None, :]
            grads["b2"] = dz2
            grads["W1"] = dz1[:, :, None] * x[:, None, :]
            grads["b1"] = dz1
    return np.concatenate([grads[g].reshape(n, -1) for g in groups], axis=1)


def per_example_grad(model: ModelState, x, y: int) -> np.ndarray:
    """Gradient for a single example (flat, trainable subset only)."""
    return per_example_grads(model, np.atleast_2d(x), [y])[0]


def mean_grad(model: ModelState, x, y) -> np.ndarray:
    return per_example_grads(model, x, y).mean(axis=0)
