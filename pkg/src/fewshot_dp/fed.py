"""Cross-device federated fine-tuning with user-level differential privacy.

Each round samples a cohort of clients uniformly without replacement. Every
cohort member fine-tunes the current global model locally with plain SGD and
returns its parameter delta (trainable coordinates only). The server clips
each delta to the current clip norm, adds Gaussian noise to the sum, averages
over the cohort and applies the result with FedAvg or FedADAM. The clip norm
tracks a target quantile of the delta norms with a geometric update driven
by the (noised) fraction of unclipped deltas.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from fewshot_dp import accountant as acct
from fewshot_dp.dp_optim import _stable_sum, clip_grad
from fewshot_dp.errors import ConfigError, ShardError
from fewshot_dp.model import (
    PARAM_ORDER, ArchitectureDescriptor, Mode, ModelState, accuracy, count_learnable, per_example_grads,
)
from fewshot_dp.rng import stream
from fewshot_dp.tasks import SyntheticTaskSpec, make_task, pretrained_model

# FedADAM defaults
SERVER_BETA1 = 0.9
SERVER_BETA2 = 0.99
SERVER_EPS = 1e-3


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


class Distribution(str, Enum):
    IID = "iid"
    HETEROGENEOUS = "heterogeneous"


def shard_clients(
    x: np.ndarray,
    y: np.ndarray,
    n_clients: int,
    rng: np.random.Generator,
    distribution: Distribution | str = Distribution.IID,
    concentration: float = 0.5,
    cap: int | None = None,
) -> list[ClientShard]:
    """Split ``(x, y)`` into ``n_clients`` disjoint, non-empty shards.

    ``iid`` deals a random permutation out evenly. ``heterogeneous`` splits
    every class among the clients with Dirichlet(``concentration``)
    proportions, so small concentrations give each client a few dominant
    labels. Shards longer than ``cap`` are truncated.
    """
    y = np.asarray(y)
    n = len(y)
    if n_clients < 1:
        raise ShardError(f"need at least one client, got {n_clients}")
    if n_clients > n:
        raise ShardError(f"{n_clients} clients but only {n} examples")
    distribution = Distribution(distribution)
    if distribution is Distribution.IID:
        parts = np.array_split(rng.permutation(n), n_clients)
    else:
        buckets: list[list[int]] = [[] for _ in range(n_clients)]
        for c in np.unique(y):
            idx = rng.permutation(np.flatnonzero(y == c))
            props = rng.dirichlet(np.full(n_clients, concentration))
            cuts = np.round(np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, chunk in enumerate(np.split(idx, cuts)):
                buckets[k].extend(chunk.tolist())
        # hand empty clients one example from the currently largest shard
        for k in range(n_clients):
            if not buckets[k]:
                donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
                buckets[k].append(buckets[donor].pop())
        parts = [rng.permutation(np.array(b, dtype=np.int64)) for b in buckets]
    shards = []
    for k, p in enumerate(parts):
        p = np.sort(p[:cap] if cap is not None else p)
        shards.append(ClientShard(k, x[p], y[p], p))
    return shards


def label_tv_distance(shards: list[ClientShard], n_classes: int) -> float:
    """Mean total-variation distance between client and global label histograms."""
    all_y = np.concatenate([s.y for s in shards])
    glob = np.bincount(all_y, minlength=n_classes) / len(all_y)
    tv = [0.5 * np.abs(np.bincount(s.y, minlength=n_classes) / len(s) - glob).sum() for s in shards]
    return float(np.mean(tv))


def local_update(
    client: ClientShard,
    model: ModelState,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Local SGD from ``model``; returns the change of the trainable parameters."""
    if len(client) == 0:
        raise ShardError(f"client {client.client_id} has no data")
    start = model.trainable_vector()
    params = start.copy()
    n = len(client)
    b = min(batch_size, n)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, b):
            idx = perm[s : s + b]
            g = per_example_grads(model, client.x[idx], client.y[idx])
            params = params - lr * _stable_sum(g, g.shape[1]) / len(idx)
            model = model.with_trainable(params)
    return params - start


def full_delta(model: ModelState, delta: np.ndarray) -> dict[str, np.ndarray]:
    """Delta spread over every parameter array; frozen arrays get zeros."""
    out = {}
    pos = 0
    trainable = set(model.mode.groups)
    for name in model.mode.groups:
        size = getattr(model, name).size
        out[name] = delta[pos : pos + size].reshape(getattr(model, name).shape)
        pos += size
    for name in PARAM_ORDER:
        if name not in trainable:
            out[name] = np.zeros_like(getattr(model, name))
    return out


@dataclass(frozen=True)
class AdaptiveClipState:
    """Clip norm ``B`` following a target quantile of client delta norms.

    ``B <- B * exp(-lr * (b - quantile))`` where ``b`` is the fraction of
    deltas no longer than ``B``, optionally with Gaussian noise of std
    ``count_noise`` added to the unclipped count.
    """

    clip: float
    quantile: float = 0.1
    lr: float = 0.2
    count_noise: float = 0.0
    adaptive: bool = True

    def __post_init__(self):
        if not self.clip > 0:
            raise ConfigError(f"clip norm must be positive, got {self.clip}")
        if not 0.0 < self.quantile < 1.0:
            raise ConfigError(f"quantile must lie in (0, 1), got {self.quantile}")

    def updated(self, unclipped: int, cohort: int, rng: np.random.Generator | None = None) -> "AdaptiveClipState":
        if not self.adaptive:
            return self
        count = float(unclipped)
        if rng is not None and self.count_noise > 0:
            count += rng.normal(0.0, self.count_noise)
        frac = count / cohort
        return dataclasses.replace(self, clip=self.clip * math.exp(-self.lr * (frac - self.quantile)))


class ServerOptimizer(str, Enum):
    FEDAVG = "fedavg"
    FEDADAM = "fedadam"


@dataclass(frozen=True)
class PrivacyLedger:
    sigma: float | None
    q: float
    q_executed: float
    rounds: int
    delta: float | None


@dataclass(frozen=True)
class ServerState:
    model: ModelState
    optimizer: ServerOptimizer = ServerOptimizer.FEDAVG
    lr: float = 1.0
    clip_state: AdaptiveClipState | None = None
    round: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    beta1: float = SERVER_BETA1
    beta2: float = SERVER_BETA2
    eps: float = SERVER_EPS
    ledger: PrivacyLedger | None = None

    def __post_init__(self):
        object.__setattr__(self, "optimizer", ServerOptimizer(self.optimizer))


def aggregate_round(
    server: ServerState,
    deltas: list[np.ndarray],
    dp: bool = False,
    sigma: float | None = None,
    rng: np.random.Generator | None = None,
) -> ServerState:
    """Clip, (optionally) noise, average and apply one cohort's deltas.

    Without a clip state deltas are used unclipped (only allowed with ``dp``
    off). The clip state is updated from the pre-round clip norm.
    """
    if not deltas:
        raise ConfigError("cohort is empty")
    if dp and sigma is None:
        raise ConfigError("private aggregation needs a calibrated sigma")
    if dp and server.clip_state is None:
        raise ConfigError("private aggregation needs a clip norm")
    if dp and rng is None:
        raise ConfigError("private aggregation needs a random generator")
    d = np.stack([np.asarray(x, dtype=np.float64) for x in deltas])
    m, width = d.shape
    cs = server.clip_state
    if cs is not None:
        norms = np.linalg.norm(d, axis=1)
        unclipped = int(np.sum(norms <= cs.clip))
        d = clip_grad(d, cs.clip)
    total = _stable_sum(d, width)
    if dp:
        total = total + rng.normal(0.0, sigma * cs.clip, size=width)
    agg = total / m

    params = server.model.trainable_vector()
    mom, vel = server.m, server.v
    if server.optimizer is ServerOptimizer.FEDAVG:
        params = params + server.lr * agg
    else:
        g = -agg
        mom = np.zeros(width) if mom is None else mom
        vel = np.zeros(width) if vel is None else vel
        mom = server.beta1 * mom + (1 - server.beta1) * g
        vel = server.beta2 * vel + (1 - server.beta2) * g * g
        params = params - server.lr * mom / (np.sqrt(vel) + server.eps)
    if cs is not None:
        cs = cs.updated(unclipped, m, rng if dp else None)
    return dataclasses.replace(
        server, model=server.model.with_trainable(params), clip_state=cs, round=server.round + 1, m=mom, v=vel
    )


def comm_cost(model: ModelState | ArchitectureDescriptor, mode: Mode | str | None = None) -> int:
    """Parameters exchanged per client-server interaction (the trainable set)."""
    return count_learnable(model, mode)


def update_noise_multiplier(sigma: float, count_noise: float) -> float:
    """Noise multiplier left for the deltas once the clip-count query takes its share.

    The count query has sensitivity 1/2 after centring, so the two Gaussian
    queries compose to the overall ``sigma`` when
    ``sigma_delta^-2 + (2 * count_noise)^-2 = sigma^-2``.
    """
    if count_noise <= 0:
        return sigma
    rest = sigma**-2 - (2.0 * count_noise) ** -2
    if rest <= 0:
        raise ConfigError(
            f"clip-count noise {count_noise} too small for total noise multiplier {sigma}; raise it"
        )
    return rest**-0.5


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 50
    cohort: int = 10
    n_clients: int = 100
    examples_per_client: int = 16
    epsilon: float | None = None
    delta: float | None = None
    accounting_cohort: int | None = None
    server_optimizer: ServerOptimizer = ServerOptimizer.FEDADAM
    server_lr: float = 0.05
    client_lr: float = 0.05
    local_epochs: int = 2
    local_batch: int = 16
    mode: Mode = Mode.FILM
    clip: float = 1.0
    adaptive_clip: bool = True
    clip_quantile: float = 0.1
    clip_lr: float = 0.2
    count_noise: float | None = None
    distribution: Distribution = Distribution.IID
    concentration: float = 0.5
    cap: int | None = 512
    test_per_class: int = 200
    accountant: str = "rdp"

    def __post_init__(self):
        for name, typ in (("server_optimizer", ServerOptimizer), ("mode", Mode), ("distribution", Distribution)):
            object.__setattr__(self, name, typ(getattr(self, name)))
        problems = []
        if self.rounds < 0:
            problems.append(f"rounds must be >= 0, got {self.rounds}")
        if not 1 <= self.cohort <= self.n_clients:
            problems.append(f"cohort must lie in [1, n_clients={self.n_clients}], got {self.cohort}")
        if self.accounting_cohort is not None and not 1 <= self.accounting_cohort:
            problems.append(f"accounting_cohort must be >= 1, got {self.accounting_cohort}")
        if self.epsilon is not None and not self.epsilon > 0:
            problems.append(f"epsilon must be positive, got {self.epsilon}")
        if problems:
            raise ConfigError("invalid federated configuration", problems)

    @property
    def resolved_delta(self) -> float:
        return self.delta if self.delta is not None else self.n_clients ** -1.1

    @property
    def accounting_q(self) -> float:
        return min(1.0, (self.accounting_cohort or self.cohort) / self.n_clients)

    @property
    def resolved_count_noise(self) -> float:
        return self.count_noise if self.count_noise is not None else self.cohort / 20.0


@dataclass(frozen=True)
class FedResult:
    server: ServerState
    log: tuple[dict, ...]
    privacy: dict
    accuracy: float


def fed_train(spec: SyntheticTaskSpec, cfg: FedConfig, seed: int, threads: int = 1) -> FedResult:
    """Run ``cfg.rounds`` rounds on clients drawn from the downstream task of ``spec``."""
    task = make_task(spec)
    n_total = cfg.n_clients * cfg.examples_per_client
    x, y = task.sample(math.ceil(n_total / spec.n_classes), stream(seed, "fed", "data"))
    x, y = x[:n_total], y[:n_total]
    x_te, y_te = task.sample(cfg.test_per_class, stream(seed, "fed", "test"))
    shards = shard_clients(x, y, cfg.n_clients, stream(seed, "fed", "shards"), cfg.distribution,
                           cfg.concentration, cfg.cap)

    dp = cfg.epsilon is not None
    delta = cfg.resolved_delta
    sigma = update_sigma = None
    if dp:
        sigma = acct.calibrate_sigma(acct.PrivacyBudget(cfg.epsilon, delta), cfg.accounting_q,
                                     max(cfg.rounds, 1), cfg.accountant)
        update_sigma = update_noise_multiplier(sigma, cfg.resolved_count_noise) if cfg.adaptive_clip else sigma
    # non-private runs aggregate raw deltas, like non-private centralized training
    clip_state = AdaptiveClipState(
        cfg.clip, cfg.clip_quantile, cfg.clip_lr, count_noise=cfg.resolved_count_noise, adaptive=cfg.adaptive_clip
    ) if dp else None
    ledger = PrivacyLedger(sigma, cfg.accounting_q, cfg.cohort / cfg.n_clients, cfg.rounds, delta if dp else None)
    server = ServerState(
        model=pretrained_model(spec, cfg.mode), optimizer=cfg.server_optimizer, lr=cfg.server_lr,
        clip_state=clip_state, ledger=ledger,
    )
    payload = comm_cost(server.model)

    log = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for r in range(cfg.rounds):
            cohort = np.sort(stream(seed, "fed", "cohort", r).choice(cfg.n_clients, cfg.cohort, replace=False))
            model = server.model

            def work(cid, model=model, r=r):
                return local_update(shards[cid], model, cfg.local_epochs, cfg.local_batch, cfg.client_lr,
                                    stream(seed, "fed", "client", r, int(cid)))

            deltas = list(pool.map(work, cohort)) if pool else [work(c) for c in cohort]
            clip_used = server.clip_state.clip if server.clip_state else None
            server = aggregate_round(server, deltas, dp, update_sigma, stream(seed, "fed", "server", r))
            log.append({
                "round": r + 1,
                "accuracy": accuracy(server.model, x_te, y_te),
                "clip_B": clip_used,
                "payload_params": payload,
            })
    finally:
        if pool:
            pool.shutdown()

    privacy = {"dp": dp, "delta": delta if dp else None, "sigma": sigma, "q": ledger.q,
               "q_executed": ledger.q_executed, "rounds": cfg.rounds, "epsilon": None}
    if dp:
        privacy["epsilon"] = acct.epsilon(acct.MechanismParams(sigma, ledger.q, cfg.rounds), delta, cfg.accountant)
    final = log[-1]["accuracy"] if log else accuracy(server.model, x_te, y_te)
    return FedResult(server, tuple(log), privacy, final)
