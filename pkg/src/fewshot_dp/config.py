"""Workbench configuration: YAML in, validated and fully resolved model out.

Unknown keys are rejected at every level. Structural problems are reported
by the schema; cross-field checks (batch size against ``|D|``, values against
the hyperparameter ranges, ...) run afterwards and every violation is listed
in the raised ``ConfigError``.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from fewshot_dp.errors import ConfigError
from fewshot_dp.fed import Distribution, ServerOptimizer
from fewshot_dp.mia import VarianceMode
from fewshot_dp.model import Mode
from fewshot_dp.protocol import TunerKind

Kind = Literal["account", "train", "sweep", "attack", "fedsim", "analyze"]
# execution settings that cannot change any result byte
EXECUTION_KEYS = ("out", "threads")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=True)


class TaskSection(_Strict):
    seed: int = 0
    n_classes: int = Field(5, ge=2)
    dim: int = Field(16, ge=2)
    shift: float = Field(0.0, ge=0.0, le=1.0)
    signal_dim: int = Field(4, ge=1)
    separation: float = Field(3.0, gt=0)
    noise: float = Field(1.0, gt=0)
    hidden_width: int = Field(64, ge=1)
    feature_dim: int = Field(8, ge=1)
    pretrain_per_class: int = Field(200, ge=1)
    pretrain_steps: int = Field(300, ge=0)
    pretrain_lr: float = Field(0.01, gt=0)
    weight_decay: float = Field(0.0, ge=0)


class RangesSection(_Strict):
    epochs: tuple[int, int] = (1, 200)
    lr: tuple[float, float] = (1e-7, 1e-2)
    batch: tuple[int, Optional[int]] = (10, None)
    clip: tuple[float, float] = (0.2, 10.0)


class TrainSection(_Strict):
    shots: int = Field(5, ge=1)
    epochs: int = Field(50, ge=0)
    lr: float = Field(1e-2, gt=0)
    batch_size: int = Field(10, ge=1)
    clip: float = Field(1.0, gt=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    test_per_class: int = Field(200, ge=1)


class SweepSection(_Strict):
    shots: list[int] = Field(default_factory=lambda: [5, 10, 25], min_length=1)
    epsilons: list[Optional[float]] = Field(default_factory=lambda: [None, 8.0, 2.0, 1.0], min_length=1)
    modes: list[Mode] = Field(default_factory=lambda: [Mode.HEAD, Mode.FILM], min_length=1)
    n_seeds: int = Field(3, ge=1)
    tuner: TunerKind = TunerKind.RANDOM
    budget: int = Field(20, ge=1)
    test_per_class: int = Field(200, ge=1)


class AttackSection(_Strict):
    shots: int = Field(5, ge=1)
    shadows: int = Field(32, ge=8)
    variance: VarianceMode = VarianceMode.PER_EXAMPLE


class FedSection(_Strict):
    rounds: int = Field(50, ge=0)
    cohort: int = Field(10, ge=1)
    n_clients: int = Field(100, ge=1)
    examples_per_client: int = Field(16, ge=1)
    accounting_cohort: Optional[int] = Field(None, ge=1)
    server_optimizer: ServerOptimizer = ServerOptimizer.FEDADAM
    server_lr: float = Field(0.05, gt=0)
    client_lr: float = Field(0.05, gt=0)
    local_epochs: int = Field(2, ge=0)
    local_batch: int = Field(16, ge=1)
    clip: float = Field(1.0, gt=0)
    adaptive_clip: bool = True
    clip_quantile: float = Field(0.1, gt=0, lt=1)
    clip_lr: float = Field(0.2, gt=0)
    count_noise: Optional[float] = Field(None, ge=0)
    distribution: Distribution = Distribution.IID
    concentration: float = Field(0.5, gt=0)
    cap: Optional[int] = Field(512, ge=1)
    test_per_class: int = Field(200, ge=1)


class TdInput(_Strict):
    acc_all: float
    acc_head: float


class MultiplierInput(_Strict):
    np_curve: list[tuple[float, float]] = Field(min_length=1)
    dp_curve: list[tuple[float, float]] = Field(min_length=1)
    s_ref: float


class RegimeInput(_Strict):
    train: float = Field(ge=0, le=1)
    test: float = Field(ge=0, le=1)


class AnalyzeSection(_Strict):
    sweep_csv: Optional[str] = None
    s_refs: list[float] = Field(default_factory=lambda: [5.0, 10.0])
    td: list[TdInput] = Field(default_factory=list)
    multipliers: list[MultiplierInput] = Field(default_factory=list)
    regimes: list[RegimeInput] = Field(default_factory=list)


class WorkbenchConfig(_Strict):
    kind: Kind
    seed: int = Field(0, ge=0, lt=2**64)
    out: str = "results"
    threads: int = Field(1, ge=1)
    mode: Mode = Mode.FILM
    accountant: Literal["rdp", "prv"] = "rdp"
    # privacy: either a target (epsilon [, delta]) or an explicit mechanism
    epsilon: Optional[float] = Field(None, gt=0)
    delta: Optional[float] = Field(None, gt=0, lt=1)
    sigma: Optional[float] = Field(None, gt=0)
    q: Optional[float] = Field(None, ge=0, le=1)
    steps: Optional[int] = Field(None, ge=0)
    extra_deltas: list[float] = Field(default_factory=list)
    task: TaskSection = Field(default_factory=TaskSection)
    ranges: RangesSection = Field(default_factory=RangesSection)
    train: TrainSection = Field(default_factory=TrainSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    fed: FedSection = Field(default_factory=FedSection)
    analyze: AnalyzeSection = Field(default_factory=AnalyzeSection)

    def resolved(self, include_execution: bool = True) -> dict:
        """Plain, fully defaulted dict (JSON types only)."""
        d = self.model_dump(mode="json")
        if not include_execution:
            for k in EXECUTION_KEYS:
                d.pop(k)
        return d

    def to_yaml(self, include_execution: bool = True) -> str:
        return yaml.safe_dump(self.resolved(include_execution), sort_keys=True, default_flow_style=False)


def _semantic_violations(cfg: WorkbenchConfig) -> list[str]:
    out = []
    r = cfg.ranges
    for name, (lo_lim, hi_lim) in {"epochs": (1, 200), "lr": (1e-7, 1e-2), "clip": (0.2, 10.0)}.items():
        lo, hi = getattr(r, name)
        if not lo_lim <= lo <= hi <= hi_lim:
            out.append(f"ranges.{name}: need {lo_lim} <= low <= high <= {hi_lim}, got [{lo}, {hi}]")
    if r.batch[0] < 1 or (r.batch[1] is not None and r.batch[1] < r.batch[0]):
        out.append(f"ranges.batch: need 1 <= low <= high, got [{r.batch[0]}, {r.batch[1]}]")

    if 2 * cfg.task.signal_dim > cfg.task.dim:
        out.append(f"task.signal_dim: twice {cfg.task.signal_dim} exceeds task.dim={cfg.task.dim}")

    if cfg.kind in ("train", "attack"):
        sec = cfg.train
        n = cfg.task.n_classes * (sec.shots if cfg.kind == "train" else cfg.attack.shots)
        if sec.batch_size > n:
            out.append(f"train.batch_size: {sec.batch_size} exceeds |D|={n}")
        if not r.clip[0] <= sec.clip <= r.clip[1]:
            out.append(f"train.clip: {sec.clip} outside ranges.clip [{r.clip[0]}, {r.clip[1]}]")
        if not r.lr[0] <= sec.lr <= r.lr[1]:
            out.append(f"train.lr: {sec.lr} outside ranges.lr [{r.lr[0]}, {r.lr[1]}]")
        if sec.epochs > r.epochs[1]:
            out.append(f"train.epochs: {sec.epochs} exceeds ranges.epochs upper bound {r.epochs[1]}")

    if cfg.kind == "account":
        for name in ("q", "steps"):
            if getattr(cfg, name) is None:
                out.append(f"{name}: required for kind 'account'")
        if cfg.delta is None:
            out.append("delta: required for kind 'account'")
        if cfg.sigma is None and cfg.epsilon is None:
            out.append("sigma: give sigma, or epsilon to calibrate it")
        for i, d in enumerate(cfg.extra_deltas):
            if not 0 < d < 1:
                out.append(f"extra_deltas[{i}]: {d} not in (0, 1)")

    if cfg.kind == "sweep":
        for i, s in enumerate(cfg.sweep.shots):
            if s < 1:
                out.append(f"sweep.shots[{i}]: must be >= 1, got {s}")
        for i, e in enumerate(cfg.sweep.epsilons):
            if e is not None and not e > 0:
                out.append(f"sweep.epsilons[{i}]: must be positive or null, got {e}")

    if cfg.kind == "fedsim":
        f = cfg.fed
        if f.cohort > f.n_clients:
            out.append(f"fed.cohort: {f.cohort} exceeds fed.n_clients={f.n_clients}")

    if cfg.kind == "analyze":
        a = cfg.analyze
        if not (a.sweep_csv or a.td or a.multipliers or a.regimes):
            out.append("analyze: nothing to analyze; give sweep_csv, td, multipliers or regimes")
        for i, t in enumerate(a.td):
            if not t.acc_all > 0:
                out.append(f"analyze.td[{i}].acc_all: must be positive, got {t.acc_all}")
    return out


def _format_pydantic(err: ValidationError) -> list[str]:
    msgs = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msgs.append(f"{loc}: {e['msg']}")
    return msgs


def _without(data: dict, locs: list[tuple]) -> dict:
    """Copy of ``data`` with the entries at the given error locations removed."""
    out = copy.deepcopy(data)
    for loc in locs:
        node = out
        for part in loc[:-1]:
            node = node.get(part) if isinstance(node, dict) else None
            if node is None:
                break
        if isinstance(node, dict):
            node.pop(loc[-1], None)
    return out


def _schema_then_semantic(data: dict) -> list[str]:
    """Schema violations plus cross-field violations of the schema-valid remainder."""
    try:
        cfg = WorkbenchConfig.model_validate(data)
    except ValidationError as err:
        found = _format_pydantic(err)
        locs = [tuple(e["loc"]) for e in err.errors() if e["loc"]]
        bad = {".".join(map(str, loc)) for loc in locs}
        try:
            rest = WorkbenchConfig.model_validate(_without(data, locs))
        except ValidationError:
            return found
        # skip checks on fields that were defaulted because their own value was invalid
        return found + [v for v in _semantic_violations(rest) if v.split(":")[0] not in bad]
    return _semantic_violations(cfg)


def validate_config(data: dict) -> WorkbenchConfig:
    """Schema plus cross-field validation of a raw config mapping; every violation is reported."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", ["<root>: expected a mapping"])
    v = _schema_then_semantic(data)
    if v:
        raise ConfigError(f"{len(v)} config violation(s)", v)
    return WorkbenchConfig.model_validate(data)


def load_config(path: str | Path, overrides: dict | None = None, defaults: dict | None = None) -> WorkbenchConfig:
    """Read, merge CLI overrides (and fallbacks for absent keys) into, and validate a YAML config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}", [f"{path}: unreadable"]) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse config {path}", [f"{path}: {err}"]) from None
    if data is None:
        data = {}
    if isinstance(data, dict):
        data = {**(defaults or {}), **data, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    return validate_config(data)


def parse_config_text(text: str) -> WorkbenchConfig:
    return validate_config(yaml.safe_load(text))
