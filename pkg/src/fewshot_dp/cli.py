"""Command-line entry point: ``fewshot-dp <subcommand> --config FILE [--seed N] [--out DIR] [--threads N]``.

Each subcommand loads and validates the config, runs one experiment and
writes ``<kind>_seed<seed>.csv``, ``.json``, ``_config.yaml`` (and an SVG
where a plot applies) into the output directory. Failures exit nonzero and
print a JSON object ``{"error", "message", "violations"}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from fewshot_dp import accountant as acct
from fewshot_dp import dp_optim, mia, protocol
from fewshot_dp.config import WorkbenchConfig, load_config
from fewshot_dp.dp_optim import DpOptimConfig
from fewshot_dp.errors import ConfigError, WorkbenchError
from fewshot_dp.fed import FedConfig, fed_train
from fewshot_dp.model import Mode, accuracy
from fewshot_dp.persist import persist_results, read_csv, run_stem
from fewshot_dp.plot import Series, emit_plot
from fewshot_dp.rng import stream
from fewshot_dp.tasks import SyntheticTaskSpec, pretrained_model, sample_dataset

KINDS = ("account", "train", "sweep", "attack", "fedsim", "analyze")


def task_spec(cfg: WorkbenchConfig) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(**cfg.task.model_dump())


# -- runners: each returns (rows, columns, summary, plot) ---------------------


def run_account(cfg: WorkbenchConfig, threads: int):
    sigma = cfg.sigma
    calibrated = sigma is None
    if calibrated:
        sigma = acct.calibrate_sigma(acct.PrivacyBudget(cfg.epsilon, cfg.delta), cfg.q, cfg.steps, cfg.accountant)
    params = acct.MechanismParams(sigma, cfg.q, cfg.steps)
    rows = []
    for d in [cfg.delta, *cfg.extra_deltas]:
        rows.append({
            "accountant": cfg.accountant, "sigma": sigma, "q": cfg.q, "steps": cfg.steps, "delta": d,
            "epsilon": acct.convert_delta(params, cfg.delta, d, cfg.accountant),
        })
    summary = {"calibrated": calibrated, "target_epsilon": cfg.epsilon, "rows": rows}
    return rows, ["accountant", "sigma", "q", "steps", "delta", "epsilon"], summary, None


def run_train(cfg: WorkbenchConfig, threads: int):
    spec = task_spec(cfg)
    t = cfg.train
    data = sample_dataset(spec, t.shots, stream(cfg.seed, "train", "data"), t.test_per_class)
    x, y = data.xy("train")
    n = len(y)
    private = cfg.epsilon is not None
    delta = (cfg.delta if cfg.delta is not None else 1.0 / n) if private else None
    sigma = dp_optim.noise_for_budget(cfg.epsilon, delta, n, t.batch_size, t.epochs, cfg.accountant) if private else None
    opt = DpOptimConfig(clip=t.clip, sigma=sigma, batch_size=t.batch_size, lr=t.lr, optimizer=t.optimizer,
                        epochs=t.epochs)
    res = dp_optim.train(x, y, pretrained_model(spec, cfg.mode), opt, stream(cfg.seed, "train", "fit"), private)
    x_te, y_te = data.xy("test")
    row = {
        "shots": t.shots, "mode": Mode(cfg.mode).value, "epsilon": cfg.epsilon, "delta": delta, "sigma": sigma,
        "steps": res.steps, "sampling_rate": res.sampling_rate,
        "train_accuracy": accuracy(res.model, x, y), "test_accuracy": accuracy(res.model, x_te, y_te),
    }
    rep = protocol.regime_report(row["train_accuracy"], row["test_accuracy"])
    summary = {**row, "gap": rep.gap, "regime": rep.regime}
    return [row], list(row), summary, None


def _protocol_config(cfg: WorkbenchConfig) -> protocol.ProtocolConfig:
    r = cfg.ranges
    return protocol.ProtocolConfig(
        ranges=protocol.HyperRanges(tuple(r.epochs), tuple(r.lr), tuple(r.batch), tuple(r.clip)),
        tuner=cfg.sweep.tuner,
        budget=cfg.sweep.budget,
        accountant=cfg.accountant,
        delta=cfg.delta,
        test_per_class=cfg.sweep.test_per_class,
    )


def _eps_label(e) -> str:
    return "inf" if e is None else f"{e:g}"


def run_sweep(cfg: WorkbenchConfig, threads: int):
    s = cfg.sweep
    seeds = [cfg.seed + k for k in range(s.n_seeds)]
    res = protocol.run_sweep(task_spec(cfg), s.shots, s.epsilons, s.modes, seeds, _protocol_config(cfg), threads)
    rows = [r.row() for r in res.runs]
    cells = []
    for key in res.cells():
        cells.append({
            "shots": key.shots, "epsilon": key.epsilon, "mode": key.mode.value, "seeds": len(res.cell_runs(key)),
            "median_test_accuracy": res.median(key), "median_train_accuracy": res.median(key, "train_accuracy"),
        })
    series = []
    for m in s.modes:
        for e in s.epsilons:
            pts = res.curve(e, m)
            if len(pts) >= 2:
                series.append(Series(f"{Mode(m).value} eps={_eps_label(e)}", [p[0] for p in pts], [p[1] for p in pts]))
    plot = dict(series=series, title="Median test accuracy", xlabel="shots per class", ylabel="accuracy") if series else None
    return rows, None, {"cells": cells, "seeds": seeds}, plot


def run_attack(cfg: WorkbenchConfig, threads: int):
    t, a = cfg.train, cfg.attack
    opt = DpOptimConfig(clip=t.clip, batch_size=t.batch_size, lr=t.lr, optimizer=t.optimizer, epochs=t.epochs)
    tc = mia.TrainerConfig(mode=cfg.mode, epsilon=cfg.epsilon, delta=cfg.delta, optim=opt, accountant=cfg.accountant)
    size = cfg.task.n_classes * a.shots
    pop = mia.build_population(task_spec(cfg), size, a.shadows, tc, cfg.seed, threads)
    rec = mia.attack_all(pop, a.variance)
    rows = [
        {"target": i, "example": j, "score": float(rec.scores[i, j]), "member": bool(rec.membership[i, j])}
        for i in range(rec.scores.shape[0]) for j in range(rec.scores.shape[1])
    ]
    summary = {**rec.metrics.summary(), "models": pop.n_models, "pool_size": int(pop.pool_y.size),
               "epsilon": cfg.epsilon, "sigmas": list(pop.sigmas)}
    tpr = rec.metrics.tpr_at_fpr[1e-3]
    plot = dict(
        series=[Series(f"LiRA (TPR {tpr:.3f} at FPR 0.001)", rec.metrics.fpr, rec.metrics.tpr)],
        title="Accumulated ROC", xlabel="false positive rate", ylabel="true positive rate", loglog=True,
        diagonal=True,
    )
    return rows, ["target", "example", "score", "member"], summary, plot


def run_fedsim(cfg: WorkbenchConfig, threads: int):
    fc = FedConfig(**cfg.fed.model_dump(), epsilon=cfg.epsilon, delta=cfg.delta, mode=cfg.mode,
                   accountant=cfg.accountant)
    res = fed_train(task_spec(cfg), fc, cfg.seed, threads)
    summary = {"final_accuracy": res.accuracy, "privacy": res.privacy, "rounds": res.server.round,
               "payload_params": res.log[0]["payload_params"] if res.log else None}
    plot = None
    if len(res.log) >= 2:
        plot = dict(series=[Series("accuracy", [r["round"] for r in res.log], [r["accuracy"] for r in res.log])],
                    title="Federated test accuracy", xlabel="round", ylabel="accuracy")
    return list(res.log), ["round", "accuracy", "clip_B", "payload_params"], summary, plot


def _sweep_medians(path: str):
    rows = read_csv(path)
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        eps = None if r["epsilon"] in ("", "inf") else float(r["epsilon"])
        groups.setdefault((int(r["shots"]), eps, r["mode"]), []).append(r)
    med = {}
    for k, rs in groups.items():
        med[k] = (float(np.median([float(r["test_accuracy"]) for r in rs])),
                  float(np.median([float(r["train_accuracy"]) for r in rs])))
    return med


def run_analyze(cfg: WorkbenchConfig, threads: int):
    a = cfg.analyze
    rows = []

    def add(analysis, subject, value, label="", flag=""):
        rows.append({"analysis": analysis, "subject": subject, "value": value, "label": label, "flag": flag})

    for i, t in enumerate(a.td):
        td = protocol.transfer_difficulty(t.acc_all, t.acc_head)
        add("transfer_difficulty", f"input {i}", td.score, td.bucket)
    for i, m in enumerate(a.multipliers):
        sm = protocol.shot_multiplier(m.np_curve, m.dp_curve, m.s_ref)
        add("shot_multiplier", f"input {i} s_ref={m.s_ref:g}", sm.multiplier, "",
            "exceeds_grid" if sm.exceeds_grid else ("clamped" if sm.clamped else ""))
    for i, r in enumerate(a.regimes):
        rep = protocol.regime_report(r.train, r.test)
        add("regime", f"input {i}", rep.gap, rep.regime)

    if a.sweep_csv:
        med = _sweep_medians(a.sweep_csv)
        keys = sorted(med, key=lambda k: (k[2], k[1] is not None, -(k[1] or 0), k[0]))
        for s, e, m in keys:
            test, train = med[(s, e, m)]
            rep = protocol.regime_report(train, test)
            add("regime", f"S={s} eps={_eps_label(e)} mode={m}", rep.gap, rep.regime)
        for s, e in sorted({(k[0], k[1]) for k in med}, key=lambda k: (k[0], k[1] is not None, -(k[1] or 0))):
            if (s, e, "all") in med and (s, e, "head") in med:
                td = protocol.transfer_difficulty(100 * med[(s, e, "all")][0], 100 * med[(s, e, "head")][0])
                add("transfer_difficulty", f"S={s} eps={_eps_label(e)}", td.score, td.bucket)
        for m in sorted({k[2] for k in med}):
            np_curve = sorted((k[0], v[0]) for k, v in med.items() if k[2] == m and k[1] is None)
            for e in sorted({k[1] for k in med if k[1] is not None}, reverse=True):
                dp_curve = sorted((k[0], v[0]) for k, v in med.items() if k[2] == m and k[1] == e)
                for s_ref in a.s_refs:
                    if not np_curve or not dp_curve or s_ref not in [p[0] for p in np_curve]:
                        continue
                    sm = protocol.shot_multiplier(np_curve, dp_curve, s_ref)
                    add("shot_multiplier", f"mode={m} eps={_eps_label(e)} s_ref={s_ref:g}", sm.multiplier, "",
                        "exceeds_grid" if sm.exceeds_grid else ("clamped" if sm.clamped else ""))
    return rows, ["analysis", "subject", "value", "label", "flag"], {"results": rows}, None


RUNNERS = {
    "account": run_account, "train": run_train, "sweep": run_sweep,
    "attack": run_attack, "fedsim": run_fedsim, "analyze": run_analyze,
}


def execute(cfg: WorkbenchConfig, out_dir: str | Path, threads: int = 1) -> list[Path]:
    """Run ``cfg`` and write its files; returns the written paths."""
    rows, columns, summary, plot = RUNNERS[cfg.kind](cfg, threads)
    summary = {"kind": cfg.kind, "seed": cfg.seed, **summary}
    paths = persist_results(out_dir, cfg.kind, cfg.seed, rows, summary, cfg.to_yaml(include_execution=False),
                            columns)
    if plot:
        paths.append(emit_plot(path=Path(out_dir) / f"{run_stem(cfg.kind, cfg.seed)}.svg", **plot))
    return paths


class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, [], code=2)


def _fail(kind: str, message: str, violations: list[str], code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "violations": violations}, sort_keys=True) + "\n")
    sys.exit(code)


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonArgumentParser(prog="fewshot-dp", description="Differentially private few-shot workbench.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_JsonArgumentParser)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides the config)")
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "threads": args.threads},
                          defaults={"kind": args.command})
        if cfg.kind != args.command:
            raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.command!r}",
                              [f"kind: expected {args.command!r}, got {cfg.kind!r}"])
        paths = execute(cfg, cfg.out, cfg.threads)
    except ConfigError as err:
        _fail(type(err).__name__, str(err), err.violations, code=2)
    except (WorkbenchError, OSError, ValueError) as err:
        _fail(type(err).__name__, str(err), [], code=1)
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
