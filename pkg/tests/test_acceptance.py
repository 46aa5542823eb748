"""Acceptance suite: one test per criterion, each with its own runtime limit.

Every test collects all failed sub-checks before asserting, so a failure
report lists everything that broke. The terminal summary prints one
PASS/FAIL line per criterion.
"""

import math
import time

import numpy as np
import pytest
import yaml

from fewshot_dp.accountant import MechanismParams, PrivacyBudget, calibrate_sigma, convert_delta, epsilon
from fewshot_dp.cli import main
from fewshot_dp.dp_optim import DpOptimConfig, StepLog, planned_steps, steps_per_epoch, train
from fewshot_dp.fed import AdaptiveClipState, ServerState, aggregate_round, comm_cost, local_update, shard_clients
from fewshot_dp.mia import TrainerConfig, attack_all, build_population, roc_metrics
from fewshot_dp.model import Mode, init_model, mean_grad, reference_architecture
from fewshot_dp.protocol import (
    HyperRanges,
    ProtocolConfig,
    regime_report,
    run_sweep,
    shot_multiplier,
    transfer_difficulty,
)
from fewshot_dp.rng import stream
from fewshot_dp.tasks import SyntheticTaskSpec, pretrained_model, sample_dataset

from oracles import epsilon_grids, finite_difference_errors, monotonicity_violations, prv_within_slack
from test_mia import brute_force_metrics


class Checks:
    """Accumulates failed sub-checks and the elapsed time of one criterion."""

    def __init__(self, limit_s: float):
        self.limit_s = limit_s
        self.start = time.perf_counter()
        self.failures: list[str] = []

    def check(self, ok: bool, message: str) -> None:
        if not ok:
            self.failures.append(message)

    def finish(self) -> None:
        elapsed = time.perf_counter() - self.start
        self.check(elapsed < self.limit_s, f"runtime {elapsed:.1f}s exceeds {self.limit_s:.0f}s")
        assert not self.failures, "\n".join(self.failures)


# -- 1 ------------------------------------------------------------------------

# (batch size, epochs) over |D| = 5000; every pair lies inside the search ranges
LARGE_SET_RUNS = [(500, 50), (500, 200), (1000, 50), (1000, 200), (2500, 50), (2500, 200), (5000, 10), (5000, 200)]


@pytest.mark.criterion(1, "accountant epsilon recomputation matches the reference ranges")
def test_criterion_1_accountant_reference():
    c = Checks(60)
    # |D| = 10: any batch size in the range is the full set, one step per epoch
    for steps in (1, 10, 50, 100, 200):
        s = calibrate_sigma(PrivacyBudget(1.0, 0.1), 1.0, steps, "rdp")
        p = MechanismParams(s, 1.0, steps)
        e_rdp = convert_delta(p, 0.1, 1e-5, "rdp")
        c.check(3.25 <= e_rdp <= 3.40, f"|D|=10 T={steps}: RDP {e_rdp:.4f} outside [3.25, 3.40]")
        # the same calibrated mechanism, re-expressed by the tighter accountant
        e_prv = epsilon(p, 1e-5, "prv")
        c.check(3.00 <= e_prv <= 3.15, f"|D|=10 T={steps}: PRV {e_prv:.4f} outside [3.00, 3.15]")
    n = 5000
    for batch, epochs in LARGE_SET_RUNS:
        q, steps = batch / n, epochs * steps_per_epoch(n, batch)
        s = calibrate_sigma(PrivacyBudget(8.0, 1 / n), q, steps, "rdp")
        e = convert_delta(MechanismParams(s, q, steps), 1 / n, 1e-5, "rdp")
        c.check(9.2 <= e <= 9.6, f"|D|=5000 B={batch} E={epochs}: RDP {e:.4f} outside [9.2, 9.6]")
    c.finish()


# -- 2 ------------------------------------------------------------------------


@pytest.mark.criterion(2, "accountant monotonicity, PRV below RDP plus slack, calibration round trip")
def test_criterion_2_accountant_properties():
    c = Checks(120)
    rdp, prv = epsilon_grids()
    c.check(rdp.size == 125, "grid must have 125 points")
    c.check(monotonicity_violations(rdp) == [], f"RDP monotonicity broken along {monotonicity_violations(rdp)}")
    c.check(monotonicity_violations(prv) == [], f"PRV monotonicity broken along {monotonicity_violations(prv)}")
    c.check(prv_within_slack(rdp, prv), f"PRV exceeds RDP + slack by {np.max(prv - rdp):.4f}")
    for target in (0.5, 1.0, 2.0, 4.0, 8.0):
        for name, q, steps in (("rdp", 0.01, 1000), ("prv", 0.05, 200)):
            s = calibrate_sigma(PrivacyBudget(target, 1e-5), q, steps, name)
            got = epsilon(MechanismParams(s, q, steps), 1e-5, name)
            c.check(abs(got - target) <= 1e-3, f"{name} round trip at eps={target}: {got:.6f}")
    c.finish()


# -- 3 ------------------------------------------------------------------------


@pytest.mark.criterion(3, "DP-SGD clipping, noiseless trajectory and gradient finite differences")
def test_criterion_3_dp_sgd_correctness():
    c = Checks(120)
    spec = SyntheticTaskSpec(shift=1.0)
    data = sample_dataset(spec, 10, stream(0, "acceptance", "data"), test_per_class=1)
    x, y = data.xy("train")
    for mode in Mode:
        log = StepLog()
        cfg = DpOptimConfig(clip=0.5, sigma=1.0, batch_size=10, lr=1e-2, epochs=20)
        res = train(x, y, pretrained_model(spec, mode), cfg, stream(0, "acceptance", "fit"), log=log)
        c.check(len(log.max_clipped_norm) == res.steps == planned_steps(len(y), cfg), f"{mode.value}: step count")
        worst = max(log.max_clipped_norm)
        c.check(worst <= 0.5 * (1 + 1e-12), f"{mode.value}: contributed norm {worst} exceeds clip 0.5")

        model = pretrained_model(spec, mode)
        cfg0 = DpOptimConfig(clip=1e12, sigma=0.0, batch_size=len(y), lr=5e-3, optimizer="sgd", epochs=25)
        got = train(x, y, model, cfg0, stream(1, "acceptance"), private=True).model.trainable_vector()
        ref = model
        for _ in range(25):
            ref = ref.with_trainable(ref.trainable_vector() - 5e-3 * mean_grad(ref, x, y))
        diff = float(np.max(np.abs(got - ref.trainable_vector())))
        c.check(diff <= 1e-12, f"{mode.value}: noiseless trajectory off reference SGD by {diff:.2e}")

        errors = finite_difference_errors(mode, 100)
        c.check(len(errors) == 100 and max(errors) <= 1e-5,
                f"{mode.value}: finite-difference relative error {max(errors):.2e}")
    c.finish()


# -- 4 ------------------------------------------------------------------------


@pytest.mark.criterion(4, "transfer difficulty reference values")
def test_criterion_4_transfer_difficulty():
    c = Checks(5)
    for (acc_all, acc_head), expected in (((91.6, 43.1), 52.9), ((84.2, 77.6), 7.8)):
        got = round(transfer_difficulty(acc_all, acc_head).score, 1)
        c.check(got == expected, f"TD({acc_all}, {acc_head}) = {got}, expected {expected}")
    c.finish()


# -- 5 ------------------------------------------------------------------------


@pytest.mark.criterion(5, "shot multiplier reference value and scale consistency")
def test_criterion_5_shot_multiplier():
    c = Checks(5)
    m = shot_multiplier([(5, 74.8)], [(25, 56.6), (50, 81.5)], 5)
    c.check(abs(m.multiplier - 8.65) <= 0.01, f"multiplier {m.multiplier}")
    rng = np.random.default_rng(2024)
    grid = np.array([1, 2, 5, 10, 25, 50, 100, 250, 500])
    for i in range(50):
        k = float(rng.integers(2, 10))
        npa, dpa = rng.random(len(grid)), rng.random(len(grid))
        s_ref = float(rng.choice(grid))
        base = shot_multiplier(list(zip(grid, npa)), list(zip(grid, dpa)), s_ref)
        scaled = shot_multiplier(list(zip(k * grid, npa)), list(zip(k * grid, dpa)), k * s_ref)
        if base.multiplier is None:
            c.check(scaled.multiplier is None, f"curve {i}: scaling changed exceeds-grid status")
        else:
            c.check(math.isclose(scaled.multiplier, base.multiplier, rel_tol=1e-12), f"curve {i}: multiplier moved")
            c.check(math.isclose(scaled.min_shots, k * base.min_shots, rel_tol=1e-12), f"curve {i}: min S not scaled")
    c.finish()


# -- 6 ------------------------------------------------------------------------

TREND_TASK = SyntheticTaskSpec(seed=1, shift=1.0)
TREND_SHOTS = (5, 10, 25)
TREND_EPSILONS = (None, 8.0, 2.0, 1.0)
TREND_SEEDS = (0, 1, 2)
# narrowed epochs/lr ranges keep 20 tuning trials affordable at desk scale
TREND_PROTOCOL = ProtocolConfig(ranges=HyperRanges(epochs=(20, 200), lr=(1e-3, 1e-2)), test_per_class=500)


@pytest.mark.criterion(6, "qualitative trends in epsilon, shots, parameterization and regime")
def test_criterion_6_trends():
    c = Checks(600)
    res = run_sweep(TREND_TASK, TREND_SHOTS, TREND_EPSILONS, ("head", "film"), TREND_SEEDS, TREND_PROTOCOL)
    med = {(k.shots, k.epsilon, k.mode.value): v for k, v in res.medians().items()}
    for mode in ("head", "film"):
        for s in TREND_SHOTS:
            accs = [med[(s, e, mode)] for e in TREND_EPSILONS]
            c.check(all(a >= b for a, b in zip(accs, accs[1:])),
                    f"{mode} S={s}: accuracy over eps inf,8,2,1 = {np.round(accs, 3).tolist()} not non-increasing")
        for e in TREND_EPSILONS:
            accs = [med[(s, e, mode)] for s in TREND_SHOTS]
            c.check(all(a <= b for a, b in zip(accs, accs[1:])),
                    f"{mode} eps={e}: accuracy over S = {np.round(accs, 3).tolist()} not non-decreasing")
    for s in TREND_SHOTS:
        c.check(med[(s, None, "film")] >= med[(s, None, "head")],
                f"S={s}: non-private FiLM {med[(s, None, 'film')]:.3f} below Head {med[(s, None, 'head')]:.3f}")

    def median_gap(eps):
        runs = [r for r in res.runs if r.shots == TREND_SHOTS[0] and r.epsilon == eps and r.mode == "film"]
        return float(np.median([regime_report(r.train_accuracy, r.test_accuracy).gap for r in runs]))

    gap_np, gap_dp = median_gap(None), median_gap(1.0)
    c.check(gap_np >= 0.25, f"non-private gap {gap_np:.3f} below 0.25")
    c.check(abs(gap_dp) <= 0.15, f"eps=1 gap {gap_dp:.3f} above 0.15")
    c.finish()


# -- 7 ------------------------------------------------------------------------

MIA_TASK = SyntheticTaskSpec(seed=0, shift=1.0)
MIA_SHOTS = 5
MIA_SHADOWS = 32
MIA_SEEDS = (0, 1, 2)
MIA_OPTIM = DpOptimConfig(lr=1e-2, epochs=100, batch_size=10, clip=1.0)


def mia_record(eps, seed):
    cfg = TrainerConfig(mode="film", epsilon=eps, optim=MIA_OPTIM)
    pop = build_population(MIA_TASK, MIA_TASK.n_classes * MIA_SHOTS, MIA_SHADOWS, cfg, seed)
    return attack_all(pop)


@pytest.mark.criterion(7, "membership inference: AUC level, epsilon ordering, DP bound, ROC exactness")
def test_criterion_7_membership_inference():
    c = Checks(900)
    size = MIA_TASK.n_classes * MIA_SHOTS
    auc = {}
    for eps in (None, 8.0, 2.0, 1.0):
        aucs = []
        for seed in MIA_SEEDS:
            rec = mia_record(eps, seed)
            aucs.append(rec.metrics.auc)
            if eps in (1.0, 2.0):
                n_pos = int(rec.membership.sum())
                fpr, tpr = rec.metrics.fpr, rec.metrics.tpr
                bound = np.exp(eps) * fpr + 1.0 / size + 3 * np.sqrt(tpr * (1 - tpr) / n_pos)
                worst = int(np.argmax(tpr - bound))
                c.check(np.all(tpr <= bound),
                        f"eps={eps} seed={seed}: TPR {tpr[worst]:.4f} above bound {bound[worst]:.4f} at FPR {fpr[worst]:.4f}")
        auc[eps] = float(np.median(aucs))
    c.check(auc[None] >= 0.7, f"non-private AUC {auc[None]:.3f} below 0.7")
    c.check(auc[1.0] <= auc[8.0] <= auc[None], f"AUC ordering broken: {auc}")

    rng = np.random.default_rng(11)
    for i in range(100):
        n = int(rng.integers(4, 60))
        labels = rng.random(n) < 0.5
        labels[:2] = (True, False)
        scores = np.round(rng.normal(size=n) + labels, int(rng.integers(0, 3)))
        ours = roc_metrics(scores, labels)
        tpr_at, exact_auc, adv = brute_force_metrics(scores, labels)
        ok = abs(ours.auc - exact_auc) <= 1e-12 and abs(ours.advantage - adv) <= 1e-12
        ok = ok and all(abs(ours.tpr_at_fpr[t] - v) <= 1e-12 for t, v in tpr_at.items())
        c.check(ok, f"instance {i}: ROC metrics differ from brute force")
    c.finish()


# -- 8 ------------------------------------------------------------------------


@pytest.mark.criterion(8, "federated oracle, adaptive clip convergence, communication cost")
def test_criterion_8_federated():
    c = Checks(300)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 6))
    y = np.arange(40) % 4
    for mode in Mode:
        model = init_model(6, 8, 5, 4, rng, mode)
        shards = shard_clients(x, y, 5, np.random.default_rng(1))
        server, central = ServerState(model, "fedavg", lr=1.0), model
        for r in range(20):
            deltas = [local_update(s, server.model, 1, len(s), 0.05, np.random.default_rng(r)) for s in shards]
            server = aggregate_round(server, deltas)
            central = central.with_trainable(central.trainable_vector() - 0.05 * mean_grad(central, x, y))
        diff = float(np.max(np.abs(server.model.trainable_vector() - central.trainable_vector())))
        c.check(diff <= 1e-9, f"{mode.value}: FedAvg off centralized SGD by {diff:.2e}")

    norms = np.random.default_rng(3).lognormal(0.0, 1.0, size=500)
    target = float(np.quantile(norms, 0.1))
    cs = AdaptiveClipState(1.0, quantile=0.1, lr=0.2)
    for _ in range(200):
        cs = cs.updated(int(np.sum(norms <= cs.clip)), len(norms))
    c.check(abs(cs.clip - target) <= 0.05 * target, f"clip {cs.clip:.4f} vs 0.1-quantile {target:.4f}")

    for width in (1, 8, 64):
        m = init_model(6, width, 5, 4, rng)
        costs = [comm_cost(m, mode) for mode in ("head", "film", "all")]
        c.check(costs[0] < costs[1] < costs[2], f"width {width}: payload ordering {costs}")
    for name in ("R-18", "R-50", "VIT-B"):
        arch = reference_architecture(name, 10)
        costs = [comm_cost(arch, mode) for mode in ("head", "film", "all")]
        c.check(costs[0] < costs[1] < costs[2], f"{name}: payload ordering {costs}")
    r18 = reference_architecture("R-18", 10)
    c.check(comm_cost(r18, "film") == 7808 + r18.head, f"R-18 FiLM payload {comm_cost(r18, 'film')}")
    c.finish()


# -- 9 ------------------------------------------------------------------------

SMALL_CONFIGS = {
    "account": {"epsilon": 1.0, "delta": 0.1, "q": 1.0, "steps": 50, "accountant": "prv", "extra_deltas": [1e-5]},
    "train": {"epsilon": 2.0, "train": {"shots": 4, "epochs": 10, "batch_size": 10}},
    "sweep": {"ranges": {"epochs": [5, 20], "lr": [1e-3, 1e-2]},
              "sweep": {"shots": [2, 4], "epsilons": [None, 4.0], "modes": ["head", "film"], "n_seeds": 2,
                        "budget": 2, "test_per_class": 20}},
    "attack": {"epsilon": 4.0, "train": {"epochs": 10, "batch_size": 5}, "attack": {"shots": 2, "shadows": 8}},
    "fedsim": {"epsilon": 2.0, "fed": {"rounds": 5, "cohort": 8, "n_clients": 16, "examples_per_client": 8,
                                        "count_noise": 2.0, "test_per_class": 20}},
    "analyze": {"analyze": {"td": [{"acc_all": 91.6, "acc_head": 43.1}],
                            "multipliers": [{"np_curve": [[5, 74.8]], "dp_curve": [[25, 56.6], [50, 81.5]],
                                             "s_ref": 5}]}},
}


@pytest.mark.criterion(9, "byte-identical outputs across thread counts")
def test_criterion_9_reproducibility(tmp_path):
    c = Checks(300)
    for kind, data in SMALL_CONFIGS.items():
        path = tmp_path / f"{kind}.yaml"
        path.write_text(yaml.safe_dump({"kind": kind, "task": {"shift": 1.0}, **data}))
        outputs = {}
        for threads in (1, 8):
            out = tmp_path / f"{kind}_{threads}"
            code = main([kind, "--config", str(path), "--seed", "5", "--out", str(out), "--threads", str(threads)])
            c.check(code == 0, f"{kind}: exit code {code}")
            outputs[threads] = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
        c.check(len(outputs[1]) >= 3, f"{kind}: only {sorted(outputs[1])} written")
        c.check(outputs[1] == outputs[8], f"{kind}: outputs differ between 1 and 8 threads")
    c.finish()
