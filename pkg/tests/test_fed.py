import math

import numpy as np
import pytest

from fewshot_dp.errors import ConfigError, ShardError
from fewshot_dp.fed import (
    AdaptiveClipState,
    ClientShard,
    FedConfig,
    ServerState,
    aggregate_round,
    comm_cost,
    fed_train,
    full_delta,
    label_tv_distance,
    local_update,
    shard_clients,
    update_noise_multiplier,
)
from fewshot_dp.model import PARAM_ORDER, Mode, count_learnable, init_model, mean_grad, reference_architecture
from fewshot_dp.tasks import SyntheticTaskSpec


def pooled_problem(n_clients=4, per_client=6, seed=0, mode=Mode.FILM):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_clients * per_client, 5))
    y = np.arange(len(x)) % 3
    model = init_model(5, 7, 4, 3, rng, mode)
    return x, y, model


class TestSharding:
    def test_iid_partition(self):
        x, y, _ = pooled_problem()
        shards = shard_clients(x, y, 4, np.random.default_rng(0))
        idx = np.concatenate([s.indices for s in shards])
        assert sorted(idx.tolist()) == list(range(len(y)))
        assert [len(s) for s in shards] == [6, 6, 6, 6]
        for s in shards:
            np.testing.assert_array_equal(s.x, x[s.indices])

    def test_heterogeneous_disjoint_nonempty(self):
        y = np.arange(200) % 5
        x = np.zeros((200, 2))
        shards = shard_clients(x, y, 30, np.random.default_rng(1), "heterogeneous", 0.1)
        idx = np.concatenate([s.indices for s in shards])
        assert len(idx) == len(set(idx.tolist())) == 200
        assert min(len(s) for s in shards) >= 1

    def test_heterogeneity_statistic(self):
        y = np.arange(400) % 5
        x = np.zeros((400, 2))
        rng = np.random.default_rng(2)
        iid = [label_tv_distance(shard_clients(x, y, 20, rng), 5) for _ in range(100)]
        het = [label_tv_distance(shard_clients(x, y, 20, rng, "heterogeneous", 0.5), 5) for _ in range(100)]
        assert np.mean(het) > np.mean(iid)

    def test_same_seed_same_shards(self):
        x, y, _ = pooled_problem()
        a = shard_clients(x, y, 3, np.random.default_rng(9), "heterogeneous")
        b = shard_clients(x, y, 3, np.random.default_rng(9), "heterogeneous")
        assert all(np.array_equal(p.indices, q.indices) for p, q in zip(a, b))

    def test_cap(self):
        x, y, _ = pooled_problem()
        assert max(len(s) for s in shard_clients(x, y, 2, np.random.default_rng(0), cap=5)) == 5

    def test_too_many_clients(self):
        with pytest.raises(ShardError):
            shard_clients(np.zeros((3, 2)), np.zeros(3, int), 4, np.random.default_rng(0))


class TestLocalUpdate:
    def test_zero_epochs(self):
        x, y, model = pooled_problem()
        d = local_update(ClientShard(0, x, y, np.arange(len(y))), model, 0, 8, 0.1, np.random.default_rng(0))
        assert np.array_equal(d, np.zeros(count_learnable(model)))

    def test_single_full_batch_step(self):
        x, y, model = pooled_problem()
        d = local_update(ClientShard(0, x, y, np.arange(len(y))), model, 1, len(y), 0.1, np.random.default_rng(0))
        np.testing.assert_allclose(d, -0.1 * mean_grad(model, x, y), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("mode", [Mode.HEAD, Mode.FILM])
    def test_frozen_coordinates_zero(self, mode):
        x, y, model = pooled_problem(mode=mode)
        d = local_update(ClientShard(0, x, y, np.arange(len(y))), model, 2, 4, 0.1, np.random.default_rng(0))
        full = full_delta(model, d)
        assert set(full) == set(PARAM_ORDER)
        for name in PARAM_ORDER:
            if name not in mode.groups:
                assert not np.any(full[name])
        assert any(np.any(full[n]) for n in mode.groups)

    def test_empty_client(self):
        _, _, model = pooled_problem()
        with pytest.raises(ShardError):
            local_update(ClientShard(0, np.zeros((0, 5)), np.zeros(0, int), np.zeros(0, int)), model, 1, 4, 0.1,
                         np.random.default_rng(0))


class TestAggregation:
    def test_fedavg_equals_centralized_sgd(self):
        x, y, model = pooled_problem()
        shards = shard_clients(x, y, 4, np.random.default_rng(0))
        server = ServerState(model, "fedavg", lr=1.0)
        central = model
        for r in range(20):
            deltas = [local_update(s, server.model, 1, len(s), 0.05, np.random.default_rng(r)) for s in shards]
            server = aggregate_round(server, deltas)
            central = central.with_trainable(central.trainable_vector() - 0.05 * mean_grad(central, x, y))
        np.testing.assert_allclose(server.model.trainable_vector(), central.trainable_vector(), rtol=0, atol=1e-9)

    def test_clip_step_all_unclipped(self):
        cs = AdaptiveClipState(10.0, quantile=0.1, lr=0.2)
        assert round(cs.updated(5, 5).clip, 3) == 8.353
        assert cs.updated(5, 5).clip == pytest.approx(10 * math.exp(-0.18))

    def test_clip_fixed_point(self):
        cs = AdaptiveClipState(3.0, quantile=0.1, lr=0.2)
        assert cs.updated(1, 10).clip == pytest.approx(3.0, rel=1e-15)
        assert AdaptiveClipState(3.0, adaptive=False).updated(10, 10).clip == 3.0

    def test_clip_converges_to_quantile(self):
        norms = np.random.default_rng(0).lognormal(0.0, 1.0, size=200)
        target = np.quantile(norms, 0.1)
        cs = AdaptiveClipState(1.0, quantile=0.1, lr=0.2)
        for _ in range(200):
            cs = cs.updated(int(np.sum(norms <= cs.clip)), len(norms))
        assert abs(cs.clip - target) <= 0.05 * target

    def test_aggregate_applies_clip_and_updates_it(self):
        _, _, model = pooled_problem()
        w = count_learnable(model)
        server = ServerState(model, "fedavg", lr=1.0, clip_state=AdaptiveClipState(1.0, adaptive=False))
        big = np.full(w, 10.0)
        out = aggregate_round(server, [big, big])
        step = out.model.trainable_vector() - model.trainable_vector()
        assert np.linalg.norm(step) == pytest.approx(1.0)

    def test_private_needs_sigma_and_clip(self):
        _, _, model = pooled_problem()
        d = [np.zeros(count_learnable(model))]
        with pytest.raises(ConfigError):
            aggregate_round(ServerState(model, clip_state=AdaptiveClipState(1.0)), d, dp=True)
        with pytest.raises(ConfigError):
            aggregate_round(ServerState(model), d, dp=True, sigma=1.0, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            aggregate_round(ServerState(model), [])

    def test_fedadam_moves_against_negated_aggregate(self):
        _, _, model = pooled_problem()
        w = count_learnable(model)
        server = ServerState(model, "fedadam", lr=0.01)
        out = aggregate_round(server, [np.ones(w)])
        np.testing.assert_allclose(out.model.trainable_vector() - model.trainable_vector(), 0.01 * 0.1 / (0.1 + 1e-3))

    def test_noise_split(self):
        assert update_noise_multiplier(1.0, 0.0) == 1.0
        s = update_noise_multiplier(1.0, 1.0)
        assert s**-2 + 2.0**-2 == pytest.approx(1.0)
        with pytest.raises(ConfigError):
            update_noise_multiplier(1.0, 0.4)


class TestCommCost:
    def test_reference_descriptors(self):
        r18 = reference_architecture("R-18", 10)
        head = 512 * 10 + 10
        assert comm_cost(r18, "film") == 7808 + head
        assert comm_cost(r18, "all") == 11_200_000 + head
        assert comm_cost(r18, "head") == head

    def test_small_head(self):
        model = init_model(5, 7, 64, 10, np.random.default_rng(0))
        assert comm_cost(model, "head") == 650

    @pytest.mark.parametrize("width", [1, 3, 32])
    def test_ordering(self, width):
        model = init_model(4, width, 3, 2, np.random.default_rng(0))
        assert comm_cost(model, "head") < comm_cost(model, "film") < comm_cost(model, "all")


SMALL = dict(rounds=15, cohort=10, n_clients=40, examples_per_client=10, test_per_class=50, local_epochs=1,
             server_lr=0.05, client_lr=0.05, count_noise=2.0)


class TestFedTrain:
    def test_deterministic_and_thread_free(self):
        spec = SyntheticTaskSpec(shift=0.5)
        cfg = FedConfig(**SMALL, epsilon=2.0)
        a, b = fed_train(spec, cfg, 0), fed_train(spec, cfg, 0, threads=3)
        assert a.log == b.log and a.server.model.allclose(b.server.model)

    def test_ledger_round_trip(self):
        cfg = FedConfig(**SMALL, epsilon=2.0)
        res = fed_train(SyntheticTaskSpec(), cfg, 1)
        assert res.privacy["epsilon"] == pytest.approx(2.0, abs=1e-3)
        assert res.privacy["delta"] == pytest.approx(40**-1.1)
        assert res.privacy["q"] == res.privacy["q_executed"] == 0.25

    def test_accounting_cohort_override(self):
        cfg = FedConfig(**{**SMALL, "rounds": 2}, epsilon=2.0, accounting_cohort=20)
        res = fed_train(SyntheticTaskSpec(), cfg, 1)
        assert res.privacy["q"] == 0.5 and res.privacy["q_executed"] == 0.25

    def test_payload_logged(self):
        res = fed_train(SyntheticTaskSpec(), FedConfig(**{**SMALL, "rounds": 2}, mode="film"), 0)
        assert [r["payload_params"] for r in res.log] == [comm_cost(res.server.model)] * 2
        assert [r["round"] for r in res.log] == [1, 2]

    def test_non_private_beats_private(self):
        spec = SyntheticTaskSpec(shift=0.5)
        np_acc = [fed_train(spec, FedConfig(**SMALL), s).accuracy for s in range(3)]
        dp_acc = [fed_train(spec, FedConfig(**SMALL, epsilon=2.0), s).accuracy for s in range(3)]
        assert np.median(np_acc) >= np.median(dp_acc)

    def test_small_cohort_default_count_noise_rejected(self):
        cfg = FedConfig(**{**SMALL, "count_noise": None}, epsilon=2.0)
        with pytest.raises(ConfigError):
            fed_train(SyntheticTaskSpec(), cfg, 0)

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            FedConfig(cohort=20, n_clients=10)
        with pytest.raises(ConfigError):
            FedConfig(epsilon=-1.0)
