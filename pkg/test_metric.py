"""
度量学习测试
"""

import numpy as np
import pytest

from errors import ConfigError, NonFiniteError, SamplingError, TrainingDivergedError
from metric import (
    TrainConfig, Trainer, TripletLossConfig, mining_policy, semi_hard_mine, train, train_config_from,
    triplet_loss,
)
from nn import EmbeddingNet, ModelSpec
from sampler import Triplet, TripletSource
from store import TripletRecord


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_triplet(anchor, positive, negative, source=TripletSource.NOISE):
    record = TripletRecord(int(source), 0, (0, 0), (0, 0), (1, 0), (0.0, 0.0, 0.0, 0.0))
    return Triplet(anchor, positive, negative, source, 0, record.params, record)


def linear_net(seed=0, dim=4):
    return EmbeddingNet(ModelSpec(layers=[], embedding_dim=dim, input_shape=(4, 6)), seed)


def separable_triplets():
    low = np.zeros((4, 6))
    low[:2] = 5.0
    high = np.zeros((4, 6))
    high[2:] = 5.0
    return [make_triplet(low, low, high), make_triplet(high, high, low)]


class TestTripletLoss:

    def test_identical_embeddings_cost_margin(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        result = triplet_loss(a, a, a, margin=0.1)
        assert result.loss == pytest.approx(0.2)
        np.testing.assert_allclose(result.per_triplet, [0.1, 0.1])

    def test_well_separated_is_free(self):
        a = np.array([[1.0, 0.0]])
        n = np.array([[0.0, 1.0]])
        result = triplet_loss(a, a, n, margin=0.1)
        assert result.loss == 0.0
        assert not result.active.any()
        assert np.all(result.grad_anchor == 0.0)

    def test_zero_loss_iff_margin_satisfied(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, p, n = (unit_rows(rng, 6, 3) for _ in range(3))
            d_ap = np.sum((a - p) ** 2, axis=1)
            d_an = np.sum((a - n) ** 2, axis=1)
            result = triplet_loss(a, p, n, margin=0.1)
            assert (result.loss == 0.0) == bool(np.all(d_ap + 0.1 <= d_an))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        a, p, n = (rng.standard_normal((3, 4)) for _ in range(3))
        weights = np.array([1.0, 0.5, 2.0])
        result = triplet_loss(a, p, n, margin=1.0, weights=weights)
        h = 1e-6
        for grad, which in ((result.grad_anchor, 0), (result.grad_positive, 1), (result.grad_negative, 2)):
            for i in range(3):
                for j in range(4):
                    args = [a.copy(), p.copy(), n.copy()]
                    args[which][i, j] += h
                    plus = triplet_loss(*args, margin=1.0, weights=weights).loss
                    args[which][i, j] -= 2 * h
                    minus = triplet_loss(*args, margin=1.0, weights=weights).loss
                    assert grad[i, j] == pytest.approx((plus - minus) / (2 * h), abs=1e-5)

    def test_non_finite_embeddings(self):
        a = np.array([[np.nan, 0.0]])
        with pytest.raises(NonFiniteError):
            triplet_loss(a, a, a)


class TestMining:

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            a = unit_rows(rng, 16, 8).astype(np.float32)
            p = unit_rows(rng, 16, 8).astype(np.float32)
            c = unit_rows(rng, 16, 8).astype(np.float32)
            chosen = semi_hard_mine(a, p, c)
            a64, p64, c64 = (x.astype(np.float64) for x in (a, p, c))
            for i in range(16):
                d_ap = np.sum((a64[i] - p64[i]) ** 2)
                best, best_d = i, np.inf
                for j in range(16):
                    d = np.sum((a64[i] - c64[j]) ** 2)
                    if d > d_ap and d < best_d:
                        best, best_d = j, d
                assert chosen[i] == best

    def test_ties_take_lowest_index(self):
        a = np.array([[0.0, 0.0]])
        p = np.array([[0.5, 0.0]])
        c = np.array([[0.0, 0.1], [0.0, 1.0], [1.0, 0.0]])
        assert semi_hard_mine(a, p, c, original=[0]).tolist() == [1]

    def test_falls_back_to_original(self):
        a = np.array([[0.0, 0.0]])
        p = np.array([[2.0, 0.0]])
        c = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert semi_hard_mine(a, p, c, original=[1]).tolist() == [1]


class TestMiningPolicy:

    @pytest.mark.parametrize('method,mining,lr', [
        ('labeled', True, 1e-4), ('proximity', True, 1e-4), ('joint', True, 1e-4),
        ('noise', False, 1e-6), ('translation', False, 1e-6), ('mixing', False, 1e-6),
    ])
    def test_table(self, method, mining, lr):
        policy = mining_policy(method)
        assert policy.mining is mining
        assert policy.learning_rate == lr

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            mining_policy('echo')

    def test_from_config(self, tiny_config):
        cfg = train_config_from(tiny_config, 'mixing')
        assert not cfg.loss.mining
        assert cfg.learning_rate == 1e-6
        assert cfg.loss.batch_size == 8

        tiny_config.set('training.mining', 'off')
        cfg = train_config_from(tiny_config, 'joint')
        assert not cfg.loss.mining
        assert cfg.learning_rate == 1e-6

        tiny_config.set('training.learning_rate', 0.01)
        assert train_config_from(tiny_config, 'joint').learning_rate == 0.01

    def test_invalid_loss_config(self):
        with pytest.raises(ConfigError):
            TripletLossConfig(candidate_pool='everything')
        with pytest.raises(ConfigError):
            TripletLossConfig(source_loss_weights={'noise': -1.0})


class TestTrainer:

    def config(self, mining=False, steps=5, lr=1e-3, pool='negatives'):
        loss = TripletLossConfig(margin=0.1, mining=mining, batch_size=4, candidate_pool=pool)
        return TrainConfig(loss=loss, steps=steps, learning_rate=lr, log_every=0)

    def random_triplets(self, n=10):
        rng = np.random.default_rng(4)
        sources = [TripletSource.NOISE, TripletSource.MIXING, TripletSource.PROXIMITY]
        return [make_triplet(*(rng.gamma(2.0, 1.0, (4, 6)) for _ in range(3)), source=sources[i % 3])
                for i in range(n)]

    def test_batches_never_mix_regimes(self):
        trainer = Trainer(None, self.config(mining=True))
        sources = np.array([3, 1, 3, 4, 3, 1, 1, 3, 4, 4, 3])
        batches = trainer._batch_schedule(sources, np.random.default_rng(0))
        for batch in batches:
            kinds = set((sources[batch] == 3).tolist())
            assert len(kinds) == 1
        assert sorted(np.concatenate(batches).tolist()) == list(range(len(sources)))

    def test_negative_rows_with_mining(self):
        trainer = Trainer(None, self.config(mining=True, pool='all'))
        g = np.array([
            [1.0, 0.0], [0.0, 1.0],     # anchors
            [0.9, 0.1], [0.1, 0.9],     # positives
            [0.0, -1.0], [-1.0, 0.0],   # negatives
        ])
        rows = trainer._negative_rows(g, np.array([1, 1]))
        for i, row in enumerate(rows):
            d_ap = np.sum((g[i] - g[2 + i]) ** 2)
            assert np.sum((g[i] - g[row]) ** 2) > d_ap
        # 关闭挖掘时使用原负例
        plain = Trainer(None, self.config(mining=False))
        assert plain._negative_rows(g, np.array([1, 1])).tolist() == [4, 5]

    def test_mixing_rows_keep_their_negative(self):
        trainer = Trainer(None, self.config(mining=True))
        g = np.eye(6)[:, :6]
        rows = trainer._negative_rows(g, np.array([3, 3]))
        assert rows.tolist() == [4, 5]

    def test_deterministic(self):
        triplets = self.random_triplets()
        a, b = linear_net(), linear_net()
        Trainer(a, self.config(mining=True), seed=9).train(triplets)
        Trainer(b, self.config(mining=True), seed=9).train(triplets)
        for name, value in a.parameters().items():
            np.testing.assert_array_equal(value, b.parameters()[name])

    def test_separable_triplets_reach_zero_loss(self):
        model, trace = train(linear_net(seed=2), separable_triplets(), self.config(steps=300, lr=0.05))
        assert len(trace) == 300
        assert trace[-1].loss == 0.0
        assert trace[-1].active_fraction == 0.0

    def test_trace_records_batch_sum(self):
        window = np.random.default_rng(1).gamma(2.0, 1.0, (4, 6))
        batch = [make_triplet(window, window, window) for _ in range(4)]
        row = Trainer(linear_net(), self.config()).step(batch)
        # 每个三元组贡献 δ = 0.1
        assert row.step == 1
        assert row.loss == pytest.approx(0.4)
        assert row.active_fraction == 1.0

    def test_divergence_restores_last_good(self):
        model = linear_net()
        before = {k: v.copy() for k, v in model.parameters().items()}
        bad = np.full((4, 6), np.nan)
        triplets = [make_triplet(bad, bad, bad), make_triplet(bad, bad, bad)]
        with pytest.raises(TrainingDivergedError) as info:
            Trainer(model, self.config()).train(triplets)
        assert info.value.step == 0
        for name, value in model.parameters().items():
            np.testing.assert_array_equal(value, before[name])

    def test_empty_stream(self):
        with pytest.raises(SamplingError):
            Trainer(linear_net(), self.config()).train([])
