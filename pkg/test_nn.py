"""
神经网络引擎测试
"""

import numpy as np
import pytest

from config import default_layers
from errors import ConfigError, DomainMismatchError, NonFiniteError, ShapeError
from frontend import ContextWindow
from nn import (
    Adam, AdamState, Conv2D, Dense, EmbeddingNet, GlobalAvgPool, L2Normalize, MaxPool2D, ModelSpec,
    ReLU, Sequential, adam_step, gradient_check,
)

SMALL_LAYERS = [
    {"type": "conv2d", "kernel": 3, "channels": 2},
    {"type": "relu"},
    {"type": "residual", "layers": [
        {"type": "conv2d", "kernel": 3, "channels": 2},
        {"type": "relu"},
    ]},
    {"type": "maxpool", "kernel": 2, "stride": 2},
    {"type": "global_avg_pool"},
]


def small_net(dtype=np.float64, layers=SMALL_LAYERS, seed=1):
    return EmbeddingNet(ModelSpec(layers=layers, embedding_dim=3, input_shape=(4, 6)), seed, dtype)


def naive_conv(x, weight, bias, stride):
    k = weight.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    n, _, h, w = x.shape
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    out = np.zeros((n, weight.shape[0], ho, wo))
    for b in range(n):
        for o in range(weight.shape[0]):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = np.sum(patch * weight[o]) + bias[o]
    return out


class TestLayers:

    @pytest.mark.parametrize('stride', [1, 2])
    def test_conv_matches_direct_sum(self, stride):
        rng = np.random.default_rng(0)
        conv = Conv2D(2, 3, kernel=3, stride=stride, rng=rng, dtype=np.float64)
        conv.params['bias'][:] = [0.1, -0.2, 0.3]
        x = rng.standard_normal((2, 2, 5, 6))
        np.testing.assert_allclose(conv.forward(x), naive_conv(x, conv.params['weight'], conv.params['bias'], stride),
                                   rtol=1e-12, atol=1e-12)
        assert conv.output_shape((2, 5, 6)) == conv.forward(x).shape[1:]

    def test_maxpool_ties_route_to_first(self):
        pool = MaxPool2D(2, 2)
        x = np.ones((1, 1, 2, 4))
        np.testing.assert_array_equal(pool.forward(x), [[[[1.0, 1.0]]]])
        dx = pool.backward(np.array([[[[3.0, 5.0]]]]))
        np.testing.assert_array_equal(dx[0, 0], [[3.0, 0.0, 5.0, 0.0], [0.0, 0.0, 0.0, 0.0]])

    def test_relu_and_global_pool(self):
        x = np.array([[[[-1.0, 2.0], [3.0, -4.0]]]])
        relu = ReLU()
        np.testing.assert_array_equal(relu.forward(x), [[[[0.0, 2.0], [3.0, 0.0]]]])
        gap = GlobalAvgPool()
        np.testing.assert_allclose(gap.forward(x), [[0.0]])
        np.testing.assert_allclose(gap.backward(np.array([[4.0]])), np.ones((1, 1, 2, 2)))

    def test_l2_normalize(self):
        norm = L2Normalize()
        out = norm.forward(np.array([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_allclose(out[0], [0.6, 0.8])
        np.testing.assert_array_equal(out[1], [1.0, 0.0])
        dx = norm.backward(np.ones((2, 2)))
        assert np.all(np.isfinite(dx))
        np.testing.assert_array_equal(dx[1], [0.0, 0.0])

    def test_backward_without_forward(self):
        with pytest.raises(ShapeError):
            ReLU().backward(np.ones(3))


class TestEmbeddingNet:

    def test_outputs_unit_norm(self):
        model = small_net(np.float32)
        x = np.random.default_rng(0).standard_normal((5, 4, 6))
        g = model.embed(x)
        assert g.shape == (5, 3)
        assert g.dtype == np.float32
        np.testing.assert_allclose(np.linalg.norm(g.astype(np.float64), axis=1), 1.0, atol=1e-5)

    @pytest.mark.parametrize('dtype', [np.float32, np.float64])
    def test_all_zero_window_has_unit_norm(self, dtype):
        model = EmbeddingNet(ModelSpec(layers=default_layers(), embedding_dim=128), seed=0, dtype=dtype)
        g = model.embed(np.zeros((2, 64, 96)))
        np.testing.assert_allclose(np.linalg.norm(g.astype(np.float64), axis=1), 1.0, atol=1e-5)
        silence = model.embed(np.full((1, 64, 96), np.log(0.01)))
        assert np.linalg.norm(silence.astype(np.float64)) == pytest.approx(1.0, abs=1e-5)

    def test_embed_batches_agree(self):
        model = small_net()
        x = np.random.default_rng(2).standard_normal((7, 4, 6))
        np.testing.assert_allclose(model.embed(x, batch_size=3), model.forward(x, record=False), rtol=1e-12)
        assert model.embed(np.zeros((0, 4, 6))).shape == (0, 3)

    def test_parameter_names(self):
        names = list(small_net().parameters())
        assert names == [
            'layer0.weight', 'layer0.bias',
            'layer2.layer0.weight', 'layer2.layer0.bias',
            'layer5.weight', 'layer5.bias',
        ]

    def test_same_seed_same_weights(self):
        a, b = small_net(seed=4).parameters(), small_net(seed=4).parameters()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])
        spec = ModelSpec(layers=SMALL_LAYERS, embedding_dim=3, input_shape=(4, 6))
        c = EmbeddingNet.from_spec(spec, seed=4, dtype=np.float64).parameters()
        assert list(c) == list(a)
        for name in a:
            np.testing.assert_array_equal(a[name], c[name])

    def test_astype_keeps_function(self):
        model = small_net(np.float32)
        x = np.random.default_rng(3).standard_normal((2, 4, 6))
        shadow = model.astype(np.float64)
        np.testing.assert_allclose(shadow.embed(x), model.embed(x), atol=1e-5)

    def test_energy_windows_are_rejected(self):
        model = small_net()
        with pytest.raises(DomainMismatchError):
            model.embed([ContextWindow(np.ones((4, 6)))])

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeError):
            small_net().embed(np.zeros((2, 5, 6)))

    def test_load_parameters_mismatch(self):
        model = small_net()
        params = dict(model.parameters())
        params.pop('layer5.bias')
        with pytest.raises(ShapeError):
            model.load_parameters(params)

    @pytest.mark.parametrize('layers', [
        [{"type": "lstm"}],
        [{"type": "residual", "layers": [{"type": "attention"}]}],
    ])
    def test_unknown_layer(self, layers):
        with pytest.raises(ConfigError):
            ModelSpec(layers=layers)

    def test_residual_must_keep_shape(self):
        layers = [{"type": "conv2d", "channels": 2},
                  {"type": "residual", "layers": [{"type": "conv2d", "channels": 3}]}]
        with pytest.raises(ShapeError):
            EmbeddingNet(ModelSpec(layers=layers, embedding_dim=2, input_shape=(4, 6)))

    def test_invalid_embedding_dim(self):
        with pytest.raises(ConfigError):
            ModelSpec(embedding_dim=0)


class TestGradients:

    def test_network_float64(self):
        model = small_net(np.float64)
        x = np.random.default_rng(5).standard_normal((2, 4, 6))
        errors = gradient_check(model, x)
        assert set(errors) == set(model.parameters())
        assert max(errors.values()) < 1e-5

    def test_network_float32(self):
        model = small_net(np.float32)
        x = np.random.default_rng(6).standard_normal((3, 4, 6))
        errors = gradient_check(model, x)
        assert set(errors) == set(model.parameters())
        assert max(errors.values()) < 1e-3

    @pytest.mark.parametrize('dtype', [np.float32, np.float64])
    @pytest.mark.parametrize('seed', [0, 1, 2])
    def test_default_architecture(self, dtype, seed):
        model = EmbeddingNet(ModelSpec(layers=default_layers(), embedding_dim=128), seed=seed, dtype=dtype)
        x = np.random.default_rng(100 + seed).standard_normal((4, 64, 96))
        errors = gradient_check(model, x, max_checks=4, seed=seed)
        assert set(errors) == set(model.parameters())
        assert max(errors.values()) < 1e-3

    def test_strided_conv_and_dense(self):
        rng = np.random.default_rng(7)
        model = Sequential([
            Conv2D(1, 2, kernel=3, stride=2, rng=rng, dtype=np.float64),
            Dense(2 * 3 * 3, 4, rng=rng, dtype=np.float64),
            L2Normalize(),
        ])
        x = rng.standard_normal((2, 1, 5, 6))
        errors = gradient_check(model, x, max_checks=10)
        assert max(errors.values()) < 1e-5


class TestAdam:

    def test_first_step_is_signed_learning_rate(self):
        params = {'w': np.array([1.0, -2.0, 0.5])}
        grads = {'w': np.array([0.3, -4.0, 0.0])}
        state = AdamState(learning_rate=0.1, eps=1e-8)
        adam_step(params, grads, state)
        assert state.step == 1
        np.testing.assert_allclose(params['w'], [0.9, -1.9, 0.5], atol=1e-6)

    def test_non_finite_gradient_leaves_parameters(self):
        params = {'w': np.array([1.0, 2.0])}
        state = AdamState()
        with pytest.raises(NonFiniteError):
            adam_step(params, {'w': np.array([np.nan, 1.0])}, state)
        np.testing.assert_array_equal(params['w'], [1.0, 2.0])
        assert state.step == 0
        assert state.m == {}

    def test_missing_gradient(self):
        with pytest.raises(ShapeError):
            adam_step({'w': np.zeros(2)}, {}, AdamState())

    def test_optimizer_reduces_quadratic(self):
        params = {'w': np.array([3.0, -2.0])}
        opt = Adam(learning_rate=0.1)
        for _ in range(200):
            opt.step(params, {'w': 2 * params['w']})
        assert np.linalg.norm(params['w']) < 0.5

    def test_state_round_trip(self):
        state = AdamState(learning_rate=0.01)
        adam_step({'w': np.ones(2)}, {'w': np.ones(2)}, state)
        again = AdamState.from_dict(state.to_dict())
        assert again.step == 1
        np.testing.assert_array_equal(again.m['w'], state.m['w'])
