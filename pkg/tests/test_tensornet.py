"""Tests for the numpy network engine."""

import math

import numpy as np
import pytest

from dlsense import tensornet
from dlsense.detectnet import cldnn_layers
from dlsense.errors import ValidationError
from dlsense.rng import RngStream
from dlsense.tensornet import (AdamState, Cache, Checkpoint, LayerKind, LayerSpec, Network, adam_step,
                               checkpoint_bytes, grad_check, init_params, layer_backward, layer_forward,
                               load_checkpoint, save_checkpoint, softmax, softmax_cross_entropy)


def conv_oracle(x, W, b):
    """Same-padded cross-correlation by explicit loops; x is (T, C), W is (k, C, F)."""
    k, C, F = W.shape
    T = x.shape[0]
    left = (k - 1) // 2
    y = np.zeros((T, F))
    for t in range(T):
        for f in range(F):
            acc = b[f]
            for j in range(k):
                src = t + j - left
                if 0 <= src < T:
                    for c in range(C):
                        acc += x[src, c] * W[j, c, f]
            y[t, f] = acc
    return y


class TestLayerSpec:
    """Layer descriptions."""

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            LayerSpec('POOL', 'p')

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValidationError):
            LayerSpec(LayerKind.DENSE, 'fc', units=0)
        with pytest.raises(ValidationError):
            LayerSpec(LayerKind.DROPOUT, 'd', rate=1.0)
        with pytest.raises(ValidationError):
            LayerSpec(LayerKind.CONV1D, 'c', units=4)

    def test_dict_round_trip(self):
        spec = LayerSpec(LayerKind.LSTM, 'lstm2', units=8, return_sequences=False)
        assert LayerSpec.from_dict(spec.to_dict()) == spec


class TestForward:
    """Per-kind forward maps."""

    def test_dense_identity(self, g):
        spec = LayerSpec(LayerKind.DENSE, 'fc', units=3)
        params = {'fc/W': np.eye(3), 'fc/b': np.zeros(3)}
        x = g.standard_normal((4, 3))
        y, _ = layer_forward(spec, params, x)
        np.testing.assert_array_equal(y, x)

    def test_time_dense_per_step(self, g):
        spec = LayerSpec(LayerKind.TIME_DENSE, 'td', units=2)
        params = {'td/W': g.standard_normal((3, 2)), 'td/b': g.standard_normal(2)}
        x = g.standard_normal((2, 5, 3))
        y, _ = layer_forward(spec, params, x)
        for t in range(5):
            np.testing.assert_allclose(y[:, t], x[:, t] @ params['td/W'] + params['td/b'])

    def test_softmax_uniform(self):
        spec = LayerSpec(LayerKind.SOFTMAX, 'sm')
        y, _ = layer_forward(spec, {}, np.zeros((1, 2)))
        np.testing.assert_allclose(y, [[0.5, 0.5]])

    def test_softmax_sums_to_one(self, g):
        p = softmax(g.standard_normal((50, 2)) * 30)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(p > 0)

    def test_relu(self):
        spec = LayerSpec(LayerKind.RELU, 'r')
        y, _ = layer_forward(spec, {}, np.array([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(y, [[0.0, 0.0, 2.0]])

    def test_lstm_zero_weights(self):
        spec = LayerSpec(LayerKind.LSTM, 'l', units=3)
        params = {'l/Wx': np.zeros((2, 12)), 'l/Wh': np.zeros((3, 12)), 'l/b': np.zeros(12)}
        y, cache = layer_forward(spec, params, np.ones((1, 1, 2)))
        np.testing.assert_array_equal(y, np.zeros((1, 1, 3)))
        steps = cache.data[1]
        np.testing.assert_allclose(steps[0, 0], 0.5)        # input gate
        np.testing.assert_allclose(steps[0, 2], 0.0)        # candidate

    def test_lstm_zero_input_ignores_input_kernel(self, g):
        spec = LayerSpec(LayerKind.LSTM, 'l', units=4)
        params = init_params(spec, (6, 3), g)
        other = dict(params, **{'l/Wx': g.standard_normal((3, 16))})
        x = np.zeros((2, 6, 3))
        np.testing.assert_array_equal(layer_forward(spec, params, x)[0], layer_forward(spec, other, x)[0])

    def test_lstm_final_state(self, g):
        seq = LayerSpec(LayerKind.LSTM, 'l', units=4)
        last = LayerSpec(LayerKind.LSTM, 'l', units=4, return_sequences=False)
        params = init_params(seq, (7, 3), g)
        x = g.standard_normal((2, 7, 3))
        np.testing.assert_array_equal(layer_forward(last, params, x)[0], layer_forward(seq, params, x)[0][:, -1])

    def test_forget_bias_initialised_to_one(self, g):
        params = init_params(LayerSpec(LayerKind.LSTM, 'l', units=5), (4, 2), g)
        np.testing.assert_array_equal(params['l/b'][5:10], 1.0)
        np.testing.assert_array_equal(params['l/b'][:5], 0.0)

    def test_conv_identity_kernel(self, g):
        spec = LayerSpec(LayerKind.CONV1D, 'c', units=1, kernel=3)
        W = np.zeros((3, 1, 1))
        W[1, 0, 0] = 1.0
        x = g.standard_normal((1, 9, 1))
        y, _ = layer_forward(spec, {'c/W': W, 'c/b': np.zeros(1)}, x)
        np.testing.assert_array_equal(y, x)

    def test_conv_matches_loop_oracle(self, g):
        spec = LayerSpec(LayerKind.CONV1D, 'c', units=3, kernel=3)
        W, b = g.standard_normal((3, 2, 3)), g.standard_normal(3)
        x = g.standard_normal((1, 8, 2))
        y, _ = layer_forward(spec, {'c/W': W, 'c/b': b}, x)
        np.testing.assert_allclose(y[0], conv_oracle(x[0], W, b), atol=1e-12)

    @pytest.mark.parametrize('kernel', [1, 2, 5, 10])
    def test_conv_preserves_length(self, kernel, g):
        spec = LayerSpec(LayerKind.CONV1D, 'c', units=2, kernel=kernel)
        params = init_params(spec, (16, 2), g)
        x = g.standard_normal((3, 16, 2))
        y, _ = layer_forward(spec, params, x)
        assert y.shape == (3, 16, 2)
        np.testing.assert_allclose(y[0], conv_oracle(x[0], params['c/W'], params['c/b']), atol=1e-12)

    def test_even_kernel_pads_extra_on_right(self):
        assert tensornet._same_pad(10) == (4, 5)
        assert tensornet._same_pad(5) == (2, 2)

    def test_dropout_eval_is_identity(self, g):
        spec = LayerSpec(LayerKind.DROPOUT, 'd', rate=0.5)
        x = g.standard_normal((4, 6))
        y, _ = layer_forward(spec, {}, x, 'eval')
        np.testing.assert_array_equal(y, x)

    def test_dropout_train_expectation(self):
        spec = LayerSpec(LayerKind.DROPOUT, 'd', rate=0.2)
        row = np.linspace(0.5, 2.0, 20)
        x = np.tile(row, (10000, 1))
        y, _ = layer_forward(spec, {}, x, 'train', RngStream(0))
        np.testing.assert_allclose(y.mean(axis=0), row, rtol=0.02)
        kept = y != 0
        np.testing.assert_allclose(y[kept], (x / 0.8)[kept])

    def test_train_dropout_needs_stream(self):
        with pytest.raises(ValidationError):
            layer_forward(LayerSpec(LayerKind.DROPOUT, 'd', rate=0.2), {}, np.ones((1, 3)), 'train')

    def test_shape_mismatch(self):
        spec = LayerSpec(LayerKind.DENSE, 'fc', units=2)
        with pytest.raises(ValidationError):
            layer_forward(spec, {}, np.ones((1, 3, 4)))

    def test_bad_mode(self):
        with pytest.raises(ValidationError):
            layer_forward(LayerSpec(LayerKind.RELU, 'r'), {}, np.ones((1, 2)), 'test')


class TestBackward:
    """Per-kind backward maps."""

    def test_relu_positive_inputs(self, g):
        spec = LayerSpec(LayerKind.RELU, 'r')
        _, cache = layer_forward(spec, {}, np.abs(g.standard_normal((2, 5))) + 0.1)
        grad = g.standard_normal((2, 5))
        dx, gp = layer_backward(spec, {}, cache, grad)
        np.testing.assert_array_equal(dx, grad)
        assert gp == {}

    def test_dense_hand_case(self):
        spec = LayerSpec(LayerKind.DENSE, 'fc', units=2)
        params = {'fc/W': np.array([[1.0, 2.0], [3.0, 4.0]]), 'fc/b': np.zeros(2)}
        _, cache = layer_forward(spec, params, np.array([[1.0, 2.0]]))
        dx, gp = layer_backward(spec, params, cache, np.array([[3.0, 4.0]]))
        np.testing.assert_array_equal(gp['fc/W'], [[3.0, 4.0], [6.0, 8.0]])
        np.testing.assert_array_equal(gp['fc/b'], [3.0, 4.0])
        np.testing.assert_array_equal(dx, [[11.0, 25.0]])

    def test_dropout_reuses_mask(self, g):
        spec = LayerSpec(LayerKind.DROPOUT, 'd', rate=0.5)
        y, cache = layer_forward(spec, {}, np.ones((3, 8)), 'train', RngStream(4))
        dx, _ = layer_backward(spec, {}, cache, np.ones((3, 8)))
        np.testing.assert_array_equal(dx, y)

    def test_mismatched_cache(self):
        relu = LayerSpec(LayerKind.RELU, 'r')
        _, cache = layer_forward(relu, {}, np.ones((1, 2)))
        with pytest.raises(ValidationError):
            layer_backward(LayerSpec(LayerKind.RELU, 'other'), {}, cache, np.ones((1, 2)))
        with pytest.raises(ValidationError):
            layer_backward(relu, {}, Cache(LayerKind.SOFTMAX, 'r', (None,)), np.ones((1, 2)))

    @pytest.mark.parametrize('kind,in_shape,kw', [
        (LayerKind.CONV1D, (7, 3), {'units': 4, 'kernel': 4}),
        (LayerKind.DENSE, (5,), {'units': 3}),
        (LayerKind.TIME_DENSE, (6, 3), {'units': 2}),
        (LayerKind.LSTM, (6, 3), {'units': 4}),
        (LayerKind.LSTM, (6, 3), {'units': 4, 'return_sequences': False}),
        (LayerKind.SOFTMAX, (4,), {}),
        (LayerKind.FLATTEN, (3, 2), {}),
    ])
    @pytest.mark.parametrize('seed', range(10))
    def test_input_gradient_finite_differences(self, kind, in_shape, kw, seed):
        spec = LayerSpec(kind, 'l', **kw)
        g = np.random.default_rng(seed)
        params = init_params(spec, in_shape, g)
        for k in params:
            params[k] = params[k] + 0.1 * g.standard_normal(params[k].shape)
        x = g.standard_normal((2,) + in_shape)
        y, cache = layer_forward(spec, params, x)
        w = g.standard_normal(y.shape)
        dx, gp = layer_backward(spec, params, cache, w)

        def f(xx, pp):
            return float(np.sum(layer_forward(spec, pp, xx)[0] * w))

        h = 1e-5
        for _ in range(6):
            idx = tuple(int(g.integers(0, s)) for s in x.shape)
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num = (f(xp, params) - f(xm, params)) / (2 * h)
            assert abs(dx[idx] - num) / max(abs(dx[idx]) + abs(num), 1e-6) < 1e-4
        for name, p in params.items():
            idx = tuple(int(g.integers(0, s)) for s in p.shape)
            pp, pm = dict(params), dict(params)
            pp[name], pm[name] = p.copy(), p.copy()
            pp[name][idx] += h
            pm[name][idx] -= h
            num = (f(x, pp) - f(x, pm)) / (2 * h)
            ana = gp[name][idx]
            assert abs(ana - num) / max(abs(ana) + abs(num), 1e-6) < 1e-4


class TestSoftmaxCrossEntropy:
    """Loss on raw logits."""

    def test_uniform_logits(self):
        loss, grad = softmax_cross_entropy(np.zeros(2), 0)
        assert loss == pytest.approx(math.log(2))
        np.testing.assert_allclose(grad, [-0.5, 0.5])

    def test_large_logits_stable(self):
        loss, grad = softmax_cross_entropy(np.array([50.0, -50.0]), 0)
        assert math.isfinite(loss) and loss < 1e-12
        assert np.all(np.isfinite(grad))

    def test_finite_differences(self, g):
        z = g.standard_normal(3)
        _, grad = softmax_cross_entropy(z, 2)
        h = 1e-6
        for i in range(3):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            num = (softmax_cross_entropy(zp, 2)[0] - softmax_cross_entropy(zm, 2)[0]) / (2 * h)
            assert abs(grad[i] - num) / max(abs(grad[i]) + abs(num), 1e-12) < 1e-6

    def test_batch_mean(self, g):
        z = g.standard_normal((4, 2))
        labels = np.array([0, 1, 1, 0])
        loss, grad = softmax_cross_entropy(z, labels)
        singles = [softmax_cross_entropy(z[i], labels[i]) for i in range(4)]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]))
        np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 4)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            softmax_cross_entropy(np.zeros(2), 2)


class TestAdam:
    """Adam with bias correction."""

    def test_first_step_is_sign(self):
        params = {'x': np.array([2.0, -1.0])}
        grads = {'x': np.array([3.0, -0.5])}
        new, state = adam_step(params, grads, AdamState(), lr=0.001)
        np.testing.assert_allclose(params['x'] - new['x'], [0.001, -0.001], rtol=1e-6)
        assert state.t == 1

    def test_zero_gradient(self):
        params = {'x': np.array([1.5])}
        new, state = adam_step(params, {'x': np.zeros(1)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(new['x'], params['x'])
        np.testing.assert_array_equal(state.m['x'], 0.0)
        np.testing.assert_array_equal(state.v['x'], 0.0)

    def test_moments_decay_on_zero_gradient(self):
        state = AdamState({'x': np.array([1.0])}, {'x': np.array([1.0])}, 3)
        _, new = adam_step({'x': np.array([0.0])}, {'x': np.zeros(1)}, state, lr=0.1)
        np.testing.assert_allclose(new.m['x'], 0.9)
        np.testing.assert_allclose(new.v['x'], 0.999)
        assert new.t == 4

    def test_quadratic_descent(self):
        params, state = {'x': np.array([1.0])}, AdamState()
        path = [1.0]
        for _ in range(100):
            params, state = adam_step(params, {'x': 2 * params['x']}, state, lr=0.1)
            path.append(abs(float(params['x'][0])))
        assert all(b < a for a, b in zip(path[:6], path[1:6]))
        assert path[-1] < 0.1

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            adam_step({'x': np.zeros(2)}, {'x': np.zeros(3)}, AdamState(), lr=0.1)

    def test_step_counter(self):
        with pytest.raises(ValidationError):
            adam_step({'x': np.zeros(1)}, {'x': np.zeros(1)}, AdamState(), lr=0.1, t=0)


class TestNetwork:
    """Chains, gradient checking and checkpoints."""

    @pytest.fixture
    def chain(self, small_config):
        return cldnn_layers(small_config)

    @pytest.fixture
    def batch(self):
        g = np.random.default_rng(21)
        return g.standard_normal((3, 32, 2)), np.array([0, 1, 1])

    def test_same_seed_same_params(self, chain):
        a, b = Network(chain, (32, 2), seed=5), Network(chain, (32, 2), seed=5)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_forward_deterministic_in_train_mode(self, chain, batch):
        net = Network(chain, (32, 2), seed=5)
        a, _ = net.forward(batch[0], 'train', RngStream(9))
        b, _ = net.forward(batch[0], 'train', RngStream(9))
        np.testing.assert_array_equal(a, b)

    def test_input_shape_checked(self, chain):
        net = Network(chain, (32, 2))
        with pytest.raises(ValidationError):
            net.forward(np.zeros((1, 16, 2)))

    def test_duplicate_layer_names(self):
        with pytest.raises(ValidationError):
            Network([LayerSpec(LayerKind.RELU, 'a'), LayerSpec(LayerKind.RELU, 'a')], (3,))

    def test_param_shapes_checked(self, chain):
        net = Network(chain, (32, 2))
        bad = dict(net.params, **{'fc2/b': np.zeros(5)})
        with pytest.raises(ValidationError):
            net.with_params(bad)

    @pytest.mark.parametrize('seed', range(10))
    def test_grad_check_reduced_detectnet(self, chain, seed):
        g = np.random.default_rng(seed)
        net = Network(chain, (32, 2), seed=seed)
        x = g.standard_normal((2, 32, 2))
        report = grad_check(net, x, np.array([0, 1]), seed=seed)
        assert report.passed, report.per_param
        assert report.n_checked > 100

    def test_grad_check_detects_broken_dense_backward(self, chain, batch, monkeypatch):
        original = tensornet._BACKWARD[LayerKind.DENSE]

        def broken(spec, params, data, g):
            dx, grads = original(spec, params, data, g)
            return dx, {k: 2.0 * v for k, v in grads.items()}

        monkeypatch.setitem(tensornet._BACKWARD, LayerKind.DENSE, broken)
        report = grad_check(Network(chain, (32, 2), seed=1), *batch)
        assert report.max_rel_error > 1e-2
        assert not report.passed

    def test_grad_check_eval_dropout_matches_plain_chain(self, chain, batch):
        plain = [l for l in chain if l.kind != LayerKind.DROPOUT]
        with_drop = Network(chain, (32, 2), seed=2)
        without = Network(plain, (32, 2), seed=2)
        np.testing.assert_array_equal(with_drop.forward(batch[0])[0], without.forward(batch[0])[0])
        assert grad_check(with_drop, *batch).per_param == grad_check(without, *batch).per_param

    def test_grad_check_needs_reference_precision(self, chain, batch):
        with pytest.raises(ValidationError):
            grad_check(Network(chain, (32, 2), dtype=np.float32), *batch)

    def test_predict_proba_rows_sum_to_one(self, chain, batch):
        p = Network(chain, (32, 2), seed=4).predict_proba(batch[0], batch_size=2)
        assert p.shape == (3, 2)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_checkpoint_round_trip(self, chain, tmp_path):
        net = Network(chain, (32, 2), seed=6)
        path = tmp_path / 'n.ckpt'
        save_checkpoint(path, Checkpoint(net, epoch=4, metrics={'pf': 0.08}, meta={'note': 'x'}))
        ckpt = load_checkpoint(path)
        assert ckpt.epoch == 4 and ckpt.metrics == {'pf': 0.08} and ckpt.meta == {'note': 'x'}
        assert ckpt.network.layers == net.layers
        for k, v in net.params.items():
            np.testing.assert_array_equal(ckpt.network.params[k], v.astype(np.float32))
        assert checkpoint_bytes(ckpt) == path.read_bytes()

    def test_checkpoint_truncated(self, chain, tmp_path):
        path = tmp_path / 'n.ckpt'
        save_checkpoint(path, Checkpoint(Network(chain, (32, 2))))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValidationError):
            load_checkpoint(path)
