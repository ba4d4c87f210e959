"""
Tests for the dense network core: layout, forward/backward, dropout, losses
and optimizers.
"""

import numpy as np
import pytest
from scipy import stats as sps

from app.core import nn
from app.core.errors import ArgumentError, ConfigurationError, NumericError
from app.core.nn import (
    Activation,
    BinaryCrossEntropy,
    CategoricalCrossEntropy,
    DropoutMask,
    NetworkSpec,
    ParamVector,
)


def _fd_param_grad(params, x, y, loss, eps=1e-5):
    out = np.zeros_like(params.values)
    for i in range(params.values.size):
        up = params.values.copy()
        down = params.values.copy()
        up[i] += eps
        down[i] -= eps
        lu, _ = loss.value_and_grad(nn.logits(params.with_values(up), x), y)
        ld, _ = loss.value_and_grad(nn.logits(params.with_values(down), x), y)
        out[i] = (lu - ld) / (2 * eps)
    return out


def _fd_input_grad(params, x, y, loss, eps=1e-5):
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        up = x.copy()
        down = x.copy()
        up[idx] += eps
        down[idx] -= eps
        lu, _ = loss.value_and_grad(nn.logits(params, up), y)
        ld, _ = loss.value_and_grad(nn.logits(params, down), y)
        out[idx] = (lu - ld) / (2 * eps)
    return out


def _half_rate_masks(n, width=4):
    return [DropoutMask.generate(0.5, [width], seed=3, draw_index=i) for i in range(n)]


def _pattern(keep):
    return int(np.dot(keep.astype(np.int64), 1 << np.arange(keep.size)))


# ============================================================================
# Layout
# ============================================================================


class TestLayout:
    def test_default_spec_shape(self):
        spec = NetworkSpec(4)
        layout = spec.layout()
        assert [(lay.in_dim, lay.out_dim) for lay in layout] == [
            (4, 4),
            (4, 4),
            (4, 4),
            (4, 4),
            (4, 1),
        ]
        assert layout[-1].activation is Activation.SIGMOID
        assert nn.layout_size(layout) == 4 * (4 * 4 + 4) + (4 + 1)

    def test_sigmoid_head_needs_single_output(self):
        with pytest.raises(ConfigurationError):
            NetworkSpec(3, (4,), output_dim=2, head=Activation.SIGMOID)

    def test_param_vector_length_checked(self):
        layout = NetworkSpec(2, (3,)).layout()
        with pytest.raises(ConfigurationError):
            ParamVector(np.zeros(5), layout)

    def test_weight_views_follow_layout(self):
        params = NetworkSpec(2, (3,)).init(np.random.default_rng(0))
        assert params.weight(0).shape == (2, 3)
        assert params.bias(0).shape == (3,)
        assert params.weight(1).shape == (3, 1)
        np.testing.assert_array_equal(params.bias(1), 0.0)

    def test_layout_dict_round_trip(self):
        layout = NetworkSpec(5, (4, 2), 3, Activation.TANH, Activation.SOFTMAX).layout()
        assert nn.layout_from_dict(nn.layout_to_dict(layout)) == layout

    def test_input_width_mismatch(self):
        params = NetworkSpec(3, (2,)).init(np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            nn.forward(params, np.zeros((4, 2)))

    def test_zero_head_init(self):
        spec = NetworkSpec(3, (2,), 4, head=Activation.SOFTMAX)
        params = spec.init(np.random.default_rng(1), zero_head=True)
        np.testing.assert_array_equal(params.weight(1), 0.0)
        out = nn.forward(params, np.ones((2, 3)))
        np.testing.assert_allclose(out, 0.25)


# ============================================================================
# Gradients
# ============================================================================


class TestGradients:
    @pytest.mark.parametrize("activation", [Activation.RELU, Activation.TANH])
    def test_param_and_input_gradients_match_finite_differences(self, activation):
        """100 random 4x[4,4,4,4] networks per hidden activation."""
        spec = NetworkSpec(4, (4, 4, 4, 4), hidden_activation=activation)
        loss = BinaryCrossEntropy()
        worst, checked = 0.0, 0
        for trial in range(100):
            rng = np.random.default_rng(trial)
            params = spec.init(rng)
            params = params.with_values(params.values + rng.normal(0, 0.1, len(params)))
            x = rng.normal(size=(5, 4))
            y = rng.integers(0, 2, 5)
            if activation is Activation.RELU:
                pre = nn.forward_cache(params, x).pre[:-1]
                # central differences straddle the ReLU kink
                if min(np.min(np.abs(z)) for z in pre) < 1e-4:
                    continue
            res = nn.backward(params, x, y, loss)
            worst = max(
                worst,
                np.max(np.abs(res.param_grad.values - _fd_param_grad(params, x, y, loss))),
                np.max(np.abs(res.input_grad - _fd_input_grad(params, x, y, loss))),
            )
            checked += 1
        assert checked >= 50
        assert worst < 1e-5

    def test_categorical_gradients(self):
        spec = NetworkSpec(3, (5,), 4, Activation.TANH, Activation.SOFTMAX)
        rng = np.random.default_rng(3)
        params = spec.init(rng)
        x = rng.normal(size=(6, 3))
        y = rng.integers(0, 4, 6)
        loss = CategoricalCrossEntropy()
        res = nn.backward(params, x, y, loss)
        fd = _fd_param_grad(params, x, y, loss)
        np.testing.assert_allclose(res.param_grad.values, fd, atol=1e-6)

    def test_one_hot_and_integer_targets_agree(self):
        logits = np.array([[0.2, -1.0, 0.5], [1.0, 0.0, -0.3]])
        labels = np.array([2, 0])
        onehot = np.eye(3)[labels]
        loss = CategoricalCrossEntropy()
        v1, g1 = loss.value_and_grad(logits, labels)
        v2, g2 = loss.value_and_grad(logits, onehot)
        assert v1 == pytest.approx(v2)
        np.testing.assert_allclose(g1, g2)

    def test_bce_weight_scales_value_and_gradient(self):
        logits = np.array([[0.3], [-2.0], [1.5]])
        y = np.array([1, 0, 0])
        v1, g1 = BinaryCrossEntropy().value_and_grad(logits, y)
        v2, g2 = BinaryCrossEntropy(weight=2.0).value_and_grad(logits, y)
        assert v2 == pytest.approx(2 * v1)
        np.testing.assert_allclose(g2, 2 * g1)

    def test_hidden_gradient_injection(self):
        """An extra dL/dh at a hidden layer equals adding <c, h> to the loss."""
        spec = NetworkSpec(3, (4, 4), hidden_activation=Activation.TANH)
        rng = np.random.default_rng(5)
        params = spec.init(rng)
        x = rng.normal(size=(4, 3))
        c = rng.normal(size=(4, 4))

        def total(values):
            cache = nn.forward_cache(params.with_values(values), x)
            return float(np.sum(cache.logits)) + float(np.sum(c * cache.hidden[1]))

        cache = nn.forward_cache(params, x)
        grad, _ = nn.backprop(params, cache, np.ones((4, 1)), {1: c})
        eps = 1e-6
        fd = np.zeros(len(params))
        for i in range(len(params)):
            up, down = params.values.copy(), params.values.copy()
            up[i] += eps
            down[i] -= eps
            fd[i] = (total(up) - total(down)) / (2 * eps)
        np.testing.assert_allclose(grad.values, fd, atol=1e-6)

    def test_input_gradient_of_linear_network(self):
        spec = NetworkSpec(3, (), 1, Activation.IDENTITY)
        params = ParamVector(np.array([0.5, -1.0, 2.0, 0.1]), spec.layout())
        x = np.random.default_rng(0).normal(size=(7, 3))
        g = nn.input_gradient(params, x)
        np.testing.assert_allclose(g, np.tile([0.5, -1.0, 2.0], (7, 1)))

    def test_input_gradient_probability_target(self):
        spec = NetworkSpec(2, (), 1, Activation.IDENTITY)
        params = ParamVector(np.array([1.0, 0.0, 0.0]), spec.layout())
        x = np.array([[0.0, 3.0]])
        g = nn.input_gradient(params, x, target="probability")
        np.testing.assert_allclose(g, [[0.25, 0.0]])

    def test_unknown_gradient_target(self):
        params = NetworkSpec(2, ()).init(np.random.default_rng(0))
        with pytest.raises(ArgumentError):
            nn.input_gradient(params, np.zeros((1, 2)), target="margin")

    def test_non_finite_loss_reports_layer(self):
        spec = NetworkSpec(2, (2,))
        params = spec.init(np.random.default_rng(0))
        values = params.values.copy()
        values[:] = np.nan
        with pytest.raises(NumericError) as err:
            nn.backward(params.with_values(values), np.ones((2, 2)), np.array([0, 1]))
        assert err.value.layer == 0


# ============================================================================
# Dropout
# ============================================================================


class TestDropout:
    def test_mask_is_reproducible(self):
        a = DropoutMask.generate(0.3, [8, 8], seed=11, draw_index=4)
        b = DropoutMask.generate(0.3, [8, 8], seed=11, draw_index=4)
        c = DropoutMask.generate(0.3, [8, 8], seed=11, draw_index=5)
        for ka, kb in zip(a.keep, b.keep):
            np.testing.assert_array_equal(ka, kb)
        assert any(not np.array_equal(ka, kc) for ka, kc in zip(a.keep, c.keep))

    def test_zero_rate_keeps_everything(self):
        mask = DropoutMask.generate(0.0, [4, 3], seed=0, draw_index=0)
        assert mask.kept_units() == [4, 3]
        np.testing.assert_array_equal(mask.scale(0), 1.0)

    def test_rate_bounds(self):
        with pytest.raises(ArgumentError):
            DropoutMask.generate(1.0, [4], seed=0, draw_index=0)

    def test_mean_kept_units_at_half_rate(self):
        kept = [m.kept_units()[0] for m in _half_rate_masks(10_000)]
        assert np.mean(kept) == pytest.approx(2.0, abs=0.1)

    def test_keep_patterns_uniform_and_independent_across_draws(self):
        patterns = np.array([_pattern(m.keep[0]) for m in _half_rate_masks(10_000)])
        single = np.bincount(patterns, minlength=16)
        assert sps.chisquare(single).pvalue > 1e-3
        pairs = np.bincount(patterns[0::2] * 16 + patterns[1::2], minlength=256)
        assert sps.chisquare(pairs).pvalue > 1e-3

    def test_batch_mask_is_per_sample(self):
        mask = DropoutMask.generate(0.5, [6], seed=2, draw_index=0, batch=10)
        assert mask.keep[0].shape == (10, 6)

    def test_masked_forward_drops_units(self):
        spec = NetworkSpec(2, (3,), 1, Activation.IDENTITY)
        params = spec.init(np.random.default_rng(0))
        keep = (np.array([False, False, False]),)
        mask = DropoutMask(0.5, keep)
        out = nn.logits(params, np.ones((2, 2)), mask)
        np.testing.assert_allclose(out, params.bias(1)[None, :].repeat(2, axis=0))

    def test_mask_layer_count_checked(self):
        params = NetworkSpec(2, (3, 3)).init(np.random.default_rng(0))
        mask = DropoutMask.generate(0.2, [3], seed=0, draw_index=0)
        with pytest.raises(ConfigurationError):
            nn.forward(params, np.zeros((1, 2)), mask)


# ============================================================================
# Optimizers and training
# ============================================================================


class TestOptimizers:
    def test_adam_first_step_moves_by_lr(self):
        state = nn.AdamState.create(3, lr=0.1)
        out = nn.adam_step(state, np.zeros(3), np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(out, [-0.1, 0.1, -0.1], rtol=1e-6)
        assert state.t == 1

    def test_adam_rejects_non_finite_gradient(self):
        state = nn.AdamState.create(2, lr=0.1)
        with pytest.raises(NumericError):
            nn.adam_step(state, np.zeros(2), np.array([np.inf, 0.0]))

    def test_sgd_constant_step(self):
        out = nn.sgd_constant_step(np.ones(2), np.array([1.0, -1.0]), 0.5)
        np.testing.assert_allclose(out, [0.5, 1.5])
        with pytest.raises(ArgumentError):
            nn.sgd_constant_step(np.ones(2), np.ones(2), 0.0)

    def test_minibatches_cover_all_rows_once(self):
        batches = list(nn.iterate_minibatches(10, 4, np.random.default_rng(0)))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))

    def test_train_network_reduces_loss(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 2))
        y = (x[:, 0] + x[:, 1] > 0).astype(int)
        params = NetworkSpec(2, (4,)).init(np.random.default_rng(1))
        result = nn.train_network(
            params,
            x,
            y,
            BinaryCrossEntropy(),
            epochs=30,
            lr=0.05,
            batch_size=32,
            rng=np.random.default_rng(2),
        )
        assert len(result.history) == 30
        assert result.history[-1] < result.history[0]
        assert result.history[-1] < 0.5
