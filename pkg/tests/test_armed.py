"""
Tests for the ARMED mixed-effects model: layout, forward pass, objective,
gradients and alternating training.
"""

import numpy as np
import pytest
from scipy import stats as sps

from app.core import armed, nn, seeding
from app.core.armed import (
    AlternationMode,
    ArmedLayout,
    ArmedParams,
    ArmedTrainer,
    LossWeights,
    TrainingConfig,
)
from app.core.errors import ArgumentError, ConfigurationError
from app.core.nn import Activation


def _train_rows(data):
    return data.subset(np.flatnonzero(data.seen_mask))


def _random_params(layout, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return ArmedParams(rng.normal(0, scale, layout.size), layout)


def _pure_confound_task(seed, per_cluster=60, n_clusters=4):
    """Sites sit on a circle in the first two features; the outcome rate depends only on site."""
    rng = np.random.default_rng(seed)
    c = np.repeat(np.arange(n_clusters), per_cluster)
    angle = 2.0 * np.pi * c / n_clusters
    x = rng.normal(size=(c.size, 4))
    x[:, 0] += 2.0 * np.cos(angle)
    x[:, 1] += 2.0 * np.sin(angle)
    rate = np.where(c < n_clusters // 2, 0.8, 0.2)
    y = (rng.random(c.size) < rate).astype(np.int64)
    return x, y, np.eye(n_clusters)[c]


# ============================================================================
# Layout
# ============================================================================


class TestLayout:
    def test_segments_tile_the_vector(self, small_layout):
        stops = [small_layout.segment_slice(s) for s in armed.SEGMENTS]
        assert stops[0].start == 0
        for a, b in zip(stops, stops[1:]):
            assert a.stop == b.start
        assert stops[-1].stop == small_layout.size

    def test_re_map_shape(self, small_layout):
        re = small_layout.re.layout()
        assert len(re) == 1
        assert re[0].in_dim == small_layout.n_clusters
        assert re[0].out_dim == small_layout.n_features + 1

    def test_adversary_reads_fe_penultimate(self):
        layout = ArmedLayout.build(6, 3, fe_hidden=(5, 7))
        assert layout.adv.input_dim == 7
        assert layout.adv.output_dim == 3

    def test_layout_dict_round_trip(self, small_layout):
        assert ArmedLayout.from_dict(small_layout.to_dict()) == small_layout

    def test_unknown_segment(self, small_layout):
        with pytest.raises(ArgumentError):
            small_layout.segment_slice("decoder")

    def test_no_clusters_rejected(self):
        with pytest.raises(ConfigurationError):
            ArmedLayout.build(4, 0)

    def test_init_is_deterministic_and_re_starts_at_zero(self, small_layout):
        a = armed.init_armed(small_layout, seed=3, fold=1)
        b = armed.init_armed(small_layout, seed=3, fold=1)
        c = armed.init_armed(small_layout, seed=3, fold=2)
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)
        np.testing.assert_array_equal(a.re.values, 0.0)

    def test_members_get_distinct_inits(self, small_layout):
        a = armed.init_armed(small_layout, seed=3, fold=0, member=0)
        b = armed.init_armed(small_layout, seed=3, fold=0, member=1)
        assert not np.array_equal(a.fe.values, b.fe.values)

    def test_replace_only_touches_segment(self, small_layout):
        p = armed.init_armed(small_layout, seed=0)
        q = p.replace("re", p.re.with_values(np.ones(len(p.re))))
        np.testing.assert_array_equal(q.fe.values, p.fe.values)
        np.testing.assert_array_equal(q.re.values, 1.0)
        np.testing.assert_array_equal(p.re.values, 0.0)


# ============================================================================
# Forward
# ============================================================================


class TestForward:
    def test_zero_random_effects_leave_prediction_unchanged(self, small_data, small_layout):
        p = armed.init_armed(small_layout, seed=1)
        out = armed.mixed_forward(p, small_data.X, small_data.Z)
        np.testing.assert_allclose(out.y_M, out.y_F)
        np.testing.assert_allclose(out.h_R, small_data.X)

    def test_random_effects_modulate_input(self):
        layout = ArmedLayout.build(2, 2, fe_hidden=())
        p = armed.init_armed(layout, seed=0)
        re = p.re.with_values(np.zeros(len(p.re)))
        # cluster 0: slopes (1, -0.5), intercept 0.25
        re.weight(0)[0] = [1.0, -0.5, 0.25]
        p = p.replace("re", re)
        x = np.array([[2.0, 4.0], [2.0, 4.0]])
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = armed.mixed_forward(p, x, z)
        np.testing.assert_allclose(out.h_R, [[4.0, 2.0], [2.0, 4.0]])
        fe_logit = nn.logits(p.fe, out.h_R)[:, 0]
        np.testing.assert_allclose(out.eta_M, fe_logit + [0.25, 0.0])

    def test_z_width_mismatch(self, small_data, small_layout):
        p = armed.init_armed(small_layout, seed=1)
        with pytest.raises(ConfigurationError):
            armed.mixed_forward(p, small_data.X, small_data.Z[:, :2])

    def test_predict_unseen_uses_soft_membership(self, small_data, small_layout):
        p = armed.init_armed(small_layout, seed=1)
        out = armed.predict_unseen(p, small_data.X)
        # zero zpred head: uniform membership
        np.testing.assert_allclose(out.z_used, 1.0 / small_layout.n_clusters)
        np.testing.assert_allclose(out.z_used.sum(axis=1), 1.0)

    def test_predict_unseen_fe_only(self, small_data, small_layout):
        p = _random_params(small_layout, seed=2)
        out = armed.predict_unseen(p, small_data.X, fe_only=True)
        np.testing.assert_allclose(out.y_M, out.y_F)

    def test_adversary_outputs_distribution(self, small_data, small_layout):
        p = armed.init_armed(small_layout, seed=1)
        probs = armed.adversary_forward(p, small_data.X)
        assert probs.shape == (small_data.n_samples, small_layout.n_clusters)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)


# ============================================================================
# Objective and gradients
# ============================================================================


class TestObjective:
    def test_adversary_ce_reported_when_weight_is_zero(self, small_data, small_layout):
        p = armed.init_armed(small_layout, seed=1)
        seen = _train_rows(small_data)
        off = armed.armed_loss(p, seen.X, seen.y, seen.Z, LossWeights(adversary=0))
        on = armed.armed_loss(p, seen.X, seen.y, seen.Z, LossWeights(adversary=0.5))
        assert off.adversary_ce > 0
        assert off.adversary_ce == pytest.approx(on.adversary_ce)
        assert on.total == pytest.approx(off.total - 0.5 * off.adversary_ce)

    def test_breakdown_sums_to_total(self, small_data, small_layout):
        p = _random_params(small_layout, seed=4)
        seen = _train_rows(small_data)
        w = LossWeights(fe=0.7, me=1.3, adversary=0.2, re_penalty=0.05)
        b = armed.armed_loss(p, seen.X, seen.y, seen.Z, w)
        expected = (
            0.7 * b.fe_bce + 1.3 * b.me_bce - 0.2 * b.adversary_ce + 0.05 * b.re_penalty
        )
        assert b.total == pytest.approx(expected)

    def test_gradient_matches_finite_differences(self):
        layout = ArmedLayout.build(
            3, 2, fe_hidden=(4, 3), hidden_activation=Activation.TANH
        )
        p = _random_params(layout, seed=9, scale=0.4)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 3))
        y = rng.integers(0, 2, 8)
        z = np.eye(2)[rng.integers(0, 2, 8)]
        w = LossWeights(adversary=0.3, re_penalty=0.1)
        _, grad = armed.armed_gradients(p, x, y, z, w)

        idx = np.concatenate([p.indices("fe"), p.re_weight_indices()])
        eps = 1e-6
        for i in idx:
            up, down = p.values.copy(), p.values.copy()
            up[i] += eps
            down[i] -= eps
            fd = (
                armed.armed_loss(p.with_values(up), x, y, z, w).total
                - armed.armed_loss(p.with_values(down), x, y, z, w).total
            ) / (2 * eps)
            assert grad[i] == pytest.approx(fd, abs=1e-6)
        # adversary and zpred are untouched by the main objective
        np.testing.assert_array_equal(grad[p.indices("adv", "zpred")], 0.0)

    def test_adversary_gradient_matches_finite_differences(self):
        layout = ArmedLayout.build(3, 3, fe_hidden=(4,), hidden_activation=Activation.TANH)
        p = _random_params(layout, seed=5)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 3))
        z = np.eye(3)[rng.integers(0, 3, 6)]
        ce, grad = armed.adversary_gradients(p, x, z)
        eps = 1e-6
        for i in p.indices("adv"):
            up, down = p.values.copy(), p.values.copy()
            up[i] += eps
            down[i] -= eps
            fd = (
                armed.adversary_gradients(p.with_values(up), x, z)[0]
                - armed.adversary_gradients(p.with_values(down), x, z)[0]
            ) / (2 * eps)
            assert grad[i] == pytest.approx(fd, abs=1e-6)
        assert ce > 0

    def test_empty_batch(self, small_layout):
        p = armed.init_armed(small_layout, seed=0)
        empty = np.zeros((0, small_layout.n_features))
        with pytest.raises(ArgumentError):
            armed.armed_loss(
                p, empty, np.zeros(0), np.zeros((0, small_layout.n_clusters)), LossWeights()
            )


# ============================================================================
# Training
# ============================================================================


class TestTraining:
    def test_reduces_to_plain_network_without_adversary_and_random_effects(
        self, small_data, fast_training
    ):
        """lambda_A = 0 with frozen RE is Adam on the FE net with 2x BCE."""
        seen = _train_rows(small_data)
        layout = ArmedLayout.from_training(seen.n_features, seen.Z.shape[1], fast_training)
        init = armed.init_armed(layout, seed=11, fold=0)
        trainer = ArmedTrainer(
            layout,
            fast_training,
            LossWeights(adversary=0.0),
            seed=11,
            fold=0,
            freeze_re=True,
        )
        fit = trainer.fit(init, seen.X, seen.y, seen.Z)

        plain = nn.train_network(
            init.fe.copy(),
            seen.X,
            seen.y,
            nn.BinaryCrossEntropy(weight=2.0),
            epochs=fast_training.epochs,
            lr=fast_training.lr,
            batch_size=fast_training.batch_size,
            rng=seeding.stream(11, seeding.BATCHES, 0, 0),
        )
        np.testing.assert_allclose(fit.params.fe.values, plain.params.values, atol=1e-10)
        np.testing.assert_allclose(fit.losses, plain.history, atol=1e-10)
        np.testing.assert_array_equal(fit.params.re.values, 0.0)

    def test_training_is_deterministic(self, small_data, fast_training, weights):
        seen = _train_rows(small_data)
        a = armed.train_armed(seen, fast_training, weights, seed=5, fold=1)
        b = armed.train_armed(seen, fast_training, weights, seed=5, fold=1)
        np.testing.assert_array_equal(a.params.values, b.params.values)
        assert a.losses == b.losses
        assert len(a.history) == fast_training.epochs

    def test_random_effects_are_learned(self, small_data, fast_training, weights):
        seen = _train_rows(small_data)
        fit = armed.train_armed(seen, fast_training, weights, seed=5)
        assert np.any(fit.params.re.values != 0.0)

    def test_batch_alternation(self, small_data, weights):
        seen = _train_rows(small_data)
        training = TrainingConfig(
            epochs=2, lr=0.01, batch_size=16, fe_hidden=(4,), alternation=AlternationMode.BATCH
        )
        fit = armed.train_armed(seen, training, weights, seed=0)
        assert len(fit.history) == 2
        assert np.all(np.isfinite(fit.params.values))

    def test_epoch_callback(self, small_data, fast_training, weights):
        seen = _train_rows(small_data)
        layout = ArmedLayout.from_training(seen.n_features, seen.Z.shape[1], fast_training)
        trainer = ArmedTrainer(layout, fast_training, weights, seed=0)
        seen_epochs = []
        trainer.fit(
            armed.init_armed(layout, 0),
            seen.X,
            seen.y,
            seen.Z,
            on_epoch_end=lambda e, p: seen_epochs.append((e, p.values.shape)),
        )
        assert [e for e, _ in seen_epochs] == list(range(fast_training.epochs))

    def test_zero_epochs_return_init(self, small_data, fast_training, weights):
        seen = _train_rows(small_data)
        layout = ArmedLayout.from_training(seen.n_features, seen.Z.shape[1], fast_training)
        init = armed.init_armed(layout, 0)
        trainer = ArmedTrainer(layout, fast_training, weights, seed=0)
        fit = trainer.fit(init, seen.X, seen.y, seen.Z, epochs=0)
        np.testing.assert_array_equal(fit.params.values, init.values)
        assert fit.history == []

    def test_unknown_optimizer(self, small_layout, fast_training, weights):
        with pytest.raises(ConfigurationError):
            ArmedTrainer(small_layout, fast_training, weights, seed=0, optimizer="rmsprop")

    def test_bad_dropout_rate(self, small_layout, fast_training, weights):
        with pytest.raises(ArgumentError):
            ArmedTrainer(small_layout, fast_training, weights, seed=0, dropout_rate=1.0)

    @pytest.mark.slow
    @pytest.mark.timeout(600)
    def test_adversary_weight_raises_held_out_adversary_loss(self):
        """Outcome depends on site alone; a heavier penalty hides the site from the FE net."""
        training = TrainingConfig(epochs=30, lr=0.01, batch_size=32, fe_hidden=(8, 8))
        layout = ArmedLayout.from_training(4, 4, training)
        levels = (0.0, 0.1, 1.0)
        held_out = {lam: [] for lam in levels}
        for seed in range(10):
            x, y, z = _pure_confound_task(seed)
            xt, yt, zt = _pure_confound_task(100 + seed)
            for lam in levels:
                w = LossWeights(adversary=lam)
                trainer = ArmedTrainer(layout, training, w, seed=seed)
                fit = trainer.fit(armed.init_armed(layout, seed), x, y, z)
                held_out[lam].append(armed.armed_loss(fit.params, xt, yt, zt, w).adversary_ce)
        ce = {lam: np.array(v) for lam, v in held_out.items()}
        assert np.mean(ce[0.1] - ce[0.0]) >= -0.05
        assert np.mean(ce[1.0] - ce[0.1]) >= -0.05
        assert sps.ttest_rel(ce[1.0], ce[0.0], alternative="greater").pvalue < 0.05


class TestZPredictor:
    def test_single_cluster_gives_constant_predictor(self, small_layout, fast_training):
        p = armed.init_armed(small_layout, seed=0)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, small_layout.n_features))
        z = np.zeros((10, small_layout.n_clusters))
        z[:, 2] = 1.0
        zp = armed.train_zpredictor(p, x, z, fast_training, seed=0)
        probs = nn.forward(zp, x)
        np.testing.assert_allclose(probs[:, 2], 1.0, atol=1e-9)

    def test_learns_cluster_membership(self, small_data, weights):
        seen = _train_rows(small_data)
        training = TrainingConfig(epochs=40, lr=0.05, batch_size=16, fe_hidden=(4,))
        layout = ArmedLayout.from_training(seen.n_features, seen.Z.shape[1], training)
        p = armed.init_armed(layout, seed=0)
        zp = armed.train_zpredictor(p, seen.X, seen.Z, training, seed=0)
        probs = nn.forward(zp, seen.X)
        # probes carry a site signature, so the classifier beats chance
        acc = np.mean(probs.argmax(axis=1) == seen.Z.argmax(axis=1))
        assert acc > 1.0 / layout.n_clusters
