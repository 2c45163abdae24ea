"""Network forward/backward correctness, training behavior, and evaluation metrics."""

import numpy as np
import pytest

from siterank.predictor.lookup import build_lookup
from siterank.predictor.metrics import evaluate
from siterank.predictor.model import (
    PredictorConfig,
    Standardizer,
    assemble_samples,
    load_predictor,
    save_predictor,
    train_predictor,
)
from siterank.predictor.network import (
    FeedForwardNet,
    Head,
    NetworkError,
    TrainConfig,
    TrainingDivergedError,
    TwoStageNet,
    gradient_check,
    train_network,
)
from siterank.dataset import orient_and_scale
from siterank.ranking import run_sweep

from .conftest import small_spec, synthetic_table


class TestForward:
    def test_zero_weights_yield_activated_bias(self):
        net = FeedForwardNet.create(3, [4], [Head("out", 2, "sigmoid")], "relu", seed=1)
        for W in net.weights:
            W[:] = 0.0
        net.biases[0][:] = 0.5
        net.biases[1][:] = np.array([0.0, 2.0])
        out = net.forward(np.zeros(3))
        assert np.allclose(out, [0.5, 1.0 / (1.0 + np.exp(-2.0))])

    def test_identity_single_layer_linear(self):
        net = FeedForwardNet.create(3, [], [Head("out", 3, "linear")], seed=0)
        net.weights[0][:] = np.eye(3)
        net.biases[0][:] = 0.0
        x = np.array([0.3, -1.2, 9.0])
        assert np.array_equal(net.forward(x), x)

    def test_fixed_params_fixed_input_byte_identical(self, rng):
        net = FeedForwardNet.create(4, [8, 8], [Head("out", 3, "softmax")], "tanh", seed=42)
        x = rng.normal(size=(6, 4))
        outs = [net.forward(x).tobytes() for _ in range(5)]
        assert len(set(outs)) == 1

    def test_same_seed_same_init(self):
        a = FeedForwardNet.create(4, [8], [Head("out", 2)], seed=7)
        b = FeedForwardNet.create(4, [8], [Head("out", 2)], seed=7)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_non_finite_reports_layer(self):
        net = FeedForwardNet.create(2, [4], [Head("out", 1)], seed=0)
        net.weights[0][0, 0] = np.inf
        with pytest.raises(NetworkError, match="layer 0"):
            net.forward(np.ones(2))

    def test_softmax_head_sums_to_one(self, rng):
        net = FeedForwardNet.create(3, [5], [Head("imp", 6, "softmax")], seed=3)
        out = net.forward(rng.normal(size=(10, 3)))
        assert np.allclose(out.sum(axis=1), 1.0)
        assert (out >= 0).all()

    def test_bce_requires_sigmoid(self):
        with pytest.raises(NetworkError, match="sigmoid"):
            Head("bad", 2, "linear", "bce")


class TestGradientCheck:
    def heads(self):
        return [
            Head("reg", 3, "linear", "se", 1.0),
            Head("bits", 2, "sigmoid", "bce", 0.7),
            Head("simplex", 4, "softmax", "se", 1.3),
        ]

    def targets(self, rng, n):
        return {
            "reg": rng.normal(size=(n, 3)),
            "bits": rng.integers(0, 2, (n, 2)).astype(float),
            "simplex": rng.dirichlet(np.ones(4), n),
        }

    @pytest.mark.parametrize("layers", [1, 2, 3, 4, 5])
    @pytest.mark.parametrize("activation", ["relu", "tanh", "sigmoid", "linear"])
    def test_all_layer_counts_and_activations(self, layers, activation):
        rng = np.random.default_rng(100 + layers)
        net = FeedForwardNet.create(4, [8] * (layers - 1), self.heads(), activation, seed=layers * 7 + 1)
        err = gradient_check(net, rng.normal(size=(5, 4)), self.targets(rng, 5), 1e-5)
        assert err < 1e-4

    def test_small_two_layer_net(self):
        rng = np.random.default_rng(0)
        net = FeedForwardNet.create(8, [8], [Head("out", 8)], "tanh", seed=5)
        err = gradient_check(net, rng.normal(size=(4, 8)), {"out": rng.normal(size=(4, 8))}, 1e-5)
        assert err < 1e-4

    def test_zero_loss_sample_has_vanishing_gradients(self):
        net = FeedForwardNet.create(2, [], [Head("out", 2, "linear")], seed=1)
        net.weights[0][:] = np.eye(2)
        net.biases[0][:] = 0.0
        x = np.array([[0.4, -0.2]])
        _, _, grads, _ = net.loss_and_grads(x, {"out": x})
        assert all(np.abs(g).max() < 1e-12 for g in grads)
        assert gradient_check(net, x, {"out": x}, 1e-5) < 1e-4

    def test_corrupted_backward_pass_fails_the_check(self):
        rng = np.random.default_rng(9)
        net = FeedForwardNet.create(4, [8], [Head("out", 3)], "tanh", seed=2)

        class CorruptedBackward:
            def __init__(self, inner):
                self.inner = inner

            def get_params(self):
                return self.inner.get_params()

            def set_params(self, params):
                self.inner.set_params(params)

            def loss_and_grads(self, X, targets):
                loss, per_head, grads, dx = self.inner.loss_and_grads(X, targets)
                grads = [g * 1.5 for g in grads]
                return loss, per_head, grads, dx

        err = gradient_check(CorruptedBackward(net), rng.normal(size=(5, 4)), {"out": rng.normal(size=(5, 3))}, 1e-5)
        assert err > 1e-2

    def test_two_stage_joint_gradient(self):
        rng = np.random.default_rng(3)
        stage1 = FeedForwardNet.create(3, [6], [Head("cont", 2), Head("bin", 2, "sigmoid", "bce")], "tanh", seed=11)
        stage2 = FeedForwardNet.create(7, [6], [Head("score", 1), Head("imp", 3, "softmax")], "tanh", seed=12)
        model = TwoStageNet(stage1, stage2)
        targets = {
            "cont": rng.normal(size=(4, 2)),
            "bin": rng.integers(0, 2, (4, 2)).astype(float),
            "score": rng.random((4, 1)),
            "imp": rng.dirichlet(np.ones(3), 4),
        }
        assert gradient_check(model, rng.normal(size=(4, 3)), targets, 1e-5) < 1e-4

    def test_epsilon_bounds_enforced(self):
        net = FeedForwardNet.create(2, [], [Head("out", 1)], seed=0)
        with pytest.raises(NetworkError):
            gradient_check(net, np.ones((1, 2)), {"out": np.ones((1, 1))}, 1e-7)


class TestTraining:
    def test_linear_toy_matches_least_squares(self, rng):
        X = rng.uniform(-1, 1, size=(40, 1))
        y = 2.5 * X - 0.7
        net = FeedForwardNet.create(1, [], [Head("out", 1)], seed=2)
        train_network(net, X, {"out": y}, TrainConfig(learning_rate=0.2, epochs=500, batch_size=8, patience=None, seed=0))
        # closed-form oracle: exact least squares on the same design
        design = np.hstack([X, np.ones_like(X)])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        oracle_mse = float(np.mean((design @ coef - y) ** 2))
        net_mse = evaluate(y, net.forward(X)).mse
        assert oracle_mse < 1e-20
        assert net_mse < 1e-4

    def test_early_stopping_restores_best_weights(self, rng):
        X = rng.normal(size=(30, 2))
        y = X @ np.array([[1.0], [-2.0]]) + 0.3
        X_val = rng.normal(size=(10, 2))
        y_val = X_val @ np.array([[1.0], [-2.0]]) + 0.3
        net = FeedForwardNet.create(2, [4], [Head("out", 1)], seed=4)
        # destructive learning rate makes validation regress after a few epochs
        config = TrainConfig(learning_rate=0.8, epochs=400, batch_size=4, patience=25, seed=1)
        history = train_network(net, X, {"out": y}, config, X_val=X_val, targets_val={"out": y_val})
        if history.stopped_early:
            assert len(history.epochs) < 400
            assert history.best_epoch <= len(history.epochs) - 1
        watched = [e["val_loss"] for e in history.epochs]
        from siterank.predictor.network import evaluate_loss

        assert evaluate_loss(net, X_val, {"out": y_val}) == pytest.approx(min(watched))

    def test_patience_counts_consecutive_non_improvement(self, rng):
        X = rng.normal(size=(12, 1))
        y = np.zeros((12, 1))
        net = FeedForwardNet.create(1, [], [Head("out", 1)], seed=0)
        # zero learning rate: no improvement after epoch 0, so exactly 1 + patience epochs run
        config = TrainConfig(learning_rate=0.0, epochs=100, batch_size=4, patience=5, seed=0)
        history = train_network(net, X, {"out": y}, config)
        assert history.stopped_early
        assert len(history.epochs) == 6

    def test_divergence_raises_with_epoch(self, rng):
        X = rng.normal(size=(16, 2)) * 10
        y = rng.normal(size=(16, 1)) * 10
        net = FeedForwardNet.create(2, [16, 16], [Head("out", 1)], seed=3)
        with pytest.raises(TrainingDivergedError):
            train_network(net, X, {"out": y}, TrainConfig(learning_rate=50.0, epochs=50, batch_size=4, patience=None, seed=0))

    def test_lr_decay_applied_per_epoch(self, rng):
        X = rng.normal(size=(8, 1))
        y = X.copy()
        net = FeedForwardNet.create(1, [], [Head("out", 1)], seed=0)
        config = TrainConfig(learning_rate=0.1, lr_decay=0.5, epochs=3, batch_size=8, patience=None, seed=0)
        history = train_network(net, X, {"out": y}, config)
        assert [e["lr"] for e in history.epochs] == [0.1, 0.05, 0.025]


class TestEvaluate:
    def test_perfect_prediction(self):
        m = evaluate([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (m.mse, m.rmse, m.mae, m.r2) == (0.0, 0.0, 0.0, 1.0)

    def test_hand_derived_swap_case(self):
        m = evaluate([0.0, 1.0], [1.0, 0.0])
        assert m.mse == 1.0
        assert m.rmse == 1.0
        assert m.mae == 1.0
        assert m.r2 == -3.0

    def test_mean_predictor_scores_zero(self, rng):
        y = rng.normal(size=50)
        m = evaluate(y, np.full(50, y.mean()))
        assert m.r2 == pytest.approx(0.0, abs=1e-12)

    def test_rmse_squared_is_mse(self, rng):
        for _ in range(25):
            y = rng.normal(size=30)
            p = rng.normal(size=30)
            m = evaluate(y, p)
            assert m.rmse**2 == pytest.approx(m.mse, rel=1e-15)

    def test_zero_variance_targets_flagged(self):
        m = evaluate([2.0, 2.0, 2.0], [2.0, 2.1, 1.9])
        assert np.isnan(m.r2)
        assert not m.r2_defined

    def test_shape_and_length_guards(self):
        with pytest.raises(ValueError):
            evaluate([1.0], [1.0])
        with pytest.raises(ValueError):
            evaluate([1.0, 2.0], [[1.0, 2.0]])


class TestEndToEndPredictor:
    @pytest.fixture(scope="class")
    def trained(self):
        rng = np.random.default_rng(515)
        spec = small_spec(5)
        table = synthetic_table(rng, 120, spec)
        matrix = orient_and_scale(table)
        result = run_sweep(matrix)
        samples = assemble_samples(table, result)
        lookup = build_lookup(table, spec)
        config = PredictorConfig(
            mode="lookup",
            hidden2=(24,),
            train=TrainConfig(learning_rate=0.05, epochs=300, batch_size=16, patience=None, seed=7),
        )
        predictor, history, split = train_predictor(samples, spec, config, lookup=lookup)
        return table, samples, predictor, history, split

    def test_training_site_objectives_echoed(self, trained):
        table, samples, predictor, _, _ = trained
        objectives, score, importance = predictor.predict(samples.x[0])
        assert np.array_equal(objectives, samples.y1[0])

    def test_importances_form_a_distribution(self, trained):
        _, samples, predictor, _, _ = trained
        _, _, importance = predictor.predict_batch(samples.x[:20])
        assert np.allclose(importance.sum(axis=1), 1.0)
        assert (importance >= 0).all()

    def test_train_fit_beats_test_fit(self, trained):
        _, samples, predictor, _, split = trained
        train_idx = np.asarray(split["train_idx"])
        test_idx = np.asarray(split["test_idx"])
        _, score, imp = predictor.predict_batch(samples.x)
        y2_pred = np.concatenate([score[:, None], imp], axis=1)
        r2_train = evaluate(samples.y2[train_idx], y2_pred[train_idx]).r2
        r2_test = evaluate(samples.y2[test_idx], y2_pred[test_idx]).r2
        assert r2_train > r2_test
        assert np.isfinite(r2_train) and np.isfinite(r2_test)

    def test_save_load_round_trip_bitwise(self, trained, tmp_path):
        _, samples, predictor, _, _ = trained
        path = tmp_path / "model.npz"
        save_predictor(path, predictor)
        again = load_predictor(path)
        o1, s1, i1 = predictor.predict_batch(samples.x[:10])
        o2, s2, i2 = again.predict_batch(samples.x[:10])
        assert np.array_equal(o1, o2) and np.array_equal(s1, s2) and np.array_equal(i1, i2)

    def test_model_file_is_reproducible(self, trained, tmp_path):
        _, _, predictor, _, _ = trained
        a, b = tmp_path / "a.npz", tmp_path / "b.npz"
        save_predictor(a, predictor)
        save_predictor(b, predictor)
        assert a.read_bytes() == b.read_bytes()

    def test_twostage_mode_trains_and_predicts(self):
        rng = np.random.default_rng(99)
        spec = small_spec(4)
        table = synthetic_table(rng, 60, spec)
        result = run_sweep(orient_and_scale(table))
        samples = assemble_samples(table, result)
        config = PredictorConfig(
            mode="twostage",
            hidden1=(12,),
            hidden2=(12,),
            train=TrainConfig(learning_rate=0.01, epochs=60, batch_size=8, patience=None, seed=5),
        )
        predictor, history, _ = train_predictor(samples, spec, config)
        objectives, score, importance = predictor.predict(samples.x[0])
        assert objectives.shape == (4,)
        assert np.isclose(importance.sum(), 1.0)
        assert np.isfinite(score)
        assert len(history.epochs) == 60

    def test_binary_targets_validated(self):
        rng = np.random.default_rng(1)
        spec = small_spec(4)
        table = synthetic_table(rng, 20, spec)
        result = run_sweep(orient_and_scale(table))
        samples = assemble_samples(table, result)
        samples.y1[0, spec.binary_columns()[0]] = 0.4
        with pytest.raises(Exception, match="binary"):
            train_predictor(samples, spec, PredictorConfig(mode="twostage"))


class TestStandardizer:
    def test_round_trip(self, rng):
        X = rng.normal(3.0, 2.5, size=(40, 3))
        std = Standardizer.fit(X)
        assert np.allclose(std.inverse(std.transform(X)), X)
        assert np.allclose(std.transform(X).mean(axis=0), 0.0, atol=1e-12)

    def test_constant_column_safe(self):
        X = np.array([[1.0, 5.0], [1.0, 7.0]])
        std = Standardizer.fit(X)
        out = std.transform(X)
        assert np.all(np.isfinite(out))
        assert np.allclose(out[:, 0], 0.0)
