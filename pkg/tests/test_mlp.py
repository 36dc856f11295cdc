import numpy as np
import pytest

from attribution import shapley_exact
from exceptions import ConfigError, DimensionError, TrainingError
from game_core import BaselineVector, GameSpec
from mlp import (
    Dataset,
    Layer,
    MlpBackend,
    MlpModel,
    Target,
    init_model,
    load_model,
    make_blobs,
    save_model,
    train,
    training_accuracy,
)


def identity_model(n=2):
    return MlpModel((Layer(np.eye(n), np.zeros(n), "identity"), Layer(np.eye(n), np.zeros(n), "identity")))


def input_fd(model, x, target, h=1e-6):
    out = np.zeros(x.size)
    for j in range(x.size):
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        out[j] = (model.input_gradient_batch(up[None, :], target)[0][0]
                  - model.input_gradient_batch(down[None, :], target)[0][0]) / (2 * h)
    return out


class TestForward:
    def test_identity(self):
        logits, h = identity_model().forward([0.3, 0.7])
        assert logits.tolist() == [0.3, 0.7]
        assert h.tolist() == [0.3, 0.7]

    def test_zero_weights_give_biases(self):
        model = MlpModel((Layer(np.zeros((3, 2)), np.zeros(3)), Layer(np.zeros((2, 3)), [0.5, -1.0], "identity")))
        logits, h = model.forward([0.9, 0.1])
        assert logits.tolist() == [0.5, -1.0]
        assert h.shape == (3,)

    def test_layer_chain(self):
        with pytest.raises(DimensionError):
            MlpModel((Layer(np.zeros((3, 2)), np.zeros(3)), Layer(np.zeros((2, 4)), np.zeros(2))))

    def test_needs_hidden_layer(self):
        with pytest.raises(ConfigError):
            MlpModel((Layer(np.eye(2), np.zeros(2)),))

    def test_input_width(self):
        with pytest.raises(DimensionError):
            identity_model().forward([0.1, 0.2, 0.3])

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            Layer(np.eye(2), np.zeros(2), "gelu")


class TestTraining:
    def test_blobs_separable(self):
        data = make_blobs(seed=0)
        model = train(data, [8], epochs=200, lr=0.1, seed=0)
        assert training_accuracy(model, data) >= 0.95
        assert len(model.loss_trace) == 200
        assert model.loss_trace[-1] < model.loss_trace[0]

    def test_zero_epochs(self):
        data = make_blobs(per_class=10, seed=1)
        model = train(data, [4], epochs=0, seed=2)
        assert model.loss_trace == ()
        initial = init_model([2, 4, 2], "relu", 2)
        assert all(np.array_equal(a.w, b.w) for a, b in zip(model.layers, initial.layers))

    def test_seeded(self):
        data = make_blobs(per_class=20, seed=3)
        first = train(data, [5], epochs=10, seed=4)
        second = train(data, [5], epochs=10, seed=4)
        assert first.loss_trace == second.loss_trace
        assert all(np.array_equal(a.w, b.w) for a, b in zip(first.layers, second.layers))

    def test_divergence(self):
        data = make_blobs(per_class=20, seed=3)
        with pytest.raises(TrainingError):
            train(data, [5], epochs=50, lr=1e8, activation="identity")

    def test_bad_arguments(self):
        data = make_blobs(per_class=5)
        with pytest.raises(ConfigError):
            train(data, [], epochs=1)
        with pytest.raises(ConfigError):
            train(data, [3], epochs=1, lr=0.0)

    def test_blob_arguments(self):
        with pytest.raises(ConfigError):
            make_blobs(classes=3, features=2)
        blobs = make_blobs(per_class=7, features=3, classes=3, seed=1)
        assert len(blobs) == 21 and blobs.classes == 3
        assert blobs.features.min() >= 0.0 and blobs.features.max() <= 1.0


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_targets_match_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = init_model([4, 6, 5, 3], "sigmoid", seed)
        x = rng.uniform(size=4)
        targets = [Target.logit(1), Target.logodds(2), Target.feature_l1(rng.uniform(size=5))]
        for target in targets:
            analytic = model.input_gradient(x, target)
            assert np.allclose(analytic, input_fd(model, x, target), rtol=1e-5, atol=1e-7)

    def test_label_probability(self):
        model = init_model([3, 4, 2], "sigmoid", 8)
        x = np.array([0.2, 0.5, 0.9])
        _, grad = model.label_gradient_batch(x[None, :], 1)
        h = 1e-6
        numeric = [(model.probabilities((x + h * e)[None, :])[0, 1] - model.probabilities((x - h * e)[None, :])[0, 1])
                   / (2 * h) for e in np.eye(3)]
        assert np.allclose(grad[0], numeric, atol=1e-8)

    def test_single_sigmoid_unit(self):
        w = np.array([[0.7, -1.3]])
        model = MlpModel((Layer(w, [0.0], "sigmoid"), Layer([[1.0]], [0.0], "identity")))
        x = np.array([0.4, 0.2])
        s = 1.0 / (1.0 + np.exp(-(w[0] @ x)))
        assert np.allclose(model.input_gradient(x, Target.logit(0)), s * (1 - s) * w[0])

    def test_logodds_at_even_odds(self):
        model = identity_model()
        x = np.array([0.3, 0.3])
        p, dp = model.label_gradient_batch(x[None, :], 0)
        assert p[0] == pytest.approx(0.5)
        assert np.allclose(model.input_gradient(x, Target.logodds(0)), 4 * dp[0])

    def test_class_range(self):
        with pytest.raises(ConfigError):
            identity_model().input_gradient([0.1, 0.2], Target.logit(5))

    def test_reference_width(self):
        with pytest.raises(DimensionError):
            identity_model().input_gradient([0.1, 0.2], Target.feature_l1([0.0]))


class TestPersistence:
    def test_weights_file(self, tmp_path):
        model = init_model([3, 4, 2], "sigmoid", 5)
        path = str(tmp_path / "weights.json")
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.hidden_tap == model.hidden_tap
        x = np.array([[0.1, 0.5, 0.8]])
        assert np.array_equal(loaded.forward_batch(x)[0], model.forward_batch(x)[0])

    def test_missing_weights(self, tmp_path):
        with pytest.raises(ConfigError):
            load_model(str(tmp_path / "absent.json"))

    def test_dataset_csv(self, tmp_path):
        data = make_blobs(per_class=6, seed=2)
        path = str(tmp_path / "blobs.csv")
        data.to_csv(path)
        loaded = Dataset.from_csv(path)
        assert loaded.columns == ("x1", "x2")
        assert np.allclose(loaded.feature_means, data.feature_means)
        assert loaded.labels.tolist() == data.labels.tolist()

    def test_dataset_non_numeric(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,label\nhigh,0\nlow,1\n")
        with pytest.raises(ConfigError):
            Dataset.from_csv(str(path))


class TestBackend:
    def test_game_over_classifier(self):
        data = make_blobs(per_class=30, seed=6)
        model = train(data, [6], epochs=30, seed=6)
        backend = MlpBackend(model, 1)
        game = GameSpec(backend, [0.2, 0.8], BaselineVector(data.feature_means, np.array([[0.0, 1.0]] * 2)),
                        "logodds")
        report = shapley_exact(game)
        assert abs(report.efficiency_gap) <= 1e-9
        _, grad = game.baseline_gradient_bits(np.arange(4))
        assert grad.shape == (4, 2)
        assert np.all(grad[3] == 0.0)

    def test_features(self):
        backend = MlpBackend(init_model([2, 3, 2], seed=1), 0)
        assert backend.features_batch(np.zeros((4, 2))).shape == (4, 3)

    def test_label_range(self):
        with pytest.raises(ConfigError):
            MlpBackend(identity_model(), 2)
