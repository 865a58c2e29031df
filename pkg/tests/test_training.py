import numpy as np
import pytest

from backend.core import checkpoint, training
from backend.core.autodiff import Tensor
from backend.core.baselines import LastFrameLinearBaseline, MidpointBaseline
from backend.core.dataset import FeatureScaler, generate_session, make_windows, stack_windows
from backend.core.errors import DataError, NumericError
from backend.core.kinematics import generate_cloud
from backend.core.training import (
    Adam,
    batch_gradients,
    evaluate,
    evaluate_predictions,
    load_model,
    lr_at_epoch,
    save_model,
    train,
)
from backend.core.transformer import PoseTransformer
from backend.models import PERSON_RANGES, CloudConfig, JointLimits, ModelConfig, SynthConfig, TrainConfig


def windows(model_config, duration=120, persons=(1,), seed=0):
    synth = SynthConfig(persons={p: PERSON_RANGES[p] for p in persons}, duration_frames=duration, seed=seed)
    pairs = []
    for pid in persons:
        pairs += make_windows(generate_session(pid, synth), model_config.l_out, stride=2)
    x, y = stack_windows(pairs)
    return FeatureScaler.fit(x).transform(x), y


class TestSchedule:
    @pytest.mark.parametrize("epoch,expected", [(0, 1e-3), (24, 1e-3), (25, 5e-4), (51, 2.5e-4)])
    def test_step_decay(self, epoch, expected):
        assert lr_at_epoch(TrainConfig(), epoch) == pytest.approx(expected)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at_epoch(TrainConfig(), -1)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        param = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        optimizer = Adam({"p": param}, TrainConfig())
        optimizer.step({"p": np.array([0.5, -3.0])}, lr=0.01)
        np.testing.assert_allclose(param.data, [0.99, -1.99], atol=1e-9)

    def test_minimises_quadratic(self):
        param = Tensor(np.array([3.0]), requires_grad=True)
        optimizer = Adam({"p": param}, TrainConfig())
        for _ in range(2000):
            optimizer.step({"p": 2.0 * param.data}, lr=0.05)
        assert abs(param.data[0]) < 0.1


class TestGradients:
    def test_shards_match_single_batch(self, tiny_model_config):
        model = PoseTransformer(tiny_model_config)
        x, y = windows(tiny_model_config)
        x, y = x[:6], y[:6]
        cfg = TrainConfig()
        single, single_terms = batch_gradients(model, x, y, cfg, JointLimits(), [np.random.default_rng(0)])
        rngs = [np.random.default_rng(i) for i in range(3)]
        sharded, sharded_terms = batch_gradients(model, x, y, cfg, JointLimits(), rngs)
        for name in single:
            np.testing.assert_allclose(sharded[name], single[name], rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(sharded_terms, single_terms, rtol=1e-12)


class TestTrain:
    def test_history_and_determinism(self, tiny_model_config):
        x, y = windows(tiny_model_config)
        cfg = TrainConfig(epochs=3, batch_size=8, patience=None)
        first = train(PoseTransformer(tiny_model_config), x, y, cfg)
        second = train(PoseTransformer(tiny_model_config), x, y, cfg)
        assert [h.epoch for h in first.history] == [0, 1, 2]
        assert first.losses() == second.losses()
        assert first.best_epoch == 2
        for name, value in first.state.items():
            np.testing.assert_array_equal(value, second.state[name])

    def test_parallel_shards_are_deterministic(self, tiny_model_config):
        x, y = windows(tiny_model_config)
        cfg = TrainConfig(epochs=2, batch_size=8, patience=None, parallel_shards=2)
        first = train(PoseTransformer(tiny_model_config), x, y, cfg)
        second = train(PoseTransformer(tiny_model_config), x, y, cfg)
        assert first.losses() == second.losses()

    def test_early_stopping_restores_best(self, tiny_model_config):
        x, y = windows(tiny_model_config)
        # the validation targets are unrelated noise, so validation stalls quickly
        noise = np.random.default_rng(0).uniform(-1.0, 1.0, size=y[:8].shape)
        cfg = TrainConfig(epochs=40, batch_size=8, patience=2, learning_rate=1e-2)
        model = PoseTransformer(tiny_model_config)
        result = train(model, x, y, cfg, validation=(x[:8], noise))
        val = [h.val_mse for h in result.history]
        assert result.history[result.best_epoch].val_mse == min(val)
        assert result.stopped_early == (len(result.history) < 40)
        for name, value in result.state.items():
            np.testing.assert_array_equal(model.params[name].data, value)

    def test_nan_target_names_epoch_and_batch(self, tiny_model_config):
        x, y = windows(tiny_model_config)
        y = np.full_like(y, np.nan)
        with pytest.raises(NumericError) as info:
            train(PoseTransformer(tiny_model_config), x, y, TrainConfig(epochs=1, batch_size=8, patience=None))
        assert info.value.epoch == 0
        assert info.value.batch == 0
        assert info.value.op_id == "sub"

    def test_empty_set(self, tiny_model_config):
        model = PoseTransformer(tiny_model_config)
        with pytest.raises(DataError):
            train(model, np.zeros((0, model.config.l_in, 8)), np.zeros((0, model.config.l_out, 9)))

    @pytest.mark.slow
    def test_overfits_small_set(self):
        config = ModelConfig(d_model=32, n_heads=4, n_encoder_layers=1, n_decoder_layers=1,
                             ffn_multiplier=2, dropout=0.0, l_out=4)
        x, y = windows(config, duration=140)
        x, y = x[:64], y[:64]
        cfg = TrainConfig(epochs=200, batch_size=32, patience=None, lr_step_epochs=100)
        result = train(PoseTransformer(config), x, y, cfg)
        assert result.history[-1].mse < 0.1 * result.history[0].mse
        assert result.history[-1].bio < 1e-4
        smoothed = np.convolve(result.losses(), np.ones(10) / 10, mode="valid")
        assert np.all(np.diff(smoothed) <= 0.05 * smoothed[:-1])


class TestEvaluate:
    def test_ground_truth_scores_zero(self, rng):
        y = rng.uniform(-0.3, 0.3, size=(4, 5, 9))
        joint, vertex = evaluate_predictions(y, y, cloud=generate_cloud(CloudConfig(n_vertices=30)))
        assert joint.avg == 0.0
        assert vertex.avg == 0.0

    def test_smallest_cloud_scores_every_joint(self, rng):
        y = rng.uniform(-0.3, 0.3, size=(4, 5, 9))
        joint, vertex = evaluate_predictions(y, y + 0.01, cloud=generate_cloud(CloudConfig(n_vertices=3)))
        assert min(vertex.neck, vertex.head, vertex.jaw) > 0.0
        assert joint.avg > 0.0

    def test_model_scores_are_positive(self, tiny_model_config):
        x, y = windows(tiny_model_config)
        joint, vertex = evaluate(
            PoseTransformer(tiny_model_config), x, y, cloud=generate_cloud(CloudConfig(n_vertices=30))
        )
        assert joint.avg > 0.0
        assert vertex.avg > 0.0


class TestCheckpoint:
    def test_model_round_trip(self, tmp_path, tiny_model_config, rng):
        model = PoseTransformer(tiny_model_config.model_copy(update={"dropout": 0.25, "seed": 4}))
        scaler = FeatureScaler.fit(rng.normal(size=(20, 8)))
        path = save_model(tmp_path / "model.imph", model, scaler)
        loaded, loaded_scaler = load_model(path)
        assert loaded.config == model.config
        x = rng.normal(size=(2, model.config.l_in, 8))
        np.testing.assert_array_equal(loaded.predict(x), model.predict(x))
        np.testing.assert_array_equal(loaded_scaler.mean, scaler.mean)

    def test_missing_config_record(self, tmp_path):
        path = checkpoint.save_arrays(tmp_path / "bare.imph", {"w": np.ones(2)})
        with pytest.raises(DataError):
            load_model(path)


class TestBaselines:
    def test_midpoint_of_training_range(self):
        y = np.zeros((2, 3, 9))
        y[0, :, 0], y[1, :, 0] = -0.4, 0.2
        prediction = MidpointBaseline().fit(None, y).predict(np.zeros((5, 27, 8)))
        assert prediction.shape == (5, 3, 9)
        np.testing.assert_allclose(prediction[..., 0], -0.1)

    def test_unfitted_midpoint_uses_limits(self):
        prediction = MidpointBaseline(JointLimits(), l_out=2).predict(np.zeros((1, 18, 8)))
        np.testing.assert_allclose(prediction[0, 0], JointLimits().midpoints())

    def test_linear_recovers_linear_map(self, rng):
        x = rng.normal(size=(40, 18, 8))
        weights = rng.normal(size=(8, 2 * 9))
        y = (x[:, -1, :] @ weights + 0.3).reshape(40, 2, 9)
        baseline = LastFrameLinearBaseline().fit(x, y)
        np.testing.assert_allclose(baseline.predict(x), y, atol=1e-9)

    def test_linear_requires_fit(self):
        with pytest.raises(DataError):
            LastFrameLinearBaseline().predict(np.zeros((1, 9, 8)))


def test_config_vector_round_trip():
    config = ModelConfig(d_model=24, n_heads=3, dropout=0.2, l_out=6, sequential_decode=True, seed=5)
    assert training.config_from_vector(training.config_vector(config)) == config
