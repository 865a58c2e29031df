import numpy as np
import pytest

from backend.core import autodiff as ad
from backend.core.autodiff import Tensor, grad_check
from backend.core.errors import InvalidInputError, ShapeError
from backend.core.transformer import PoseTransformer, sinusoidal_encoding
from backend.models import JointLimits, ModelConfig


@pytest.fixture
def model(tiny_model_config):
    return PoseTransformer(tiny_model_config)


def inputs(rng, config, batch=2):
    return rng.normal(size=(batch, config.l_in, 8))


class TestShapes:
    def test_default_embedding_shape(self, rng):
        model = PoseTransformer(ModelConfig(dropout=0.0))
        with ad.no_grad():
            assert model.embed_input(rng.normal(size=(1, 90, 8))).shape == (1, 90, 64)

    @pytest.mark.parametrize("batch,l_out", [(1, 1), (2, 4), (3, 10)])
    def test_forward_shape(self, rng, batch, l_out):
        config = ModelConfig(d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1,
                             ffn_multiplier=2, dropout=0.0, l_out=l_out)
        model = PoseTransformer(config)
        assert model.predict(inputs(rng, config, batch)).shape == (batch, l_out, 9)

    def test_wrong_input_length(self, model, rng):
        with pytest.raises(ShapeError):
            model.predict(rng.normal(size=(2, model.config.l_in + 1, 8)))

    def test_wrong_feature_width(self, model, rng):
        with pytest.raises(ShapeError):
            model.embed_input(rng.normal(size=(2, model.config.l_in, 7)))

    def test_non_finite_input(self, model, rng):
        x = inputs(rng, model.config)
        x[0, 0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            model.predict(x)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=10, n_heads=4)


class TestEmbedding:
    def test_zero_input_is_position_plus_bias(self, model):
        with ad.no_grad():
            out = model.embed_input(np.zeros((1, model.config.l_in, 8))).data
        expected = sinusoidal_encoding(model.config.l_in, model.config.d_model) + model.params["input_proj.bias"].data
        np.testing.assert_allclose(out[0], expected, atol=1e-12)

    def test_constant_input_differs_only_by_position(self, model):
        with ad.no_grad():
            out = model.embed_input(np.full((1, model.config.l_in, 8), 0.7)).data[0]
        residual = out - sinusoidal_encoding(model.config.l_in, model.config.d_model)
        np.testing.assert_allclose(residual, np.broadcast_to(residual[0], residual.shape), atol=1e-12)


class TestDeterminismAndEquivariance:
    def test_bit_identical_without_dropout(self, model, rng):
        x = inputs(rng, model.config)
        np.testing.assert_array_equal(model.predict(x), model.predict(x))
        np.testing.assert_array_equal(PoseTransformer(model.config).predict(x), model.predict(x))

    def test_batch_permutation(self, model, rng):
        x = inputs(rng, model.config, batch=3)
        perm = [2, 0, 1]
        np.testing.assert_allclose(model.predict(x[perm]), model.predict(x)[perm], atol=1e-12)

    def test_encoder_preserves_shape_and_permutes(self, model, rng):
        x = inputs(rng, model.config, batch=3)
        with ad.no_grad():
            memory = model.encode(model.embed_input(x)).data
            permuted = model.encode(model.embed_input(x[[1, 2, 0]])).data
        assert memory.shape == (3, model.config.l_in, model.config.d_model)
        np.testing.assert_allclose(permuted, memory[[1, 2, 0]], atol=1e-12)


class TestDecoder:
    def test_causality(self, model, rng):
        memory = Tensor(rng.normal(size=(2, model.config.l_in, model.config.d_model)))
        with ad.no_grad():
            base = model.decode(memory).data
        queries = model.params["decoder.queries"]
        for t in range(model.config.l_out - 1):
            original = queries.data.copy()
            queries.data[t + 1:] += rng.normal(size=queries.data[t + 1:].shape)
            with ad.no_grad():
                changed = model.decode(memory).data
            queries.data = original
            np.testing.assert_allclose(changed[:, :t + 1], base[:, :t + 1], atol=1e-12)
            assert not np.allclose(changed[:, t + 1], base[:, t + 1])

    def test_zero_memory_is_batch_constant(self, model):
        memory = Tensor(np.zeros((3, model.config.l_in, model.config.d_model)))
        with ad.no_grad():
            out = model.decode(memory).data
        np.testing.assert_allclose(out[1], out[0], atol=1e-12)
        np.testing.assert_allclose(out[2], out[0], atol=1e-12)

    def test_sequential_decode_matches_masked_pass(self, model, rng):
        memory = Tensor(rng.normal(size=(2, model.config.l_in, model.config.d_model)))
        with ad.no_grad():
            parallel = model.decode(memory, sequential=False).data
            sequential = model.decode(memory, sequential=True).data
        np.testing.assert_allclose(sequential, parallel, atol=1e-10)


class TestLoss:
    def test_zero_when_equal_and_feasible(self, model):
        y = np.zeros((2, model.config.l_out, 9))
        y[..., 6] = 0.1
        assert model.loss(Tensor(y), y).item() == 0.0

    def test_lambda_zero_is_mse(self, model, rng):
        y_hat = rng.normal(size=(2, model.config.l_out, 9)) * 2
        y = rng.normal(size=y_hat.shape)
        np.testing.assert_allclose(
            model.loss(Tensor(y_hat), y, lam=0.0).item(), np.mean((y_hat - y) ** 2), rtol=1e-14
        )

    def test_weighted_sum(self, model):
        # one entry off by 3: MSE = 9 / 9 = 1.0; head pitch 0.52 + sqrt(4.5) gives bio = 4.5 / 9 = 0.5
        y = np.zeros((1, 1, 9))
        y_hat = y.copy()
        y_hat[0, 0, 3] = 3.0
        limits = JointLimits(
            lower=(-1.05, -1.05, -0.70, -0.52, -0.79, -0.52, -1.0, -0.17, -0.17),
            upper=(1.05, 1.05, 0.70, 3.0 - np.sqrt(4.5), 0.79, 0.52, 0.52, 0.17, 0.17),
        )
        terms = model.loss_terms(Tensor(y_hat), y, limits, lam=0.1)
        assert terms.mse.item() == pytest.approx(1.0)
        assert terms.bio.item() == pytest.approx(0.5)
        assert terms.total.item() == pytest.approx(1.05)

    def test_shape_mismatch(self, model):
        with pytest.raises(ShapeError):
            model.loss(Tensor(np.zeros((1, 2, 9))), np.zeros((1, 3, 9)))


class TestGradients:
    @pytest.mark.slow
    def test_full_loss_passes_gradient_check(self):
        config = ModelConfig(d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1,
                             ffn_multiplier=2, dropout=0.0, l_out=4, seed=3)
        model = PoseTransformer(config)
        gen = np.random.default_rng(0)
        x = gen.normal(size=(2, config.l_in, 8))
        y = gen.uniform(-0.8, 0.8, size=(2, config.l_out, 9))

        def loss():
            return model.loss(model.forward(x), y, JointLimits(), lam=0.1)

        report = grad_check(loss, model.params, eps=1e-5, tolerance=1e-4, coordinates=50, seed=1)
        assert report.checked == 50
        assert report.passed, report.errors

    def test_state_round_trip(self, model, rng):
        x = inputs(rng, model.config)
        twin = PoseTransformer(model.config.model_copy(update={"seed": 9}))
        assert not np.allclose(twin.predict(x), model.predict(x))
        twin.load_state_dict(model.state_dict())
        np.testing.assert_array_equal(twin.predict(x), model.predict(x))
