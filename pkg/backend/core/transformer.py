import logging
import math
from typing import Dict, NamedTuple, Optional

import numpy as np

from backend.core import autodiff as ad
from backend.core.biomech import bio_penalty
from backend.core.errors import InvalidInputError, ShapeError
from backend.models import JointLimits, ModelConfig

logger = logging.getLogger(__name__)


class LossTerms(NamedTuple):
    total: ad.Tensor
    mse: ad.Tensor
    bio: ad.Tensor


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    """
    Fixed sine/cosine position table shaped ``(length, width)``.
    """
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, width, 2, dtype=np.float64) / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: width // 2])
    return table


class PoseTransformer:
    """
    Encoder-decoder transformer mapping impedance windows ``(B, L_in, 8)``
    to joint-angle sequences ``(B, L_out, 9)``.

    The decoder runs ``L_out`` learned queries through causally masked
    self-attention, cross-attention to the encoder memory and a feed-forward
    block, so output step ``t`` never sees queries after ``t``. Layers are
    post-norm. Parameters are plain :class:`Tensor` objects keyed by name.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        self.training = False
        self.rng = np.random.default_rng([config.seed, 1])
        self.params: Dict[str, ad.Tensor] = {}
        self._positions = sinusoidal_encoding(config.l_in, config.d_model)
        self._init_params(np.random.default_rng([config.seed, 0]))
        logger.info(
            f"Initialised transformer with {self.parameter_count()} parameters "
            f"(d_model={config.d_model}, heads={config.n_heads}, "
            f"layers={config.n_encoder_layers}+{config.n_decoder_layers})"
        )

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, hidden = cfg.d_model, cfg.d_model * cfg.ffn_multiplier

        def matrix(name, fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.params[name] = ad.Tensor(
                rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name
            )

        def vector(name, size, fill=0.0):
            self.params[name] = ad.Tensor(np.full(size, fill), requires_grad=True, name=name)

        def attention(prefix):
            for proj in ("q", "k", "v", "o"):
                matrix(f"{prefix}.w{proj}", d, d)
                vector(f"{prefix}.b{proj}", d)

        def norm(prefix):
            vector(f"{prefix}.gamma", d, 1.0)
            vector(f"{prefix}.beta", d)

        def ffn(prefix):
            matrix(f"{prefix}.w1", d, hidden)
            vector(f"{prefix}.b1", hidden)
            matrix(f"{prefix}.w2", hidden, d)
            vector(f"{prefix}.b2", d)

        matrix("input_proj.weight", cfg.input_dim, d)
        vector("input_proj.bias", d)
        for i in range(cfg.n_encoder_layers):
            attention(f"encoder.{i}.self_attn")
            norm(f"encoder.{i}.norm1")
            ffn(f"encoder.{i}.ffn")
            norm(f"encoder.{i}.norm2")

        for name in ("decoder.queries", "decoder.query_pos"):
            self.params[name] = ad.Tensor(
                rng.normal(0.0, 0.1, size=(cfg.l_out, d)), requires_grad=True, name=name
            )
        for i in range(cfg.n_decoder_layers):
            attention(f"decoder.{i}.self_attn")
            norm(f"decoder.{i}.norm1")
            attention(f"decoder.{i}.cross_attn")
            norm(f"decoder.{i}.norm2")
            ffn(f"decoder.{i}.ffn")
            norm(f"decoder.{i}.norm3")

        matrix("head.weight", d, cfg.output_dim)
        vector("head.bias", cfg.output_dim)

    def parameters(self) -> Dict[str, ad.Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise InvalidInputError(f"State is missing parameters: {sorted(missing)[:5]}")
        for name, param in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise ShapeError(f"load_state_dict[{name}]", param.shape, value.shape)
            param.data = value.copy()

    def clone(self) -> "PoseTransformer":
        twin = PoseTransformer.__new__(PoseTransformer)
        twin.config = self.config
        twin.training = self.training
        twin.rng = np.random.default_rng([self.config.seed, 1])
        twin._positions = self._positions
        twin.params = {
            name: ad.Tensor(p.data.copy(), requires_grad=True, name=name)
            for name, p in self.params.items()
        }
        return twin

    def _p(self, name: str) -> ad.Tensor:
        return self.params[name]

    def _linear(self, x, prefix_w: str, prefix_b: str) -> ad.Tensor:
        return ad.add(ad.matmul(x, self._p(prefix_w)), self._p(prefix_b))

    def _dropout(self, x: ad.Tensor, rng) -> ad.Tensor:
        return ad.dropout(x, self.config.dropout, rng, self.training)

    def _norm(self, x: ad.Tensor, prefix: str) -> ad.Tensor:
        return ad.layer_norm(x, self._p(f"{prefix}.gamma"), self._p(f"{prefix}.beta"))

    def _attention(self, prefix: str, x_q: ad.Tensor, x_kv: ad.Tensor, mask=None) -> ad.Tensor:
        batch, len_q, width = x_q.shape
        len_k = x_kv.shape[1]
        heads = self.config.n_heads
        head_dim = width // heads

        def split(x, proj, length):
            x = self._linear(x, f"{prefix}.w{proj}", f"{prefix}.b{proj}")
            return ad.transpose(ad.reshape(x, (batch, length, heads, head_dim)), (0, 2, 1, 3))

        q = split(x_q, "q", len_q)
        k = split(x_kv, "k", len_k)
        v = split(x_kv, "v", len_k)
        attended = ad.scaled_dot_product_attention(q, k, v, mask)
        merged = ad.reshape(ad.transpose(attended, (0, 2, 1, 3)), (batch, len_q, width))
        return self._linear(merged, f"{prefix}.wo", f"{prefix}.bo")

    def _feed_forward(self, x: ad.Tensor, prefix: str) -> ad.Tensor:
        hidden = ad.gelu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        return self._linear(hidden, f"{prefix}.w2", f"{prefix}.b2")

    def embed_input(self, x) -> ad.Tensor:
        """
        Project ``(B, L_in, 8)`` features to ``d_model`` and add the
        sinusoidal position table.
        """
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.config.input_dim:
            raise ShapeError("embed_input", x.shape)
        if x.shape[1] > self._positions.shape[0]:
            raise ShapeError("embed_input", x.shape, self._positions.shape)
        projected = self._linear(x, "input_proj.weight", "input_proj.bias")
        return ad.add(projected, self._positions[: x.shape[1]])

    def encode(self, embedded: ad.Tensor, rng=None) -> ad.Tensor:
        """Unmasked self-attention stack; output shape equals input shape."""
        rng = rng if rng is not None else self.rng
        x = self._dropout(embedded, rng)
        for i in range(self.config.n_encoder_layers):
            prefix = f"encoder.{i}"
            x = self._norm(
                ad.add(x, self._dropout(self._attention(f"{prefix}.self_attn", x, x), rng)),
                f"{prefix}.norm1",
            )
            x = self._norm(
                ad.add(x, self._dropout(self._feed_forward(x, f"{prefix}.ffn"), rng)),
                f"{prefix}.norm2",
            )
        return x

    def _decoder_stack(self, queries: ad.Tensor, memory: ad.Tensor, rng) -> ad.Tensor:
        mask = ad.causal_mask(queries.shape[1])
        x = queries
        for i in range(self.config.n_decoder_layers):
            prefix = f"decoder.{i}"
            x = self._norm(
                ad.add(x, self._dropout(self._attention(f"{prefix}.self_attn", x, x, mask), rng)),
                f"{prefix}.norm1",
            )
            x = self._norm(
                ad.add(x, self._dropout(self._attention(f"{prefix}.cross_attn", x, memory), rng)),
                f"{prefix}.norm2",
            )
            x = self._norm(
                ad.add(x, self._dropout(self._feed_forward(x, f"{prefix}.ffn"), rng)),
                f"{prefix}.norm3",
            )
        return x

    def decode(self, memory: ad.Tensor, sequential: Optional[bool] = None, rng=None) -> ad.Tensor:
        """
        Run the learned queries against the encoder memory.

        Args:
            memory (Tensor): encoder output ``(B, L_in, d_model)``.
            sequential (bool, optional): decode step by step, feeding only the
                queries up to ``t`` at step ``t``. Defaults to the config flag.
        Returns:
            Tensor: ``(B, L_out, d_model)``.
        """
        rng = rng if rng is not None else self.rng
        sequential = self.config.sequential_decode if sequential is None else sequential
        batch = memory.shape[0]
        l_out, width = self.config.l_out, self.config.d_model

        queries = ad.add(self._p("decoder.queries"), self._p("decoder.query_pos"))
        tiled = ad.add(np.zeros((batch, l_out, width)), queries)
        if not sequential:
            return self._decoder_stack(tiled, memory, rng)

        steps = []
        for t in range(1, l_out + 1):
            prefix = ad.slice_tensor(tiled, (slice(None), slice(0, t)))
            out = self._decoder_stack(prefix, memory, rng)
            steps.append(ad.slice_tensor(out, (slice(None), slice(t - 1, t))))
        return ad.concat(steps, axis=1)

    def forward(self, x, rng=None) -> ad.Tensor:
        """
        Map ``X (B, rate_ratio * L_out, 8)`` to ``Y_hat (B, L_out, 9)``.
        """
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.config.l_in or x.shape[2] != self.config.input_dim:
            logger.error(f"forward: expected (B, {self.config.l_in}, 8), got {x.shape}")
            raise ShapeError("forward", x.shape, (None, self.config.l_in, self.config.input_dim))
        if not np.all(np.isfinite(x.data)):
            raise InvalidInputError("forward: input contains NaN or Inf")

        memory = self.encode(self.embed_input(x), rng)
        decoded = self.decode(memory, rng=rng)
        return self._linear(decoded, "head.weight", "head.bias")

    __call__ = forward

    def loss_terms(self, y_hat: ad.Tensor, y, limits: JointLimits = JointLimits(), lam: float = 0.1) -> LossTerms:
        y = ad.as_tensor(y)
        if y_hat.shape != y.shape:
            raise ShapeError("loss", y_hat.shape, y.shape)
        if lam < 0:
            raise InvalidInputError("lambda must be non-negative")

        mse = ad.mean(ad.square(ad.sub(y_hat, y)))
        bio = bio_penalty(y_hat, limits)
        total = ad.add(mse, ad.mul(bio, lam))
        return LossTerms(total=total, mse=mse, bio=bio)

    def loss(self, y_hat: ad.Tensor, y, limits: JointLimits = JointLimits(), lam: float = 0.1) -> ad.Tensor:
        """
        ``MSE(y_hat, y) + lam * bio_penalty(y_hat)`` as a scalar Tensor.
        """
        return self.loss_terms(y_hat, y, limits, lam).total

    def predict(self, x) -> np.ndarray:
        """Inference without dropout or tape recording."""
        was_training = self.training
        self.training = False
        try:
            with ad.no_grad():
                return self.forward(x).numpy()
        finally:
            self.training = was_training
