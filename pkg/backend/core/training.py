import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from backend.core import autodiff as ad
from backend.core import checkpoint
from backend.core.dataset import FeatureScaler
from backend.core.errors import DataError, InvalidInputError, NumericError, ShapeError
from backend.core.kinematics import (
    Skeleton,
    VertexCloud,
    generate_cloud,
    mpjpe_per_joint,
    mpve_per_joint,
)
from backend.core.transformer import PoseTransformer
from backend.models import JointLimits, ModelConfig, TrainConfig
from backend.report_model import EpochStats, JointMetrics

logger = logging.getLogger(__name__)

CONFIG_FIELDS = (
    "d_model", "n_heads", "n_encoder_layers", "n_decoder_layers", "ffn_multiplier",
    "dropout", "l_out", "rate_ratio", "input_dim", "output_dim", "sequential_decode", "seed",
)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """
    Step schedule: ``lr0 * factor ** floor(epoch / step_epochs)``.
    """
    if epoch < 0:
        raise InvalidInputError("epoch must be non-negative")
    return cfg.learning_rate * cfg.lr_step_factor ** (epoch // cfg.lr_step_epochs)


class Adam:
    """
    Adam with bias correction over a named parameter dict.
    """

    def __init__(self, params: Dict[str, ad.Tensor], cfg: TrainConfig):
        self.params = params
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, param in self.params.items():
            grad = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    history: List[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    state: Dict[str, np.ndarray] = field(default_factory=dict)

    def losses(self) -> List[float]:
        return [h.loss for h in self.history]


def _check_xy(model: PoseTransformer, x: np.ndarray, y: np.ndarray, op: str) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise DataError(f"{op}: no windows")
    if x.shape[0] != y.shape[0] or y.shape[1:] != (model.config.l_out, 9):
        raise ShapeError(op, x.shape, y.shape)
    return x, y


def _shard_gradients(model, x, y, lam, limits, rng) -> Tuple[List[np.ndarray], Tuple[float, float, float]]:
    names = list(model.params)
    with ad.Tape() as tape:
        y_hat = model.forward(x, rng=rng)
        terms = model.loss_terms(y_hat, y, limits, lam)
        grads = tape.gradients(terms.total, [model.params[n] for n in names])
    return grads, (terms.total.item(), terms.mse.item(), terms.bio.item())


def batch_gradients(
    model: PoseTransformer,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    limits: JointLimits,
    rngs: List[np.random.Generator],
    executor: Optional[ThreadPoolExecutor] = None,
) -> Tuple[Dict[str, np.ndarray], Tuple[float, float, float]]:
    """
    Gradient of the batch loss, optionally split into shards.

    Each shard is differentiated on its own tape; shard gradients are
    weighted by shard size and summed in shard order, so the result does
    not depend on thread scheduling.
    """
    shards = np.array_split(np.arange(x.shape[0]), min(len(rngs), x.shape[0]))
    jobs = [(x[idx], y[idx], rngs[i]) for i, idx in enumerate(shards)]
    if executor is None or len(jobs) == 1:
        results = [_shard_gradients(model, xs, ys, cfg.lam, limits, r) for xs, ys, r in jobs]
    else:
        futures = [executor.submit(_shard_gradients, model, xs, ys, cfg.lam, limits, r) for xs, ys, r in jobs]
        results = [f.result() for f in futures]

    names = list(model.params)
    total = {name: np.zeros_like(model.params[name].data) for name in names}
    terms = np.zeros(3)
    for (grads, values), idx in zip(results, shards):
        weight = len(idx) / x.shape[0]
        for name, grad in zip(names, grads):
            total[name] += weight * grad
        terms += weight * np.asarray(values)
    return total, (float(terms[0]), float(terms[1]), float(terms[2]))


def validation_mse(model: PoseTransformer, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    errors = []
    for start in range(0, x.shape[0], batch_size):
        pred = model.predict(x[start:start + batch_size])
        errors.append(np.sum((pred - y[start:start + batch_size]) ** 2))
    return float(np.sum(errors) / y.size)


def train(
    model: PoseTransformer,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    limits: JointLimits = JointLimits(),
    validation: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> TrainResult:
    """
    Fit ``model`` on standardised windows with Adam and the step schedule.

    Args:
        model (PoseTransformer): updated in place.
        x: inputs ``(N, L_in, 8)``, already standardised.
        y: targets ``(N, L_out, 9)``.
        cfg (TrainConfig): optimisation settings; ``cfg.lam`` weights the
            biomechanical term.
        limits (JointLimits): bounds for the biomechanical term.
        validation: optional ``(x, y)`` slice used for early stopping.
    Returns:
        TrainResult: per-epoch history and the final parameters. With a
        validation slice the parameters of the best validation epoch are
        restored.
    Raises:
        DataError: empty training set.
        NumericError: NaN/Inf in the loss or gradients, with epoch and batch.
    """
    x, y = _check_xy(model, x, y, "train")
    if validation is not None:
        validation = _check_xy(model, *validation, "validation")

    order_rng = np.random.default_rng([cfg.seed, 2])
    dropout_seed = np.random.SeedSequence([cfg.seed, 3])
    optimizer = Adam(model.params, cfg)
    result = TrainResult()
    best_val, wait = np.inf, 0
    n = x.shape[0]

    executor = ThreadPoolExecutor(max_workers=cfg.parallel_shards) if cfg.parallel_shards > 1 else None
    model.training = True
    logger.info(
        f"Training on {n} windows for up to {cfg.epochs} epochs "
        f"(batch={cfg.batch_size}, lambda={cfg.lam}, shards={cfg.parallel_shards})"
    )
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            order = order_rng.permutation(n)
            sums = np.zeros(3)
            for batch, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                rngs = [np.random.default_rng(s) for s in dropout_seed.spawn(cfg.parallel_shards)]
                try:
                    grads, terms = batch_gradients(model, x[idx], y[idx], cfg, limits, rngs, executor)
                except NumericError as e:
                    logger.error(f"Non-finite value at epoch {epoch}, batch {batch}: {e}")
                    raise NumericError("Training diverged", op_id=e.op_id, epoch=epoch, batch=batch) from e
                optimizer.step(grads, lr)
                sums += len(idx) * np.asarray(terms)
                logger.debug(f"epoch {epoch} batch {batch}: loss={terms[0]:.6f}")

            loss, mse, bio = (sums / n).tolist()
            val = validation_mse(model, *validation) if validation is not None else None
            result.history.append(
                EpochStats(epoch=epoch, learning_rate=lr, loss=loss, mse=mse, bio=bio, val_mse=val)
            )
            logger.info(
                f"epoch {epoch}: lr={lr:.2e} loss={loss:.6f} mse={mse:.6f} bio={bio:.3e}"
                + (f" val_mse={val:.6f}" if val is not None else "")
            )

            if val is None:
                continue
            if val < best_val:
                best_val, wait = val, 0
                result.best_epoch = epoch
                result.state = model.state_dict()
            else:
                wait += 1
                if cfg.patience is not None and wait >= cfg.patience:
                    logger.warning(
                        f"Early stopping at epoch {epoch}; best validation epoch was {result.best_epoch}"
                    )
                    result.stopped_early = True
                    break
    finally:
        model.training = False
        if executor is not None:
            executor.shutdown()

    if validation is not None and result.state:
        model.load_state_dict(result.state)
    else:
        result.best_epoch = len(result.history) - 1
        result.state = model.state_dict()
    return result


def evaluate_predictions(
    y_true: np.ndarray,
    y_pred: np.ndarray,
    skeleton: Optional[Skeleton] = None,
    cloud: Optional[VertexCloud] = None,
) -> Tuple[JointMetrics, JointMetrics]:
    """Per-joint MPJPE and MPVE (mm) of predicted against true poses."""
    skeleton = skeleton or Skeleton()
    cloud = cloud or generate_cloud(skeleton=skeleton)
    joint = mpjpe_per_joint(y_true, y_pred, skeleton)
    vertex = mpve_per_joint(y_true, y_pred, skeleton, cloud)
    return (
        JointMetrics(neck=joint[0], head=joint[1], jaw=joint[2]),
        JointMetrics(neck=vertex[0], head=vertex[1], jaw=vertex[2]),
    )


def evaluate(
    model: PoseTransformer,
    x: np.ndarray,
    y: np.ndarray,
    skeleton: Optional[Skeleton] = None,
    cloud: Optional[VertexCloud] = None,
    batch_size: int = 256,
) -> Tuple[JointMetrics, JointMetrics]:
    """
    Forward the test windows and score them.

    Raises:
        DataError: if there are no test windows.
    """
    x, y = _check_xy(model, x, y, "evaluate")
    pred = np.concatenate(
        [model.predict(x[start:start + batch_size]) for start in range(0, x.shape[0], batch_size)]
    )
    return evaluate_predictions(y, pred, skeleton, cloud)


def config_vector(config: ModelConfig) -> np.ndarray:
    return np.array([float(getattr(config, name)) for name in CONFIG_FIELDS])


def config_from_vector(vector: np.ndarray) -> ModelConfig:
    values = dict(zip(CONFIG_FIELDS, np.asarray(vector).tolist()))
    for name in CONFIG_FIELDS:
        if name == "dropout":
            continue
        if name == "sequential_decode":
            values[name] = bool(values[name])
        else:
            values[name] = int(values[name])
    return ModelConfig(**values)


def save_model(path: Union[str, Path], model: PoseTransformer, scaler: FeatureScaler) -> Path:
    arrays = {"config.model": config_vector(model.config)}
    arrays.update(scaler.to_arrays())
    arrays.update(model.state_dict())
    return checkpoint.save_arrays(path, arrays)


def load_model(path: Union[str, Path]) -> Tuple[PoseTransformer, FeatureScaler]:
    """
    Rebuild a model and its feature scaler from a checkpoint file.

    Raises:
        DataError: missing file or records.
    """
    arrays = checkpoint.load_arrays(path)
    if "config.model" not in arrays:
        raise DataError(f"Checkpoint {path} has no model config record")
    model = PoseTransformer(config_from_vector(arrays["config.model"]))
    model.load_state_dict(arrays)
    return model, FeatureScaler.from_arrays(arrays)
