import hashlib
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

JOINT_NAMES = ("neck", "head", "jaw")
AXIS_NAMES = ("pitch", "yaw", "roll")
POSE_COLUMNS = tuple(f"{j}_{a}" for j in JOINT_NAMES for a in AXIS_NAMES)

# Default anatomical limits (radians), ordered neck, head, jaw x pitch, yaw, roll
DEFAULT_LIMITS = (
    ((-1.05, 1.05), (-1.05, 1.05), (-0.70, 0.70)),
    ((-0.52, 0.52), (-0.79, 0.79), (-0.52, 0.52)),
    ((0.0, 0.52), (-0.17, 0.17), (-0.17, 0.17)),
)

# Measured per-person rotation ranges (radians), same ordering as DEFAULT_LIMITS
PERSON_RANGES: Dict[int, Tuple[Tuple[float, float], ...]] = {
    1: ((-0.44, 0.50), (-0.92, 0.89), (-0.63, 0.68),
        (-0.39, 0.47), (-0.51, 0.49), (-0.42, 0.48),
        (0.03, 0.48), (-0.13, 0.14), (-0.12, 0.14)),
    2: ((-0.68, 0.91), (-0.52, 0.79), (-0.42, 0.59),
        (-0.47, 0.34), (-0.41, 0.45), (-0.28, 0.40),
        (0.11, 0.46), (-0.09, 0.12), (-0.07, 0.08)),
    3: ((-0.97, 0.47), (-0.77, 0.35), (-0.62, 0.51),
        (-0.25, 0.51), (-0.47, 0.39), (-0.40, 0.23),
        (0.06, 0.48), (-0.15, 0.04), (-0.10, 0.09)),
    4: ((-0.88, 0.93), (-0.89, 0.98), (-0.24, 0.51),
        (-0.35, 0.28), (-0.43, 0.45), (-0.49, 0.46),
        (0.00, 0.50), (-0.05, 0.11), (-0.15, 0.12)),
    5: ((-0.50, 0.39), (-1.03, 0.94), (-0.65, 0.70),
        (-0.46, 0.48), (-0.33, 0.50), (-0.11, 0.31),
        (0.24, 0.51), (-0.16, -0.01), (-0.06, 0.12)),
    6: ((-0.86, 0.82), (-0.62, 0.22), (-0.29, 0.41),
        (-0.29, 0.43), (-0.48, 0.27), (-0.35, 0.37),
        (0.13, 0.46), (-0.04, 0.12), (-0.07, 0.06)),
    7: ((-1.04, 1.01), (-0.38, 0.56), (-0.59, 0.65),
        (-0.46, 0.19), (-0.51, 0.28), (-0.49, 0.09),
        (0.01, 0.45), (-0.06, 0.11), (-0.15, 0.11)),
}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# Model for Gaussian quaternion smoothing
class SmoothingParams(StrictModel):
    sigma: float = Field(2.0, gt=0.0, description="Gaussian bandwidth in frames")
    half_window: int = Field(
        5, ge=0, description="Half window K in frames (window spans 2K+1 frames)"
    )


class JointLimits(StrictModel):
    """
    Per-component anatomical limits in radians, ordered neck, head, jaw and
    pitch, yaw, roll inside each joint.

    The YAML form accepts a per-joint mapping, e.g. ``{"jaw": [[0.0, 0.6], ...]}``;
    joints that are not mentioned keep their default limits.
    """

    lower: Tuple[float, ...] = Field(
        tuple(lo for joint in DEFAULT_LIMITS for lo, _ in joint),
        description="Lower bound per component",
    )
    upper: Tuple[float, ...] = Field(
        tuple(hi for joint in DEFAULT_LIMITS for _, hi in joint),
        description="Upper bound per component",
    )

    @model_validator(mode="before")
    @classmethod
    def _from_joint_table(cls, data):
        if not isinstance(data, dict) or not any(j in data for j in JOINT_NAMES):
            return data
        unknown = set(data) - set(JOINT_NAMES)
        if unknown:
            raise ValueError(f"Unknown joints in limits: {sorted(unknown)}")
        lower, upper = [], []
        for index, joint in enumerate(JOINT_NAMES):
            rows = data.get(joint, DEFAULT_LIMITS[index])
            if len(rows) != 3:
                raise ValueError(f"Limits for {joint} need 3 [min, max] pairs")
            for lo, hi in rows:
                lower.append(float(lo))
                upper.append(float(hi))
        return {"lower": tuple(lower), "upper": tuple(upper)}

    @model_validator(mode="after")
    def _check_bounds(self):
        if len(self.lower) != 9 or len(self.upper) != 9:
            raise ValueError("Joint limits need exactly 9 lower and 9 upper bounds")
        for i, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if not lo < hi:
                raise ValueError(
                    f"Lower limit must be below upper limit for {POSE_COLUMNS[i]}"
                )
        return self

    def midpoints(self) -> Tuple[float, ...]:
        return tuple((lo + hi) / 2 for lo, hi in zip(self.lower, self.upper))


class ModelConfig(StrictModel):
    d_model: int = Field(64, gt=0, description="Width of the latent representation")
    n_heads: int = Field(4, gt=0, description="Attention heads")
    n_encoder_layers: int = Field(2, ge=1)
    n_decoder_layers: int = Field(2, ge=1)
    ffn_multiplier: int = Field(4, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    l_out: int = Field(10, gt=0, description="Output sequence length")
    rate_ratio: int = Field(9, gt=0, description="Impedance frames per pose frame")
    input_dim: int = Field(8, description="4 channels x (magnitude, phase)")
    output_dim: int = Field(9, description="3 joints x (pitch, yaw, roll)")
    sequential_decode: bool = Field(
        False, description="Decode one step at a time instead of one masked pass"
    )
    seed: int = Field(0, ge=0, description="Parameter initialisation seed")

    @model_validator(mode="after")
    def _check_dims(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.input_dim != 8 or self.output_dim != 9:
            raise ValueError("input_dim must be 8 and output_dim must be 9")
        return self

    @property
    def l_in(self) -> int:
        return self.rate_ratio * self.l_out


class TrainConfig(StrictModel):
    learning_rate: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(32, gt=0, description="Windows per optimiser step")
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    lr_step_factor: float = Field(0.5, gt=0.0, le=1.0)
    lr_step_epochs: int = Field(25, gt=0)
    lam: float = Field(0.1, ge=0.0, description="Weight of the biomechanical term")
    epochs: int = Field(100, gt=0)
    patience: Optional[int] = Field(
        10, gt=0, description="Early-stopping patience in epochs (None disables)"
    )
    stride: Optional[int] = Field(
        None, gt=0, description="Window stride in pose frames (None means L_out)"
    )
    window_mode: Literal["aligned", "forecast"] = "aligned"
    parallel_shards: int = Field(1, ge=1, description="Gradient shards per batch")
    seed: int = Field(0, ge=0)


class SynthConfig(StrictModel):
    persons: Dict[int, Tuple[Tuple[float, float], ...]] = Field(
        default_factory=lambda: dict(PERSON_RANGES),
        description="Per-person rotation ranges, 9 [min, max] pairs each",
    )
    duration_frames: int = Field(54_000, ge=1, description="Pose frames per person")
    fps: float = Field(30.0, gt=0.0, description="Pose frame rate")
    rate_ratio: int = Field(9, gt=0)
    mixing_magnitude: Optional[Tuple[Tuple[float, ...], ...]] = Field(
        None, description="4x9 ohms per radian; None derives it from the seed"
    )
    mixing_phase: Optional[Tuple[Tuple[float, ...], ...]] = Field(
        None, description="4x9 radians per radian; None derives it from the seed"
    )
    baselines: Tuple[float, float, float, float] = (120.0, 135.0, 150.0, 165.0)
    phase_baselines: Tuple[float, float, float, float] = (-0.35, -0.25, -0.15, -0.05)
    drift_amplitude: float = Field(0.5, ge=0.0, description="Ohms")
    drift_period: float = Field(2700.0, gt=0.0, description="Impedance frames")
    noise_magnitude: float = Field(0.2, ge=0.0, description="Ohms")
    noise_phase: float = Field(0.002, ge=0.0, description="Radians")
    person_jitter: float = Field(
        0.15, ge=0.0, description="Relative per-person jitter of the mixing rows"
    )
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_shapes(self):
        if not self.persons:
            raise ValueError("At least one person is required")
        for person, ranges in self.persons.items():
            if len(ranges) != 9:
                raise ValueError(f"Person {person} needs 9 [min, max] ranges")
            for lo, hi in ranges:
                if lo > hi:
                    raise ValueError(f"Person {person} has an inverted range")
        for name in ("mixing_magnitude", "mixing_phase"):
            matrix = getattr(self, name)
            if matrix is not None and (
                len(matrix) != 4 or any(len(row) != 9 for row in matrix)
            ):
                raise ValueError(f"{name} must be 4x9")
        return self


class SkeletonConfig(StrictModel):
    head_offset: Tuple[float, float, float] = (0.0, 0.10, 0.0)
    jaw_offset: Tuple[float, float, float] = (0.0, -0.04, 0.05)
    neck_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)


class CloudConfig(StrictModel):
    n_vertices: int = Field(500, ge=3, description="At least one vertex per joint; 10475 mirrors the full mesh")
    seed: int = Field(0, ge=0)
    spread: float = Field(0.05, gt=0.0, description="Vertex scatter radius (m)")


class ReportConfig(StrictModel):
    reference_error_mm: float = Field(
        24.9, ge=0.0, description="Vision-estimator error against motion capture"
    )
    reference_label: str = "vision estimator vs motion capture (reference figure)"


class AppConfig(StrictModel):
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    smoothing: SmoothingParams = SmoothingParams()
    limits: JointLimits = JointLimits()
    skeleton: SkeletonConfig = SkeletonConfig()
    cloud: CloudConfig = CloudConfig()
    report: ReportConfig = ReportConfig()

    def fingerprint(self) -> str:
        """
        Short SHA-256 fingerprint of the canonical JSON dump of the config.
        """
        canonical = self.model_dump_json()
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def with_seed(self, seed: int) -> "AppConfig":
        """
        Return a copy where every seeded section uses ``seed``.
        """
        return self.model_copy(
            update={
                "model": self.model.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"seed": seed}),
                "synth": self.synth.model_copy(update={"seed": seed}),
                "cloud": self.cloud.model_copy(update={"seed": seed}),
            }
        )


# Models for the HTTP surface
class SmoothingRequest(BaseModel):
    track: List[List[float]] = Field(
        ..., min_length=1, description="Pose frames, 9 axis-angle components each"
    )
    sigma: float = Field(2.0, gt=0.0)
    half_window: int = Field(5, ge=0)


class SmoothingResponse(BaseModel):
    success: bool = Field(..., description="Indicates whether smoothing succeeded")
    track: List[List[float]] = Field(..., description="Smoothed pose frames")


class PenaltyRequest(BaseModel):
    poses: List[List[List[float]]] = Field(..., description="Poses shaped (B, L_out, 9)")
    limits: Optional[Dict[str, List[List[float]]]] = Field(
        None, description="Per-joint limit overrides"
    )


class ClampRequest(BaseModel):
    poses: List[List[float]] = Field(..., min_length=1)
    limits: Optional[Dict[str, List[List[float]]]] = None


class ComposeErrorRequest(BaseModel):
    e_a: float = Field(..., ge=0.0, description="First error in millimeters")
    e_b: float = Field(..., ge=0.0, description="Second error in millimeters")


class FramePayload(BaseModel):
    timestamp: int = Field(..., ge=0, description="Milliseconds")
    channels: List[List[float]] = Field(
        ..., min_length=4, max_length=4, description="4 x (magnitude, phase)"
    )


class FrameHex(BaseModel):
    data: str = Field(..., description="Hex-encoded wire frame")


load_dotenv()


class Settings(object):
    """
    Environment-backed settings. Only one instance is created per process.
    """

    def __new__(cls, *args, **kwargs):
        if not hasattr(cls, "_instance"):
            cls._instance = super(Settings, cls).__new__(cls)
        return cls._instance

    def __init__(self):
        if not hasattr(self, "_initialized"):
            self._initialized = True
            self._setup()

    def _setup(self):
        self.config_path = os.getenv("HEADTRACK_CONFIG")
        self.data_dir = Path(os.getenv("HEADTRACK_DATA_DIR", "data"))
        self.log_level = os.getenv("LOG_LEVEL", "INFO").upper()
        self.log_timezone = os.getenv("LOG_TIMEZONE", "UTC")
        seed = os.getenv("HEADTRACK_SEED", "0")
        if not seed.isdigit():
            raise ValueError("HEADTRACK_SEED must be a non-negative integer")
        self.seed = int(seed)

    def load_app_config(self, path: Optional[Path] = None) -> AppConfig:
        """
        Load the structured config file, falling back to HEADTRACK_CONFIG and
        then to the compiled-in defaults.

        Args:
            path (Path, optional): YAML config file.
        Returns:
            AppConfig: validated configuration.
        """
        path = path or (Path(self.config_path) if self.config_path else None)
        if path is None:
            return AppConfig()

        path = Path(path)
        if not path.is_file():
            logger.error(f"Config file not found: {path}")
            raise FileNotFoundError(f"Config file not found: {path}")

        with path.open("r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"Config file {path} must contain a mapping")

        logger.info(f"Loaded config from {path}")
        return AppConfig.model_validate(raw)
