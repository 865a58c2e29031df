"""
Synthetic cohorts, feature standardisation, sliding windows and
leave-one-person-out folds.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.core.biomech import clamp_to_limits
from backend.core.errors import DataError, ShapeError
from backend.models import JointLimits, SynthConfig

logger = logging.getLogger(__name__)

FEATURE_NAMES = tuple(f"{kind}{c}" for c in range(1, 5) for kind in ("mag", "phase"))
MIN_FREQUENCY_HZ = 0.02
MAX_FREQUENCY_HZ = 0.2
N_SINUSOIDS = 3
MIN_STD = 1e-12


@dataclass
class SessionRecording:
    """
    One person's aligned recording: impedance at ``rate_ratio`` times the
    pose rate.
    """

    person_id: int
    impedance: np.ndarray
    pose: np.ndarray
    timestamps: np.ndarray
    rate_ratio: int = 9
    pose_fps: float = 30.0

    def __post_init__(self):
        self.impedance = np.asarray(self.impedance, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.uint64)
        if self.impedance.ndim != 2 or self.impedance.shape[1] != 8:
            raise ShapeError("SessionRecording.impedance", self.impedance.shape)
        if self.pose.ndim != 2 or self.pose.shape[1] != 9:
            raise ShapeError("SessionRecording.pose", self.pose.shape)
        if self.timestamps.shape != (self.impedance.shape[0],):
            raise ShapeError("SessionRecording.timestamps", self.timestamps.shape, self.impedance.shape)

    @property
    def impedance_fps(self) -> float:
        return self.pose_fps * self.rate_ratio

    @property
    def is_aligned(self) -> bool:
        return self.impedance.shape[0] == self.rate_ratio * self.pose.shape[0]

    def aligned(self) -> "SessionRecording":
        """
        Trim both tracks to the longest prefix with exactly ``rate_ratio``
        impedance frames per pose frame.
        """
        n_pose = min(self.pose.shape[0], self.impedance.shape[0] // self.rate_ratio)
        n_imp = n_pose * self.rate_ratio
        if n_pose != self.pose.shape[0] or n_imp != self.impedance.shape[0]:
            logger.warning(
                f"Person {self.person_id}: trimming to {n_pose} pose / {n_imp} impedance frames"
            )
        return SessionRecording(
            person_id=self.person_id,
            impedance=self.impedance[:n_imp],
            pose=self.pose[:n_pose],
            timestamps=self.timestamps[:n_imp],
            rate_ratio=self.rate_ratio,
            pose_fps=self.pose_fps,
        )


@dataclass(frozen=True)
class WindowPair:
    x: np.ndarray
    y: np.ndarray
    person_id: int
    start: int


@dataclass(frozen=True)
class Fold:
    test: int
    train: Tuple[int, ...]

    def validation_split(self, index: int) -> Tuple[Tuple[int, ...], Optional[int]]:
        """
        Rotate one training person out for validation.

        Returns:
            Tuple: remaining training ids and the validation id, or the full
            training set and None when only one training person exists.
        """
        if len(self.train) < 2:
            return self.train, None
        held = self.train[index % len(self.train)]
        return tuple(p for p in self.train if p != held), held


def synth_trajectory(
    ranges: Sequence[Tuple[float, float]],
    duration_frames: int,
    seed: int,
    fps: float = 30.0,
    limits: JointLimits = JointLimits(),
) -> np.ndarray:
    """
    Smooth pseudo-random pose track inside per-component ranges.

    Each of the 9 components is a sum of three seeded sinusoids with
    frequencies in [0.02, 0.2] Hz, scaled into ``[lo, hi]`` and clamped to
    ``limits``.

    Args:
        ranges: 9 ``(lo, hi)`` pairs in radians.
        duration_frames (int): number of pose frames, at least 1.
        seed (int): generator seed.
        fps (float): pose frame rate.
    Returns:
        np.ndarray: pose track ``(duration_frames, 9)``.
    Raises:
        DataError: empty or malformed ranges, or a non-positive duration.
    """
    bounds = np.asarray(ranges, dtype=np.float64)
    if bounds.size == 0:
        raise DataError("synth_trajectory: ranges are empty")
    if bounds.shape != (9, 2) or np.any(bounds[:, 0] > bounds[:, 1]):
        raise DataError(f"synth_trajectory: expected 9 ordered [min, max] pairs, got shape {bounds.shape}")
    if duration_frames < 1:
        raise DataError("synth_trajectory: duration must be at least one frame")

    rng = np.random.default_rng(seed)
    amplitudes = rng.uniform(0.5, 1.0, size=(9, N_SINUSOIDS))
    frequencies = rng.uniform(MIN_FREQUENCY_HZ, MAX_FREQUENCY_HZ, size=(9, N_SINUSOIDS))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(9, N_SINUSOIDS))

    t = np.arange(duration_frames, dtype=np.float64)[:, None, None] / fps
    waves = np.sum(amplitudes * np.sin(2.0 * math.pi * frequencies * t + phases), axis=-1)
    unit = waves / amplitudes.sum(axis=-1)

    mid = bounds.mean(axis=1)
    half = 0.5 * (bounds[:, 1] - bounds[:, 0])
    return clamp_to_limits(mid + half * unit, limits)


def mixing_matrices(config: SynthConfig, person_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-person ``(4, 9)`` magnitude and phase mixing rows.

    A shared base (from the config or the seed) is jittered per person so
    that persons differ in a reproducible way.
    """
    base_rng = np.random.default_rng([config.seed, 0])
    base_mag = (
        np.asarray(config.mixing_magnitude) if config.mixing_magnitude is not None
        else base_rng.normal(0.0, 8.0, size=(4, 9))
    )
    base_phase = (
        np.asarray(config.mixing_phase) if config.mixing_phase is not None
        else base_rng.normal(0.0, 0.05, size=(4, 9))
    )
    rng = np.random.default_rng([config.seed, person_id, 0])
    jitter_mag = 1.0 + config.person_jitter * rng.standard_normal((4, 9))
    jitter_phase = 1.0 + config.person_jitter * rng.standard_normal((4, 9))
    return base_mag * jitter_mag, base_phase * jitter_phase


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    """Wrap angles into ``(-pi, pi]``."""
    return math.pi - np.mod(math.pi - phase, 2.0 * math.pi)


def upsample(pose: np.ndarray, rate_ratio: int) -> np.ndarray:
    """
    Linear interpolation of a pose track onto a grid ``rate_ratio`` times
    denser; pose frame ``i`` lands on impedance frame ``rate_ratio * i``.
    """
    n_pose = pose.shape[0]
    fine = np.arange(n_pose * rate_ratio, dtype=np.float64) / rate_ratio
    coarse = np.arange(n_pose, dtype=np.float64)
    return np.column_stack([np.interp(fine, coarse, pose[:, j]) for j in range(pose.shape[1])])


def forward_model(pose, config: SynthConfig = SynthConfig(), person_id: int = 1) -> np.ndarray:
    """
    Impedance features ``(rate_ratio * T, 8)`` produced by a pose track ``(T, 9)``.

    Magnitude of channel ``c`` is its baseline plus a linear mix of the
    upsampled joint angles, a slow sinusoidal drift and Gaussian noise.
    Phase uses its own baseline and mixing row and is wrapped to (-pi, pi].
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim != 2 or pose.shape[1] != 9:
        raise ShapeError("forward_model", pose.shape)

    a_mag, a_phase = mixing_matrices(config, person_id)
    theta = upsample(pose, config.rate_ratio)
    n = theta.shape[0]
    rng = np.random.default_rng([config.seed, person_id, 1])

    t = np.arange(n, dtype=np.float64)[:, None]
    drift = config.drift_amplitude * np.sin(2.0 * math.pi * t / config.drift_period)
    magnitude = np.asarray(config.baselines) + theta @ a_mag.T + drift
    phase = np.asarray(config.phase_baselines) + theta @ a_phase.T
    if config.noise_magnitude > 0:
        magnitude = magnitude + rng.normal(0.0, config.noise_magnitude, size=magnitude.shape)
    if config.noise_phase > 0:
        phase = phase + rng.normal(0.0, config.noise_phase, size=phase.shape)

    features = np.empty((n, 8))
    features[:, 0::2] = magnitude
    features[:, 1::2] = wrap_phase(phase)
    if np.any(features[:, 0::2] <= 0.0):
        raise DataError("forward_model produced non-positive magnitudes; lower the mixing gains")
    return features


def impedance_timestamps(n_frames: int, impedance_fps: float) -> np.ndarray:
    return np.round(np.arange(n_frames) * 1000.0 / impedance_fps).astype(np.uint64)


def generate_session(
    person_id: int, config: SynthConfig = SynthConfig(), limits: JointLimits = JointLimits()
) -> SessionRecording:
    if person_id not in config.persons:
        raise DataError(f"No ranges configured for person {person_id}")
    pose = synth_trajectory(
        config.persons[person_id],
        config.duration_frames,
        seed=int(np.random.SeedSequence([config.seed, person_id]).generate_state(1)[0]),
        fps=config.fps,
        limits=limits,
    )
    impedance = forward_model(pose, config, person_id)
    return SessionRecording(
        person_id=person_id,
        impedance=impedance,
        pose=pose,
        timestamps=impedance_timestamps(impedance.shape[0], config.fps * config.rate_ratio),
        rate_ratio=config.rate_ratio,
        pose_fps=config.fps,
    )


def generate_cohort(
    config: SynthConfig = SynthConfig(), limits: JointLimits = JointLimits()
) -> Dict[int, SessionRecording]:
    """
    One synthetic session per configured person, keyed by person id.
    """
    cohort = {pid: generate_session(pid, config, limits) for pid in sorted(config.persons)}
    logger.info(
        f"Generated {len(cohort)} synthetic sessions of {config.duration_frames} pose frames "
        f"(seed={config.seed})"
    )
    return cohort


@dataclass(frozen=True)
class FeatureScaler:
    """
    Per-channel z-score statistics, fitted on training features only.
    """

    mean: np.ndarray = field(default_factory=lambda: np.zeros(8))
    std: np.ndarray = field(default_factory=lambda: np.ones(8))

    @classmethod
    def fit(cls, features) -> "FeatureScaler":
        """
        Raises:
            DataError: empty input or a channel with zero spread.
        """
        features = np.asarray(features, dtype=np.float64).reshape(-1, 8)
        if features.shape[0] == 0:
            raise DataError("Cannot fit a scaler on an empty feature set")
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        flat = np.flatnonzero(std < MIN_STD)
        if flat.size:
            channel = FEATURE_NAMES[int(flat[0])]
            logger.error(f"Feature channel {channel} has zero standard deviation")
            raise DataError(f"Feature channel {channel} has zero standard deviation")
        return cls(mean=mean, std=std)

    def transform(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != 8:
            raise ShapeError("standardize", features.shape)
        return (features - self.mean) / self.std

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {"scaler.mean": self.mean.copy(), "scaler.std": self.std.copy()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "FeatureScaler":
        try:
            return cls(mean=np.asarray(arrays["scaler.mean"]), std=np.asarray(arrays["scaler.std"]))
        except KeyError as e:
            raise DataError(f"Checkpoint has no scaler statistics ({e})") from e


def standardize(features, scaler: FeatureScaler) -> np.ndarray:
    return scaler.transform(features)


def make_windows(
    session: SessionRecording,
    l_out: int,
    stride: Optional[int] = None,
    mode: str = "aligned",
) -> List[WindowPair]:
    """
    Slice a session into input/target pairs.

    In ``aligned`` mode the target ``pose[s, s + l_out)`` covers the same
    time span as the input ``impedance[r*s, r*(s + l_out))``. In
    ``forecast`` mode the target is the next ``l_out`` pose frames.

    Raises:
        DataError: if the session is not rate-aligned or the arguments are invalid.
    """
    stride = stride or l_out
    if stride < 1 or l_out < 1:
        raise DataError("stride and l_out must be positive")
    if mode not in ("aligned", "forecast"):
        raise DataError(f"Unknown window mode {mode!r}")
    if not session.is_aligned:
        logger.error(
            f"Person {session.person_id}: {session.impedance.shape[0]} impedance frames for "
            f"{session.pose.shape[0]} pose frames at ratio {session.rate_ratio}"
        )
        raise DataError(f"Session for person {session.person_id} has misaligned rates")

    r = session.rate_ratio
    span = l_out if mode == "aligned" else 2 * l_out
    n_pose = session.pose.shape[0]
    windows = []
    for s in range(0, n_pose - span + 1, stride):
        target = s if mode == "aligned" else s + l_out
        windows.append(
            WindowPair(
                x=session.impedance[r * s:r * (s + l_out)],
                y=session.pose[target:target + l_out],
                person_id=session.person_id,
                start=s,
            )
        )
    return windows


def stack_windows(windows: Sequence[WindowPair]) -> Tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``X (B, L_in, 8)`` and ``Y (B, L_out, 9)``."""
    if not windows:
        raise DataError("No windows to stack")
    return np.stack([w.x for w in windows]), np.stack([w.y for w in windows])


def lopo_split(person_ids: Sequence[int]) -> List[Fold]:
    """
    One fold per person, testing on that person and training on the rest.

    Raises:
        DataError: duplicate ids or fewer than two persons.
    """
    ids = list(person_ids)
    if len(set(ids)) != len(ids):
        raise DataError(f"Duplicate person ids in {ids}")
    if len(ids) < 2:
        raise DataError("Leave-one-person-out needs at least two persons")
    return [Fold(test=p, train=tuple(q for q in ids if q != p)) for p in ids]
