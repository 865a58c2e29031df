"""
On-disk formats.

Pose tracks are comma-separated text with a header row::

    frame,neck_pitch,neck_yaw,neck_roll,head_pitch,head_yaw,head_roll,jaw_pitch,jaw_yaw,jaw_roll
    0,0.0132,-0.2051,...

Angles are axis-angle components in radians. A session directory holds one
person::

    person_<id>/impedance.bin   concatenated 45-byte wire frames
    person_<id>/pose.csv        pose track as above
    person_<id>/meta.yaml       person_id, rate_ratio, pose_fps, frame counts

Vertex clouds are comma-separated with columns ``x,y,z,w_neck,w_head,w_jaw,joint``.
Decoded impedance tracks are comma-separated with columns
``timestamp,mag1,phase1,...,mag4,phase4``.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from backend.core.codec import decode_stream, encode_frames
from backend.core.dataset import FEATURE_NAMES, SessionRecording
from backend.core.errors import DataError, InvalidInputError, ShapeError
from backend.core.kinematics import VertexCloud
from backend.core.rotations import smooth_ground_truth
from backend.models import JOINT_NAMES, POSE_COLUMNS, SmoothingParams

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FRAME_COLUMN = "frame"
TIMESTAMP_COLUMN = "timestamp"
CLOUD_COLUMNS = ("x", "y", "z") + tuple(f"w_{j}" for j in JOINT_NAMES)
SESSION_FORMAT = 1


def _read_table(path: Path, kind: str = "Table") -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        logger.error(f"Could not parse {kind.lower()} file {path}: {e}")
        raise DataError(f"Could not parse {kind.lower()} file {path}: {e}") from e


def write_pose_csv(path: PathLike, pose) -> Path:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim != 2 or pose.shape[1] != 9:
        raise DataError(f"Pose track must be (T, 9), got {pose.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(pose, columns=list(POSE_COLUMNS))
    frame.insert(0, FRAME_COLUMN, np.arange(pose.shape[0]))
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_pose_csv(path: PathLike) -> np.ndarray:
    """
    Read a pose track file, ordering rows by the frame column.

    Raises:
        DataError: missing file, missing columns, duplicate frames or
            non-finite values.
    """
    path = Path(path)
    if not path.is_file():
        logger.error(f"Pose file not found: {path}")
        raise DataError(f"Pose file not found: {path}")
    frame = _read_table(path, "Pose")

    missing = [c for c in (FRAME_COLUMN,) + POSE_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"Pose file {path} is missing columns {missing}")
    if frame[FRAME_COLUMN].duplicated().any():
        raise DataError(f"Pose file {path} repeats frame indices")

    try:
        pose = frame.sort_values(FRAME_COLUMN)[list(POSE_COLUMNS)].to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as e:
        raise DataError(f"Pose file {path} contains non-numeric or non-finite values") from e
    if not np.all(np.isfinite(pose)):
        raise DataError(f"Pose file {path} contains non-numeric or non-finite values")
    return pose


def write_impedance_csv(path: PathLike, timestamps, features) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(np.asarray(features, dtype=np.float64), columns=list(FEATURE_NAMES))
    table.insert(0, TIMESTAMP_COLUMN, np.asarray(timestamps, dtype=np.uint64))
    table.to_csv(path, index=False, float_format="%.9g")
    return path


def read_impedance_csv(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read ``timestamp,mag1,phase1,...,mag4,phase4`` rows.

    Raises:
        DataError: missing or unparseable file, missing columns, or
            non-numeric or negative values.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Impedance file not found: {path}")
    table = _read_table(path, "Impedance")
    missing = [c for c in (TIMESTAMP_COLUMN,) + FEATURE_NAMES if c not in table.columns]
    if missing:
        raise DataError(f"Impedance file {path} is missing columns {missing}")
    try:
        timestamps = table[TIMESTAMP_COLUMN].to_numpy(dtype=np.int64)
        features = table[list(FEATURE_NAMES)].to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as e:
        raise DataError(f"Impedance file {path} contains non-numeric values") from e
    if np.any(timestamps < 0):
        raise DataError(f"Impedance file {path} has negative timestamps")
    return timestamps.astype(np.uint64), features


def write_cloud_csv(path: PathLike, cloud: VertexCloud) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(np.hstack([cloud.rest, cloud.weights]), columns=list(CLOUD_COLUMNS))
    table["joint"] = cloud.dominant_joint()
    table.to_csv(path, index=False, float_format="%.17g")
    return path


def read_cloud_csv(path: PathLike) -> VertexCloud:
    """
    Read a vertex cloud; the optional ``joint`` column restores the
    per-vertex joint assignment.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Vertex cloud file not found: {path}")
    table = _read_table(path, "Vertex cloud")
    missing = [c for c in CLOUD_COLUMNS if c not in table.columns]
    if missing:
        raise DataError(f"Vertex cloud file {path} is missing columns {missing}")
    values = table[list(CLOUD_COLUMNS)].to_numpy(dtype=np.float64)
    assignment = table["joint"].to_numpy(dtype=np.int64) if "joint" in table.columns else None
    try:
        return VertexCloud(rest=values[:, :3], weights=values[:, 3:], assignment=assignment)
    except (InvalidInputError, ShapeError) as e:
        raise DataError(f"Vertex cloud file {path} is invalid: {e}") from e


def session_dir(root: PathLike, person_id: int) -> Path:
    return Path(root) / f"person_{person_id}"


def save_session(root: PathLike, session: SessionRecording, fingerprint: Optional[str] = None) -> Path:
    """
    Write one session directory under ``root``.

    Returns:
        Path: the ``person_<id>`` directory.
    """
    directory = session_dir(root, session.person_id)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "impedance.bin").write_bytes(encode_frames(session.timestamps, session.impedance))
    write_pose_csv(directory / "pose.csv", session.pose)

    meta = {
        "format": SESSION_FORMAT,
        "person_id": int(session.person_id),
        "rate_ratio": int(session.rate_ratio),
        "pose_fps": float(session.pose_fps),
        "n_pose_frames": int(session.pose.shape[0]),
        "n_impedance_frames": int(session.impedance.shape[0]),
    }
    if fingerprint:
        meta["config_fingerprint"] = fingerprint
    with (directory / "meta.yaml").open("w", encoding="utf-8") as handle:
        yaml.safe_dump(meta, handle, sort_keys=True)

    logger.info(f"Saved session for person {session.person_id} to {directory}")
    return directory


def _read_meta(directory: Path) -> dict:
    path = directory / "meta.yaml"
    if not path.is_file():
        raise DataError(f"Session directory {directory} has no meta.yaml")
    try:
        with path.open("r", encoding="utf-8") as handle:
            meta = yaml.safe_load(handle) or {}
    except (yaml.YAMLError, UnicodeDecodeError) as e:
        raise DataError(f"Could not parse {path}: {e}") from e
    if not isinstance(meta, dict):
        raise DataError(f"{path} must hold a mapping")
    for key in ("person_id", "rate_ratio", "pose_fps"):
        if key not in meta:
            raise DataError(f"{path} is missing {key!r}")
    return meta


def load_session(directory: PathLike) -> SessionRecording:
    """
    Load a session directory written by :func:`save_session`.

    Raises:
        DataError: missing files, corrupt frames or inconsistent metadata.
    """
    directory = Path(directory)
    meta = _read_meta(directory)
    impedance_path = directory / "impedance.bin"
    if not impedance_path.is_file():
        raise DataError(f"Session directory {directory} has no impedance.bin")

    timestamps, features = decode_stream(impedance_path.read_bytes())
    if timestamps.size > 1 and np.any(np.diff(timestamps.astype(np.int64)) <= 0):
        raise DataError(f"Timestamps in {impedance_path} are not strictly increasing")
    pose = read_pose_csv(directory / "pose.csv")

    session = SessionRecording(
        person_id=int(meta["person_id"]),
        impedance=features,
        pose=pose,
        timestamps=timestamps,
        rate_ratio=int(meta["rate_ratio"]),
        pose_fps=float(meta["pose_fps"]),
    )
    logger.info(
        f"Loaded person {session.person_id}: {pose.shape[0]} pose / {features.shape[0]} impedance frames"
    )
    return session if session.is_aligned else session.aligned()


def save_cohort(root: PathLike, cohort: Dict[int, SessionRecording], fingerprint: Optional[str] = None) -> Path:
    root = Path(root)
    for session in cohort.values():
        save_session(root, session, fingerprint)
    return root


def load_cohort(root: PathLike) -> Dict[int, SessionRecording]:
    root = Path(root)
    directories = sorted(p for p in root.glob("person_*") if p.is_dir())
    if not directories:
        logger.error(f"No session directories under {root}")
        raise DataError(f"No session directories under {root}")
    cohort = {}
    for directory in directories:
        session = load_session(directory)
        if session.person_id in cohort:
            raise DataError(f"Person {session.person_id} appears twice under {root}")
        cohort[session.person_id] = session
    return dict(sorted(cohort.items()))


def import_ground_truth(
    root: PathLike,
    person_id: int,
    source: PathLike,
    smoothing: Optional[SmoothingParams] = None,
) -> Path:
    """
    Copy a recorded pose track into a session directory, optionally smoothed.

    Returns:
        Path: the written ``pose.csv``.
    """
    pose = read_pose_csv(source)
    if smoothing is not None:
        pose = smooth_ground_truth(pose, smoothing)
    directory = session_dir(root, person_id)
    target = write_pose_csv(directory / "pose.csv", pose)

    meta_path = directory / "meta.yaml"
    meta = {}
    if meta_path.is_file():
        with meta_path.open("r", encoding="utf-8") as handle:
            meta = yaml.safe_load(handle) or {}
    meta.update({"person_id": int(person_id), "n_pose_frames": int(pose.shape[0]), "smoothed": smoothing is not None})
    meta.setdefault("format", SESSION_FORMAT)
    meta.setdefault("rate_ratio", 9)
    meta.setdefault("pose_fps", 30.0)
    with meta_path.open("w", encoding="utf-8") as handle:
        yaml.safe_dump(meta, handle, sort_keys=True)

    logger.info(f"Imported {pose.shape[0]} ground-truth frames for person {person_id} from {source}")
    return target
