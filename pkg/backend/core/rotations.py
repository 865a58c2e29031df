"""
Rotation conversions and Gaussian smoothing of ground-truth joint tracks.

Quaternions are scalar-first ``(w, x, y, z)``. Axis-angle vectors are
``(x, y, z)`` with the direction as the axis and the norm as the angle in
radians; per joint the components are read as (pitch, yaw, roll).
All functions are vectorised over leading dimensions and never mutate input.
"""

import logging

import numpy as np

from backend.core.errors import DegenerateAverageError, InvalidInputError, ShapeError
from backend.models import SmoothingParams

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-6
DEGENERATE_NORM = 1e-8


def _as_vectors(values, width: int, op: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 0 or array.shape[-1] != width:
        raise ShapeError(op, array.shape)
    if not np.all(np.isfinite(array)):
        logger.error(f"{op}: non-finite input")
        raise InvalidInputError(f"{op}: input contains NaN or Inf")
    return array


def _check_unit(q: np.ndarray, op: str) -> None:
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        worst = float(np.max(np.abs(norms - 1.0)))
        logger.error(f"{op}: quaternion norm off by {worst:.3e}")
        raise InvalidInputError(
            f"{op}: expected unit quaternions (max |norm - 1| = {worst:.3e})"
        )


def axis_angle_to_quaternion(a) -> np.ndarray:
    """
    Convert axis-angle vectors ``(..., 3)`` to unit quaternions ``(..., 4)``.

    The zero vector maps to the identity ``(1, 0, 0, 0)``.

    Raises:
        InvalidInputError: if any component is not finite.
    """
    a = _as_vectors(a, 3, "axis_angle_to_quaternion")
    angle = np.linalg.norm(a, axis=-1, keepdims=True)
    half = 0.5 * angle

    # sin(x/2)/x ~ 1/2 - x^2/48 near zero
    small = angle < 1e-6
    safe = np.where(small, 1.0, angle)
    scale = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / safe)

    q = np.concatenate([np.cos(half), a * scale], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_axis_angle(q) -> np.ndarray:
    """
    Convert unit quaternions ``(..., 4)`` to canonical axis-angle ``(..., 3)``.

    The angle lies in ``[0, pi]``; ``q`` and ``-q`` give the same result.
    At exactly ``pi`` the axis whose leading non-zero component is positive
    is chosen.

    Raises:
        InvalidInputError: if a quaternion is not unit within 1e-6.
    """
    q = _as_vectors(q, 4, "quaternion_to_axis_angle")
    _check_unit(q, "quaternion_to_axis_angle")
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)

    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]

    # Half turn: w == 0, both signs are valid, pick the canonical axis
    half_turn = w == 0.0
    if np.any(half_turn):
        leading = np.take_along_axis(
            v, np.argmax(v != 0.0, axis=-1)[..., None], axis=-1
        )[..., 0]
        flip = half_turn & (leading < 0.0)
        v = np.where(flip[..., None], -v, v)

    norm_v = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(norm_v, w)
    tiny = norm_v < 1e-12
    scale = np.where(tiny, 2.0 / np.where(tiny, w, 1.0), angle / np.where(tiny, 1.0, norm_v))
    return v * scale[..., None]


def axis_angle_to_matrix(a) -> np.ndarray:
    """
    Rotation matrices ``(..., 3, 3)`` from axis-angle vectors (Rodrigues).
    """
    a = _as_vectors(a, 3, "axis_angle_to_matrix")
    angle = np.linalg.norm(a, axis=-1)
    safe = np.where(angle < 1e-12, 1.0, angle)
    axis = a / safe[..., None]

    rx, ry, rz = axis[..., 0], axis[..., 1], axis[..., 2]
    zeros = np.zeros_like(rx)
    k = np.stack(
        [zeros, -rz, ry, rz, zeros, -rx, -ry, rx, zeros], axis=-1
    ).reshape(a.shape[:-1] + (3, 3))

    sin = np.sin(angle)[..., None, None]
    cos = np.cos(angle)[..., None, None]
    eye = np.broadcast_to(np.eye(3), k.shape)
    rot = eye + sin * k + (1.0 - cos) * (k @ k)
    return np.where((angle < 1e-12)[..., None, None], eye, rot)


def quaternion_to_matrix(q) -> np.ndarray:
    q = _as_vectors(q, 4, "quaternion_to_matrix")
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return np.stack(rows, axis=-1).reshape(q.shape[:-1] + (3, 3))


def gaussian_weights(params: SmoothingParams) -> np.ndarray:
    k = np.arange(-params.half_window, params.half_window + 1, dtype=np.float64)
    return np.exp(-(k * k) / (2.0 * params.sigma * params.sigma))


def gaussian_smooth(track, params: SmoothingParams = SmoothingParams()) -> np.ndarray:
    """
    Gaussian-weighted average of each quaternion with its neighbours.

    Every neighbour is sign-flipped into the hemisphere of the centre frame
    before summing; windows are truncated at the sequence edges and the
    weights renormalised over the frames that exist.

    Args:
        track: unit quaternions shaped ``(T, 4)`` with ``T >= 1``.
        params (SmoothingParams): bandwidth and half window, in frames.
    Returns:
        np.ndarray: smoothed unit quaternions, same shape as ``track``.
    Raises:
        DegenerateAverageError: if a weighted sum nearly cancels out.
    """
    q = _as_vectors(track, 4, "gaussian_smooth")
    if q.ndim != 2 or q.shape[0] < 1:
        raise ShapeError("gaussian_smooth", q.shape)
    _check_unit(q, "gaussian_smooth")

    n_frames = q.shape[0]
    weights = gaussian_weights(params)
    total = np.zeros_like(q)
    support = np.zeros(n_frames)

    for index, offset in enumerate(range(-params.half_window, params.half_window + 1)):
        lo, hi = max(0, -offset), min(n_frames, n_frames - offset)
        if lo >= hi:
            continue
        centre = q[lo:hi]
        neighbour = q[lo + offset:hi + offset]
        sign = np.where(np.sum(neighbour * centre, axis=1) < 0.0, -1.0, 1.0)
        total[lo:hi] += weights[index] * sign[:, None] * neighbour
        support[lo:hi] += weights[index]

    total /= support[:, None]
    norms = np.linalg.norm(total, axis=1)
    degenerate = np.flatnonzero(norms < DEGENERATE_NORM)
    if degenerate.size:
        frame = int(degenerate[0])
        logger.error(f"Degenerate quaternion average at frame {frame}")
        raise DegenerateAverageError(frame, float(norms[frame]))

    return total / norms[:, None]


def smooth_ground_truth(
    track, params: SmoothingParams = SmoothingParams()
) -> np.ndarray:
    """
    Smooth a pose track ``(T, 9)`` joint by joint through quaternion space.

    Returns:
        np.ndarray: smoothed axis-angle track, shape ``(T, 9)``.
    """
    poses = _as_vectors(track, 9, "smooth_ground_truth")
    if poses.ndim != 2:
        raise ShapeError("smooth_ground_truth", poses.shape)

    smoothed = np.empty_like(poses)
    for joint in range(3):
        columns = slice(3 * joint, 3 * joint + 3)
        quats = axis_angle_to_quaternion(poses[:, columns])
        smoothed[:, columns] = quaternion_to_axis_angle(gaussian_smooth(quats, params))

    logger.info(
        f"Smoothed {poses.shape[0]} frames (sigma={params.sigma}, K={params.half_window})"
    )
    return smoothed
