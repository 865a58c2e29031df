"""
Three-joint forward kinematics, linear blend skinning of a seeded vertex
cloud and the joint/vertex position error metrics.

Positions are in meters internally; the metrics report millimeters.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from backend.core.errors import InvalidInputError, ShapeError
from backend.core.rotations import axis_angle_to_matrix
from backend.models import JOINT_NAMES, CloudConfig, SkeletonConfig

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-9
METERS_TO_MM = 1000.0


@dataclass(frozen=True)
class Skeleton:
    """
    Kinematic chain root -> neck -> head -> jaw.

    ``offsets[j]`` is the rest offset of joint ``j`` from its parent (the
    neck offset is taken from the root at the origin).
    """

    offsets: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, 0.0, 0.0], [0.0, 0.10, 0.0], [0.0, -0.04, 0.05]])
    )
    parents: Tuple[int, ...] = (-1, 0, 1)
    names: Tuple[str, ...] = JOINT_NAMES

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if offsets.shape != (3, 3):
            raise ShapeError("Skeleton", offsets.shape, (3, 3))
        if not np.all(np.isfinite(offsets)):
            raise InvalidInputError("Skeleton offsets must be finite")
        if any(p >= j for j, p in enumerate(self.parents)):
            raise InvalidInputError("Skeleton parents must precede their children")
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def from_config(cls, config: SkeletonConfig) -> "Skeleton":
        return cls(offsets=np.array([config.neck_offset, config.head_offset, config.jaw_offset]))

    def rest_positions(self) -> np.ndarray:
        positions = np.zeros((3, 3))
        for j, parent in enumerate(self.parents):
            base = positions[parent] if parent >= 0 else np.zeros(3)
            positions[j] = base + self.offsets[j]
        return positions


@dataclass(frozen=True)
class VertexCloud:
    """
    Rest vertices ``(N, 3)`` with skinning weights ``(N, 3)`` over the joints.

    ``assignment`` optionally fixes the joint each vertex belongs to for the
    per-joint metrics; without it the max-weight joint is used.
    """

    rest: np.ndarray
    weights: np.ndarray
    assignment: Optional[np.ndarray] = None

    def __post_init__(self):
        rest = np.asarray(self.rest, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if rest.ndim != 2 or rest.shape[1] != 3 or weights.shape != (rest.shape[0], 3):
            raise ShapeError("VertexCloud", rest.shape, weights.shape)
        if rest.shape[0] == 0:
            raise InvalidInputError("Vertex cloud is empty")
        if np.any(weights < 0.0):
            raise InvalidInputError("Skinning weights must be non-negative")
        if np.any(np.abs(weights.sum(axis=1) - 1.0) > WEIGHT_TOLERANCE):
            raise InvalidInputError("Skinning weights must sum to 1 for every vertex")
        object.__setattr__(self, "rest", rest)
        object.__setattr__(self, "weights", weights)
        if self.assignment is not None:
            assignment = np.asarray(self.assignment)
            if assignment.shape != (rest.shape[0],):
                raise ShapeError("VertexCloud.assignment", assignment.shape, (rest.shape[0],))
            if not np.all(np.isin(assignment, (0, 1, 2))):
                raise InvalidInputError("Vertex assignment must name joints 0, 1 or 2")
            object.__setattr__(self, "assignment", assignment.astype(np.int64))

    @property
    def n_vertices(self) -> int:
        return self.rest.shape[0]

    def dominant_joint(self) -> np.ndarray:
        """Joint each vertex is reported under: the stored assignment, else the max-weight joint."""
        if self.assignment is not None:
            return self.assignment
        return np.argmax(self.weights, axis=1)


def generate_cloud(
    config: CloudConfig = CloudConfig(), skeleton: Optional[Skeleton] = None
) -> VertexCloud:
    """
    Scatter vertices around the rest joints with Dirichlet skinning weights.

    Vertices are assigned round-robin to a dominant joint and the cloud
    keeps that assignment, so every joint owns at least one vertex. The same
    config always yields the same cloud.
    """
    skeleton = skeleton or Skeleton()
    rng = np.random.default_rng([config.seed, 7])
    joints = skeleton.rest_positions()

    dominant = np.arange(config.n_vertices) % 3
    rest = joints[dominant] + rng.normal(0.0, config.spread, size=(config.n_vertices, 3))

    alpha = np.full((config.n_vertices, 3), 0.3)
    alpha[np.arange(config.n_vertices), dominant] = 4.0
    weights = np.stack([rng.dirichlet(a) for a in alpha])
    weights /= weights.sum(axis=1, keepdims=True)

    logger.info(f"Generated vertex cloud with {config.n_vertices} vertices (seed={config.seed})")
    return VertexCloud(rest=rest, weights=weights, assignment=dominant)


def _check_poses(pose, op: str) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim == 0 or pose.shape[-1] != 9:
        raise ShapeError(op, pose.shape)
    if not np.all(np.isfinite(pose)):
        raise InvalidInputError(f"{op}: pose contains NaN or Inf")
    return pose


def world_transforms(
    pose, skeleton: Optional[Skeleton] = None, root_translation=None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    World rotations ``(..., 3, 3, 3)`` and joint positions ``(..., 3, 3)``.

    Each joint composes its parent's transform with its rest offset and the
    local rotation obtained from its axis-angle vector.
    """
    skeleton = skeleton or Skeleton()
    pose = _check_poses(pose, "forward_kinematics")
    local = axis_angle_to_matrix(pose.reshape(pose.shape[:-1] + (3, 3)))

    lead = pose.shape[:-1]
    rotations = np.empty(lead + (3, 3, 3))
    positions = np.empty(lead + (3, 3))
    root = np.zeros(lead + (3,)) if root_translation is None else np.broadcast_to(
        np.asarray(root_translation, dtype=np.float64), lead + (3,)
    )

    for j, parent in enumerate(skeleton.parents):
        if parent < 0:
            positions[..., j, :] = root + skeleton.offsets[j]
            rotations[..., j, :, :] = local[..., j, :, :]
        else:
            parent_rot = rotations[..., parent, :, :]
            positions[..., j, :] = positions[..., parent, :] + parent_rot @ skeleton.offsets[j]
            rotations[..., j, :, :] = parent_rot @ local[..., j, :, :]
    return rotations, positions


def forward_kinematics(pose, skeleton: Optional[Skeleton] = None, root_translation=None) -> np.ndarray:
    """
    Joint positions in meters, shape ``(..., 3, 3)`` for poses ``(..., 9)``.
    """
    return world_transforms(pose, skeleton, root_translation)[1]


def skin_vertices(
    pose, skeleton: Optional[Skeleton] = None, cloud: Optional[VertexCloud] = None,
    root_translation=None,
) -> np.ndarray:
    """
    Linear blend skinning of ``cloud`` under ``pose``.

    Args:
        pose: poses shaped ``(..., 9)``.
        skeleton (Skeleton, optional): defaults to the standard chain.
        cloud (VertexCloud, optional): defaults to a generated 500-vertex cloud.
        root_translation: optional rigid offset added to every joint (m).
    Returns:
        np.ndarray: posed vertices ``(..., N, 3)``.
    """
    skeleton = skeleton or Skeleton()
    cloud = cloud or generate_cloud(skeleton=skeleton)
    rotations, positions = world_transforms(pose, skeleton, root_translation)
    rest_joints = skeleton.rest_positions()

    # vertex relative to each rest joint: (N, J, 3)
    relative = cloud.rest[:, None, :] - rest_joints[None, :, :]
    # rigid image under every joint: (..., N, J, 3)
    images = np.einsum("...jab,njb->...nja", rotations, relative) + positions[..., None, :, :]
    return np.einsum("nj,...nja->...na", cloud.weights, images)


def _paired(gt, pred, op: str) -> Tuple[np.ndarray, np.ndarray]:
    gt = _check_poses(gt, op)
    pred = _check_poses(pred, op)
    if gt.shape != pred.shape:
        logger.error(f"{op}: shape mismatch {gt.shape} vs {pred.shape}")
        raise ShapeError(op, gt.shape, pred.shape)
    return gt, pred


def joint_errors(gt, pred, skeleton: Optional[Skeleton] = None, pred_root_translation=None) -> np.ndarray:
    """Per-joint Euclidean distances in millimeters, shape ``(..., 3)``."""
    gt, pred = _paired(gt, pred, "mpjpe")
    gt_joints = forward_kinematics(gt, skeleton)
    pred_joints = forward_kinematics(pred, skeleton, pred_root_translation)
    return np.linalg.norm(gt_joints - pred_joints, axis=-1) * METERS_TO_MM


def mpjpe(gt, pred, skeleton: Optional[Skeleton] = None, pred_root_translation=None) -> float:
    """
    Mean per-joint position error in millimeters over every frame and joint.
    """
    return float(np.mean(joint_errors(gt, pred, skeleton, pred_root_translation)))


def mpjpe_per_joint(gt, pred, skeleton: Optional[Skeleton] = None) -> np.ndarray:
    errors = joint_errors(gt, pred, skeleton)
    return errors.reshape(-1, 3).mean(axis=0)


def vertex_errors(
    gt, pred, skeleton: Optional[Skeleton] = None, cloud: Optional[VertexCloud] = None,
    pred_root_translation=None,
) -> np.ndarray:
    """Per-vertex distances in millimeters, shape ``(..., N)``."""
    gt, pred = _paired(gt, pred, "mpve")
    skeleton = skeleton or Skeleton()
    cloud = cloud or generate_cloud(skeleton=skeleton)
    gt_vertices = skin_vertices(gt, skeleton, cloud)
    pred_vertices = skin_vertices(pred, skeleton, cloud, pred_root_translation)
    return np.linalg.norm(gt_vertices - pred_vertices, axis=-1) * METERS_TO_MM


def mpve(
    gt, pred, skeleton: Optional[Skeleton] = None, cloud: Optional[VertexCloud] = None,
    pred_root_translation=None,
) -> float:
    """
    Mean per-vertex error in millimeters over every frame and vertex.
    """
    return float(np.mean(vertex_errors(gt, pred, skeleton, cloud, pred_root_translation)))


def mpve_per_joint(
    gt, pred, skeleton: Optional[Skeleton] = None, cloud: Optional[VertexCloud] = None
) -> np.ndarray:
    """
    Vertex error split by the joint each vertex is assigned to.

    A joint that no vertex is assigned to reports the mean vertex error
    weighted by its skinning weights instead.

    Raises:
        InvalidInputError: a joint has zero skinning weight on every vertex.
    """
    skeleton = skeleton or Skeleton()
    cloud = cloud or generate_cloud(skeleton=skeleton)
    errors = vertex_errors(gt, pred, skeleton, cloud).reshape(-1, cloud.n_vertices)
    dominant = cloud.dominant_joint()
    per_joint = np.empty(3)
    for j in range(3):
        members = dominant == j
        if np.any(members):
            per_joint[j] = errors[:, members].mean()
            continue
        weight = cloud.weights[:, j]
        if weight.sum() <= 0.0:
            logger.error(f"Joint {JOINT_NAMES[j]} drives no vertex of the cloud")
            raise InvalidInputError(f"mpve_per_joint: joint {JOINT_NAMES[j]} drives no vertex")
        per_joint[j] = float(errors.mean(axis=0) @ weight / weight.sum())
    return per_joint


def compose_error(e_a: float, e_b: float) -> float:
    """
    Combine two independent error sources: ``sqrt(e_a^2 + e_b^2)``.

    Raises:
        InvalidInputError: if either input is negative or not finite.
    """
    if not (math.isfinite(e_a) and math.isfinite(e_b)):
        raise InvalidInputError("compose_error: inputs must be finite")
    if e_a < 0 or e_b < 0:
        logger.error(f"compose_error called with negative input ({e_a}, {e_b})")
        raise InvalidInputError("compose_error: errors must be non-negative")
    return math.hypot(e_a, e_b)
