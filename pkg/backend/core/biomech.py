import logging

import numpy as np

from backend.core import autodiff as ad
from backend.core.errors import InvalidInputError, ShapeError
from backend.models import JointLimits

logger = logging.getLogger(__name__)


def bio_penalty(y_hat, limits: JointLimits = JointLimits()) -> ad.Tensor:
    """
    Mean squared hinge on joint angles outside their anatomical limits.

    Each of the ``B * L_out * 9`` entries contributes
    ``max(0, lower - y)^2 + max(0, y - upper)^2``; the result is their mean.
    Entries inside the closed interval contribute zero with zero gradient.

    Args:
        y_hat: predicted poses shaped ``(B, L_out, 9)`` (Tensor or array).
        limits (JointLimits): per-component bounds.
    Returns:
        Tensor: scalar penalty, differentiable with respect to ``y_hat``.
    """
    y_hat = ad.as_tensor(y_hat)
    if y_hat.ndim != 3 or y_hat.shape[-1] != 9:
        raise ShapeError("bio_penalty", y_hat.shape)

    lower = np.asarray(limits.lower)
    upper = np.asarray(limits.upper)
    below = ad.max_with_zero(ad.sub(lower, y_hat))
    above = ad.max_with_zero(ad.sub(y_hat, upper))
    return ad.mean(ad.add(ad.square(below), ad.square(above)))


def clamp_to_limits(pose, limits: JointLimits = JointLimits()) -> np.ndarray:
    """
    Clip every component of one or more poses ``(..., 9)`` into its limits.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim == 0 or pose.shape[-1] != 9:
        raise ShapeError("clamp_to_limits", pose.shape)
    if not np.all(np.isfinite(pose)):
        raise InvalidInputError("clamp_to_limits: pose contains NaN or Inf")
    return np.clip(pose, limits.lower, limits.upper)
