import logging
import traceback

import numpy as np
from fastapi import APIRouter, HTTPException, Query

from backend.core import autodiff as ad
from backend.core.biomech import bio_penalty, clamp_to_limits
from backend.core.kinematics import compose_error
from backend.core.rotations import smooth_ground_truth
from backend.core.training import lr_at_epoch
from backend.models import (
    ClampRequest,
    ComposeErrorRequest,
    JointLimits,
    PenaltyRequest,
    SmoothingParams,
    SmoothingRequest,
    SmoothingResponse,
    TrainConfig,
)

logger = logging.getLogger(__name__)

pose_router = APIRouter(tags=["Pose"])


def _limits(overrides) -> JointLimits:
    return JointLimits.model_validate(overrides) if overrides else JointLimits()


@pose_router.post("/smoothing", response_model=SmoothingResponse)
def smooth_track(req: SmoothingRequest) -> SmoothingResponse:
    """
    Smooth a 9-column ground-truth pose track through quaternion space.
    Args:
        req (SmoothingRequest): pose frames and smoothing parameters.
    Returns:
        SmoothingResponse: the smoothed track.
    """
    try:
        logger.info(f"Smoothing {len(req.track)} frames")
        params = SmoothingParams(sigma=req.sigma, half_window=req.half_window)
        smoothed = smooth_ground_truth(np.asarray(req.track, dtype=np.float64), params)
        return SmoothingResponse(success=True, track=smoothed.tolist())

    except ValueError as e:
        logger.error(f"Validation error: {str(e)}")
        raise HTTPException(status_code=422, detail=str(e))

    except HTTPException as e:
        logger.error(f"HTTP Error: {e.detail}")
        raise e

    except Exception as e:
        logger.error(f"Unexpected error: {traceback.format_exc()}")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


@pose_router.post("/penalty")
def penalty(req: PenaltyRequest) -> dict:
    """
    Biomechanical penalty of a batch of predicted poses.
    """
    try:
        with ad.no_grad():
            value = bio_penalty(np.asarray(req.poses, dtype=np.float64), _limits(req.limits)).item()
        return {"penalty": value}

    except ValueError as e:
        logger.error(f"Validation error: {str(e)}")
        raise HTTPException(status_code=422, detail=str(e))

    except Exception as e:
        logger.error(f"Unexpected error: {traceback.format_exc()}")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


@pose_router.post("/clamp")
def clamp(req: ClampRequest) -> dict:
    try:
        clamped = clamp_to_limits(np.asarray(req.poses, dtype=np.float64), _limits(req.limits))
        return {"poses": clamped.tolist()}

    except ValueError as e:
        logger.error(f"Validation error: {str(e)}")
        raise HTTPException(status_code=422, detail=str(e))

    except Exception as e:
        logger.error(f"Unexpected error: {traceback.format_exc()}")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


@pose_router.post("/compose-error")
def compose(req: ComposeErrorRequest) -> dict:
    try:
        return {"composed_mm": compose_error(req.e_a, req.e_b)}

    except ValueError as e:
        logger.error(f"Validation error: {str(e)}")
        raise HTTPException(status_code=422, detail=str(e))


@pose_router.get("/schedule/lr")
def learning_rate(epoch: int = Query(..., ge=0, description="Zero-based epoch")) -> dict:
    return {"epoch": epoch, "learning_rate": lr_at_epoch(TrainConfig(), epoch)}
