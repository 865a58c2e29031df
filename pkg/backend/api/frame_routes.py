import logging
import traceback

from fastapi import APIRouter, HTTPException

from backend.core.codec import SensorFrame, decode_frame, encode_frame
from backend.core.errors import FrameError
from backend.models import FrameHex, FramePayload

logger = logging.getLogger(__name__)

frame_router = APIRouter(prefix="/frames", tags=["Frames"])


@frame_router.post("/decode", response_model=FramePayload)
def decode(req: FrameHex) -> FramePayload:
    """
    Decode one hex-encoded wire frame.
    Args:
        req (FrameHex): the frame bytes as hex.
    Returns:
        FramePayload: timestamp and the 4 (magnitude, phase) pairs.
    """
    try:
        frame = decode_frame(bytes.fromhex(req.data))
        return FramePayload(
            timestamp=frame.timestamp,
            channels=[[m, p] for m, p in zip(frame.magnitudes, frame.phases)],
        )

    except FrameError as e:
        logger.error(f"Frame rejected ({e.kind}): {str(e)}")
        raise HTTPException(status_code=422, detail={"kind": e.kind, "message": str(e)})

    except ValueError as e:
        logger.error(f"Validation error: {str(e)}")
        raise HTTPException(status_code=422, detail={"kind": "invalid_hex", "message": str(e)})

    except Exception as e:
        logger.error(f"Unexpected error: {traceback.format_exc()}")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


@frame_router.post("/encode", response_model=FrameHex)
def encode(req: FramePayload) -> FrameHex:
    try:
        if any(len(pair) != 2 for pair in req.channels):
            raise ValueError("Each channel needs exactly [magnitude, phase]")
        frame = SensorFrame(
            timestamp=req.timestamp,
            magnitudes=tuple(pair[0] for pair in req.channels),
            phases=tuple(pair[1] for pair in req.channels),
        )
        return FrameHex(data=encode_frame(frame).hex())

    except ValueError as e:
        logger.error(f"Validation error: {str(e)}")
        raise HTTPException(status_code=422, detail={"kind": "invalid_frame", "message": str(e)})

    except Exception as e:
        logger.error(f"Unexpected error: {traceback.format_exc()}")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")
