import datetime
import logging
from typing import Optional
from zoneinfo import ZoneInfo

import uvicorn
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from backend import settings
from backend.api.frame_routes import frame_router
from backend.api.pose_routes import pose_router

LOG_FORMAT = "%(asctime)s - %(levelname)s - origin: %(name)s - message: %(message)s"
LOG_DATEFMT = "%d-%m-%Y %H:%M:%S"


def configure_logging(level: Optional[str] = None, timezone: Optional[str] = None) -> None:
    """
    Configure the root logger once per process, with timestamps in the
    configured timezone.
    """
    tz = ZoneInfo(timezone or settings.log_timezone)
    logging.Formatter.converter = lambda *args: datetime.datetime.now(tz=tz).timetuple()

    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
        force=True,
    )


configure_logging()

app = FastAPI(title="Head Pose Impedance API", version="1.0.0")

app.include_router(pose_router)
app.include_router(frame_router)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


if __name__ == "__main__":
    uvicorn.run("main:app", host="127.0.0.1", port=8000, reload=True)
