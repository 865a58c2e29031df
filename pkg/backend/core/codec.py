"""
Wire format of one impedance sample, 45 bytes, little-endian::

    0   2   magic b"NS"
    2   1   version 0x01
    3   8   u64 timestamp (ms)
    11  32  8 x f32: mag1, phase1, mag2, phase2, mag3, phase3, mag4, phase4
    43  2   u16 CRC-16/CCITT-FALSE over bytes 0..42

Decoding checks, in order: length of the magic, magic, version, full
length, CRC. Each failure raises its own :class:`FrameError` subclass.
"""

import logging
import math
import struct
from binascii import crc_hqx
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from backend.core.errors import (
    BadMagicError,
    BadVersionError,
    CrcMismatchError,
    FrameError,
    InvalidInputError,
    ShapeError,
    ShortBufferError,
)

logger = logging.getLogger(__name__)

MAGIC = b"NS"
VERSION = 0x01
N_CHANNELS = 4
HEADER = struct.Struct("<2sBQ")
BODY = struct.Struct("<2sBQ8f")
FRAME_SIZE = BODY.size + 2
PHASE_TOLERANCE = 1e-6
CRC_INIT = 0xFFFF

FRAME_DTYPE = np.dtype(
    [("magic", "S2"), ("version", "u1"), ("timestamp", "<u8"), ("values", "<f4", (8,)), ("crc", "<u2")]
)


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF); check("123456789") = 0x29B1."""
    return crc_hqx(data, CRC_INIT)


def _crc_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint16)
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
            crc &= 0xFFFF
        table[byte] = crc
    return table


_CRC_TABLE = _crc_table()


def crc16_rows(rows: np.ndarray) -> np.ndarray:
    """Table-driven CRC of every row of a ``(N, n_bytes)`` uint8 array."""
    crc = np.full(rows.shape[0], CRC_INIT, dtype=np.uint16)
    for column in range(rows.shape[1]):
        index = ((crc >> 8) ^ rows[:, column]) & 0xFF
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[index]
    return crc.astype(np.uint16)


@dataclass(frozen=True)
class SensorFrame:
    """
    One 4-channel impedance sample: magnitudes in ohms, phases in radians.
    """

    timestamp: int
    magnitudes: Tuple[float, float, float, float]
    phases: Tuple[float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "magnitudes", tuple(float(m) for m in self.magnitudes))
        object.__setattr__(self, "phases", tuple(float(p) for p in self.phases))

    def validate(self, phase_tolerance: float = 0.0) -> None:
        if not 0 <= self.timestamp < 2**64:
            raise InvalidInputError(f"Timestamp {self.timestamp} does not fit in u64")
        if len(self.magnitudes) != N_CHANNELS or len(self.phases) != N_CHANNELS:
            raise ShapeError("SensorFrame", (len(self.magnitudes),), (len(self.phases),))
        for channel, (mag, phase) in enumerate(zip(self.magnitudes, self.phases), start=1):
            if not (math.isfinite(mag) and mag > 0.0):
                raise InvalidInputError(f"Channel {channel} magnitude must be positive, got {mag}")
            if not (-math.pi - phase_tolerance < phase <= math.pi + phase_tolerance):
                raise InvalidInputError(f"Channel {channel} phase {phase} outside (-pi, pi]")

    def features(self) -> np.ndarray:
        """The 8 interleaved features ``(mag1, phase1, ..., mag4, phase4)``."""
        return np.column_stack([self.magnitudes, self.phases]).reshape(-1)

    @classmethod
    def from_features(cls, timestamp: int, features: Sequence[float]) -> "SensorFrame":
        values = np.asarray(features, dtype=np.float64).reshape(N_CHANNELS, 2)
        return cls(timestamp=int(timestamp), magnitudes=tuple(values[:, 0]), phases=tuple(values[:, 1]))

    def quantized(self) -> "SensorFrame":
        """The frame as it reads back after a pass through the wire (f32 values)."""
        values = self.features().astype(np.float32).astype(np.float64)
        return SensorFrame.from_features(self.timestamp, values)


def encode_frame(frame: SensorFrame) -> bytes:
    """
    Serialise one frame to its 45-byte wire form.

    Raises:
        InvalidInputError: if the frame breaks its invariants.
    """
    frame.validate()
    body = BODY.pack(MAGIC, VERSION, frame.timestamp, *frame.features().tolist())
    return body + struct.pack("<H", crc16(body))


def decode_frame(buffer: bytes) -> SensorFrame:
    """
    Parse exactly one wire frame.

    Raises:
        ShortBufferError: fewer bytes than the header or the full frame needs.
        BadMagicError, BadVersionError, CrcMismatchError: corrupted frame.
        FrameError: trailing bytes after the frame.
    """
    buffer = bytes(buffer)
    if len(buffer) < len(MAGIC):
        raise ShortBufferError(f"Need {FRAME_SIZE} bytes, got {len(buffer)}")
    if buffer[:2] != MAGIC:
        raise BadMagicError(f"Bad magic {buffer[:2].hex()}")
    if len(buffer) < 3:
        raise ShortBufferError(f"Need {FRAME_SIZE} bytes, got {len(buffer)}")
    if buffer[2] != VERSION:
        raise BadVersionError(f"Unsupported frame version {buffer[2]}")
    if len(buffer) < FRAME_SIZE:
        raise ShortBufferError(f"Need {FRAME_SIZE} bytes, got {len(buffer)}")
    if len(buffer) > FRAME_SIZE:
        raise FrameError(f"{len(buffer) - FRAME_SIZE} trailing bytes after frame")

    (received,) = struct.unpack_from("<H", buffer, BODY.size)
    expected = crc16(buffer[:BODY.size])
    if received != expected:
        raise CrcMismatchError(f"CRC mismatch: expected 0x{expected:04X}, got 0x{received:04X}")

    _, _, timestamp, *values = BODY.unpack_from(buffer)
    frame = SensorFrame.from_features(timestamp, values)
    try:
        frame.validate(phase_tolerance=PHASE_TOLERANCE)
    except InvalidInputError as e:
        raise FrameError(f"Frame payload out of range: {e}") from e
    return frame


def encode_frames(timestamps, features) -> bytes:
    """
    Vectorised encoder for a whole track.

    Args:
        timestamps: ``(N,)`` non-negative integers, strictly increasing.
        features: ``(N, 8)`` interleaved magnitude/phase values.
    Returns:
        bytes: ``N`` concatenated wire frames.
    """
    timestamps = np.asarray(timestamps)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != 2 * N_CHANNELS or timestamps.shape != (features.shape[0],):
        raise ShapeError("encode_frames", timestamps.shape, features.shape)
    if timestamps.size and (timestamps.min() < 0 or np.any(np.diff(timestamps) <= 0)):
        raise InvalidInputError("Timestamps must be non-negative and strictly increasing")
    magnitudes, phases = features[:, 0::2], features[:, 1::2]
    if not (np.all(np.isfinite(features)) and np.all(magnitudes > 0.0)):
        raise InvalidInputError("Magnitudes must be finite and positive")
    if np.any(phases <= -math.pi) or np.any(phases > math.pi):
        raise InvalidInputError("Phases must lie in (-pi, pi]")

    records = np.zeros(features.shape[0], dtype=FRAME_DTYPE)
    records["magic"] = MAGIC
    records["version"] = VERSION
    records["timestamp"] = timestamps.astype(np.uint64)
    records["values"] = features.astype(np.float32)

    raw = records.view(np.uint8).reshape(-1, FRAME_SIZE)
    records["crc"] = crc16_rows(raw[:, :BODY.size])
    return records.tobytes()


def decode_stream(buffer: bytes) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised decoder for concatenated frames.

    Returns:
        Tuple[np.ndarray, np.ndarray]: timestamps ``(N,)`` as uint64 and
        features ``(N, 8)`` as float64.
    Raises:
        FrameError: the first offending frame, with its index in the message.
    """
    buffer = bytes(buffer)
    if len(buffer) % FRAME_SIZE:
        raise ShortBufferError(
            f"Stream of {len(buffer)} bytes is not a whole number of {FRAME_SIZE}-byte frames"
        )
    records = np.frombuffer(buffer, dtype=FRAME_DTYPE)
    raw = np.frombuffer(buffer, dtype=np.uint8).reshape(-1, FRAME_SIZE)

    checks = (
        (records["magic"] != MAGIC, BadMagicError, "bad magic"),
        (records["version"] != VERSION, BadVersionError, "unsupported version"),
        (records["crc"] != crc16_rows(raw[:, :BODY.size]), CrcMismatchError, "CRC mismatch"),
    )
    for failed, error, label in checks:
        if np.any(failed):
            index = int(np.flatnonzero(failed)[0])
            logger.error(f"Frame {index} rejected: {label}")
            raise error(f"Frame {index}: {label}")

    features = records["values"].astype(np.float64)
    magnitudes, phases = features[:, 0::2], features[:, 1::2]
    with np.errstate(invalid="ignore"):
        out_of_range = (
            ~np.isfinite(features).all(axis=1)
            | (magnitudes <= 0.0).any(axis=1)
            | (phases <= -math.pi - PHASE_TOLERANCE).any(axis=1)
            | (phases > math.pi + PHASE_TOLERANCE).any(axis=1)
        )
    if np.any(out_of_range):
        index = int(np.flatnonzero(out_of_range)[0])
        logger.error(f"Frame {index} rejected: payload out of range")
        raise FrameError(f"Frame {index}: payload out of range")
    return records["timestamp"].copy(), features


def iter_frames(buffer: bytes) -> Iterable[SensorFrame]:
    for offset in range(0, len(buffer), FRAME_SIZE):
        yield decode_frame(buffer[offset:offset + FRAME_SIZE])


def frames_to_arrays(frames: List[SensorFrame]) -> Tuple[np.ndarray, np.ndarray]:
    timestamps = np.array([f.timestamp for f in frames], dtype=np.uint64)
    features = np.array([f.features() for f in frames]).reshape(-1, 2 * N_CHANNELS)
    return timestamps, features
