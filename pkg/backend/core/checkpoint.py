"""
Binary container for named parameter arrays.

Layout (little-endian)::

    b"IMPH"                magic
    u8                     version (1)
    u32                    record count
    per record:
        u16 + bytes        UTF-8 name, length-prefixed
        u8 + u32 * ndim    shape, rank-prefixed
        f64 * prod(shape)  data, row-major
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from backend.core.errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b"IMPH"
VERSION = 1


def dumps(arrays: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        values = np.ascontiguousarray(array, dtype="<f8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<B{values.ndim}I", values.ndim, *values.shape))
        chunks.append(values.tobytes())
    return b"".join(chunks)


def loads(buffer: bytes) -> Dict[str, np.ndarray]:
    """
    Parse a container produced by :func:`dumps`.

    Raises:
        DataError: bad magic, unsupported version, truncated records or
            names that are not UTF-8.
    """
    if buffer[:4] != MAGIC:
        raise DataError("Not a parameter checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<BI", buffer, 4)
        if version != VERSION:
            raise DataError(f"Unsupported checkpoint version {version}")
        offset = 9
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buffer, offset)
            offset += 2
            name = buffer[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", buffer, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", buffer, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            end = offset + 8 * size
            if end > len(buffer):
                raise DataError(f"Checkpoint record {name!r} is truncated")
            arrays[name] = np.frombuffer(buffer[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
            offset = end
    except (struct.error, UnicodeDecodeError) as e:
        logger.error(f"Checkpoint is truncated or corrupt: {e}")
        raise DataError(f"Checkpoint is truncated or corrupt: {e}") from e
    return arrays


def save_arrays(path: Union[str, Path], arrays: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(arrays))
    logger.info(f"Wrote {len(arrays)} arrays to {path}")
    return path


def load_arrays(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        logger.error(f"Checkpoint not found: {path}")
        raise DataError(f"Checkpoint not found: {path}")
    return loads(path.read_bytes())
