import struct

import numpy as np
import pytest

from backend.core import checkpoint
from backend.core.errors import DataError


def test_container_layout():
    blob = checkpoint.dumps({"w": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"IMPH"
    assert blob[4] == 1
    assert int.from_bytes(blob[5:9], "little") == 1
    assert int.from_bytes(blob[9:11], "little") == 1
    assert blob[11:12] == b"w"
    assert blob[12] == 2
    assert len(blob) == 4 + 1 + 4 + 2 + 1 + 1 + 8 + 16


def test_save_and_load(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "scalar": np.array(2.5), "b.c": rng.normal(size=7)}
    path = checkpoint.save_arrays(tmp_path / "nested" / "params.imph", arrays)
    loaded = checkpoint.load_arrays(path)
    assert list(loaded) == list(arrays)
    for name, value in arrays.items():
        np.testing.assert_array_equal(loaded[name], value)
        assert loaded[name].shape == value.shape


def test_bad_magic():
    with pytest.raises(DataError, match="magic"):
        checkpoint.loads(b"XXXX" + b"\x00" * 10)


def test_truncated():
    blob = checkpoint.dumps({"w": np.ones(10)})
    with pytest.raises(DataError):
        checkpoint.loads(blob[:-5])


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        checkpoint.load_arrays(tmp_path / "absent.imph")


def test_name_that_is_not_utf8():
    blob = (
        b"IMPH"
        + struct.pack("<BI", 1, 1)
        + struct.pack("<H", 2)
        + b"\xff\xfe"
        + struct.pack("<B", 0)
        + struct.pack("<d", 1.0)
    )
    with pytest.raises(DataError, match="corrupt"):
        checkpoint.loads(blob)
