import struct

import numpy as np
import pytest

from tristream import tensorfile
from tristream.tensorfile import TensorFileError


def test_layout_bytes():
    buf = tensorfile.dumps(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"T3SR"
    assert buf[4:6] == bytes([1, 2])
    assert struct.unpack("<2I", buf[6:14]) == (1, 3)
    assert np.frombuffer(buf[14:], "<f4").tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize("shape", [(), (5,), (2, 3), (1, 2, 3, 4, 5)])
def test_round_trip(tmp_path, shape):
    a = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
    tensorfile.save(tmp_path / "a.t3sr", a)
    b = tensorfile.load(tmp_path / "a.t3sr")
    assert b.shape == a.shape and b.dtype == np.float32
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("buf", [b"XXXX\x01\x00", b"T3SR\x02\x00", b"T3SR\x01\x02\x01\x00", b"T3SR\x01\x01\x02\x00\x00\x00abcd"])
def test_corrupt_files_rejected(buf):
    with pytest.raises(TensorFileError):
        tensorfile.loads(buf)
