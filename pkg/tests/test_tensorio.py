"""Array serialization format and atomic file writes."""

import os

import numpy as np
import pytest

from tonetrans.tensorio import (TensorFormatError, atomic_write_bytes,
                                decode_array, encode_array, load_array,
                                save_array)


@pytest.mark.parametrize("arr", [
    np.arange(12, dtype=np.float64).reshape(3, 4),
    np.arange(5, dtype=np.float32),
    np.array([[1, 2], [3, 4]], dtype=np.int64),
    np.float64(3.5).reshape(()),  # rank 0
])
def test_encode_decode_roundtrip(arr):
    buf = encode_array(arr)
    out, end = decode_array(buf, 0)
    assert end == len(buf)
    assert out.dtype == arr.dtype
    np.testing.assert_array_equal(out, arr)


def test_encode_is_deterministic():
    a = np.random.default_rng(0).standard_normal((4, 4))
    assert encode_array(a) == encode_array(a.copy())


def test_decode_truncated_reports_offset():
    buf = encode_array(np.arange(10, dtype=np.float64))
    with pytest.raises(TensorFormatError) as e:
        decode_array(buf[:-3], 0)
    assert "byte offset" in str(e.value)
    assert e.value.offset >= 0


def test_decode_bad_dtype_code():
    buf = bytearray(encode_array(np.arange(4, dtype=np.float64)))
    buf[0] = 99
    with pytest.raises(TensorFormatError):
        decode_array(bytes(buf), 0)


def test_unsupported_dtype_rejected():
    with pytest.raises(TypeError):
        encode_array(np.array(["a", "b"]))


def test_save_load_file_roundtrip(tmp_path):
    path = str(tmp_path / "x.ten")
    arr = np.random.default_rng(1).standard_normal((7, 3)).astype(np.float32)
    save_array(path, arr)
    out = load_array(path)
    np.testing.assert_array_equal(out, arr)
    assert out.dtype == np.float32


def test_load_rejects_trailing_garbage(tmp_path):
    path = str(tmp_path / "x.ten")
    save_array(path, np.zeros(3))
    with open(path, "ab") as f:
        f.write(b"junk")
    with pytest.raises(TensorFormatError):
        load_array(path)


def test_load_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "x.ten")
    with open(path, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 20)
    with pytest.raises(TensorFormatError) as e:
        load_array(path)
    assert "offset 0" in str(e.value)


def test_atomic_write_replaces_whole_file(tmp_path):
    path = str(tmp_path / "f.bin")
    atomic_write_bytes(path, b"first version")
    atomic_write_bytes(path, b"second")
    with open(path, "rb") as f:
        assert f.read() == b"second"
    # no stray temp files left behind
    assert os.listdir(tmp_path) == ["f.bin"]
