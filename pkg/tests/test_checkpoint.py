"""Checkpoint container: layout, determinism, corruption reporting."""

import numpy as np
import pytest

from tonetrans.checkpoint import (MAGIC, CorruptCheckpointError, file_sha256,
                                  inspect_checkpoint, load_checkpoint,
                                  save_checkpoint)


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "b/second": rng.standard_normal((3, 4)),
        "a/first": rng.standard_normal(5),
        "c/ids": np.arange(4, dtype=np.int64),
    }


def test_roundtrip(tmp_path):
    path = str(tmp_path / "x.ckpt")
    config = {"kind": "demo", "alpha": 1.0, "nested": {"n": 512}}
    save_checkpoint(path, config, sample_tensors())
    config2, tensors2 = load_checkpoint(path)
    assert config2 == config
    assert sorted(tensors2) == ["a/first", "b/second", "c/ids"]
    for k, v in sample_tensors().items():
        np.testing.assert_array_equal(tensors2[k], v)
        assert tensors2[k].dtype == v.dtype


def test_same_content_same_bytes(tmp_path):
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    # insertion order must not matter: tensors are written name-sorted
    t = sample_tensors()
    reversed_order = dict(reversed(list(t.items())))
    save_checkpoint(p1, {"k": 1}, t)
    save_checkpoint(p2, {"k": 1}, reversed_order)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_magic_and_inspect(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(path, {"kind": "demo"}, sample_tensors())
    with open(path, "rb") as f:
        assert f.read(4) == MAGIC
    info = inspect_checkpoint(path)
    assert info["config"]["kind"] == "demo"
    assert len(info["tensors"]) == 3
    names = [t["name"] for t in info["tensors"]]
    assert names == sorted(names)
    by_name = {t["name"]: t for t in info["tensors"]}
    assert by_name["b/second"]["shape"] == [3, 4]
    assert info["file_sha256"] == file_sha256(path)


def test_truncation_reports_offset(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(path, {"kind": "demo"}, sample_tensors())
    with open(path, "rb") as f:
        blob = f.read()
    cut = str(tmp_path / "cut.ckpt")
    with open(cut, "wb") as f:
        f.write(blob[: len(blob) - 7])
    with pytest.raises(CorruptCheckpointError) as e:
        load_checkpoint(cut)
    assert "byte offset" in str(e.value)


def test_bad_magic_offset_zero(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    with open(path, "wb") as f:
        f.write(b"WOOF" + b"\x00" * 64)
    with pytest.raises(CorruptCheckpointError) as e:
        load_checkpoint(path)
    assert e.value.offset == 0


def test_trailing_garbage_rejected(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(path, {}, {"only": np.zeros(2)})
    with open(path, "ab") as f:
        f.write(b"extra!")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_corrupt_config_json(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(path, {"key": "value"}, {"t": np.zeros(1)})
    with open(path, "rb") as f:
        blob = bytearray(f.read())
    idx = blob.find(b'"key"')
    blob[idx + 1] = 0xFF  # break the JSON text
    broken = str(tmp_path / "broken.ckpt")
    with open(broken, "wb") as f:
        f.write(bytes(blob))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(broken)


def test_file_sha256_stable(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(path, {"k": 2}, {"t": np.arange(3.0)})
    assert file_sha256(path) == file_sha256(path)
    assert len(file_sha256(path)) == 64
