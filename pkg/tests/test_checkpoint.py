import numpy as np
import pytest

from kinediff.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "enc.w": rng.standard_normal((7, 16)).astype(np.float32),
        "enc.b": rng.standard_normal(16).astype(np.float32),
        "head.w": rng.standard_normal((16, 3, 5)).astype(np.float32),
        "scalar": np.float32(3.25).reshape(()),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for name in params:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(
            loaded[name].view(np.uint32), np.asarray(params[name]).view(np.uint32)
        )


def test_header_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": np.zeros(2, np.float32)})
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    hlen = int.from_bytes(raw[8:12], "little")
    import json

    header = json.loads(raw[12 : 12 + hlen])
    assert header["params"][0]["name"] == "a"
    assert header["params"][0]["shape"] == [2]
    assert header["params"][0]["offset"] == 0
    assert len(raw) == 12 + hlen + 8


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_blob_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": np.zeros(4, np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_non_float32_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "m.ckpt", {"a": np.zeros(2, np.float64)})
