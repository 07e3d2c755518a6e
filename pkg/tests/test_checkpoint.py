import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybridsod.checkpoint import MAGIC, VERSION, load_checkpoint, save_checkpoint
from hybridsod.exceptions import DataError


def _arrays(rng):
    return {"w": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(5),
            "n": np.array(7, dtype=np.int64),
            "empty": np.zeros((0, 2), np.float32)}


def test_round_trip(tmp_path, rng):
    src = _arrays(rng)
    save_checkpoint(tmp_path / "c.ckpt", src, {"a": [1, 2]}, kind="test")
    got, cfg, kind = load_checkpoint(tmp_path / "c.ckpt")
    assert kind == "test" and cfg == {"a": [1, 2]}
    assert list(got) == list(src)
    for k in src:
        assert got[k].dtype == src[k].dtype and got[k].shape == src[k].shape
        assert got[k].tobytes() == src[k].tobytes()


def test_header_layout(tmp_path, rng):
    src = _arrays(rng)
    path = save_checkpoint(tmp_path / "c.ckpt", src, kind="x")
    data = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<8sIQ", data)
    assert magic == MAGIC == b"HSODCKPT" and version == VERSION == 1
    header = json.loads(data[20:20 + hlen])
    assert header["kind"] == "x"
    w = header["tensors"][0]
    assert w["name"] == "w" and w["dtype"] == "<f4" and w["shape"] == [3, 4]
    assert w["offset"] == 0 and w["nbytes"] == 48
    payload = np.frombuffer(data, "<f4", 12, 20 + hlen + w["offset"])
    assert payload.tobytes() == src["w"].tobytes()


def test_big_endian_input_is_stored_little_endian(tmp_path):
    arr = np.arange(6, dtype=">f8").reshape(2, 3)
    save_checkpoint(tmp_path / "e.ckpt", {"a": arr})
    got = load_checkpoint(tmp_path / "e.ckpt")[0]["a"]
    assert got.dtype.str == "<f8" and np.array_equal(got, arr)


def test_bad_magic_version_and_truncation(tmp_path, rng):
    path = save_checkpoint(tmp_path / "c.ckpt", _arrays(rng))
    data = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(data[:8] + struct.pack("<I", 99) + data[12:])
    with pytest.raises(DataError, match="version"):
        load_checkpoint(bad)
    for cut in (5, 30, len(data) - 3):
        bad.write_bytes(data[:cut])
        with pytest.raises(DataError, match="truncated|corrupt"):
            load_checkpoint(bad)


def test_save_is_atomic_replacement(tmp_path, rng):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"a": np.ones(3)})
    save_checkpoint(path, {"a": np.zeros(3)})
    assert np.array_equal(load_checkpoint(path)[0]["a"], np.zeros(3))
    assert not list(tmp_path.glob("*.tmp"))


@settings(max_examples=40, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64, np.int32, np.uint8]),
              st.tuples(st.integers(0, 4), st.integers(1, 4))))
def test_round_trip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ck") / "p.ckpt"
    save_checkpoint(path, {"x": arr})
    got = load_checkpoint(path)[0]["x"]
    assert got.shape == arr.shape and got.tobytes() == arr.astype(arr.dtype.newbyteorder("<")).tobytes()
