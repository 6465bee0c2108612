import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fbpc_lab.arrays import MAGIC, load_arrays, save_arrays
from fbpc_lab.errors import ValidationError

dtypes = st.sampled_from([np.float64, np.float32, np.int64, np.int32, np.uint8, np.bool_])


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_round_trip(tmp_path_factory, data):
    dtype = data.draw(dtypes)
    arr = data.draw(hnp.arrays(dtype, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)))
    path = tmp_path_factory.mktemp("arr") / "a.fbpc"
    save_arrays(path, {"x": arr, "y": np.arange(3)}, {"note": "hi"})
    out, meta = load_arrays(path)
    assert meta == {"note": "hi"}
    assert out["x"].dtype == arr.dtype and out["x"].shape == arr.shape
    np.testing.assert_array_equal(out["x"], arr)


def test_documented_byte_layout(tmp_path):
    path = tmp_path / "a.fbpc"
    x = np.array([[1.5, -2.0], [3.0, 4.25]])
    y = np.array([7, 8, 9], dtype=np.int32)
    save_arrays(path, {"x": x, "y": y}, {"k": 1})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    base = 16 + hlen
    ex, ey = header["arrays"]
    assert (ex["name"], ex["dtype"], ex["shape"], ex["offset"], ex["nbytes"]) == ("x", "<f8", [2, 2], 0, 32)
    assert (ey["dtype"], ey["offset"], ey["nbytes"]) == ("<i4", 32, 12)
    # row-major little-endian payloads
    assert raw[base : base + 8] == struct.pack("<d", 1.5)
    assert raw[base + 8 : base + 16] == struct.pack("<d", -2.0)
    assert raw[base + 32 : base + 44] == struct.pack("<3i", 7, 8, 9)
    assert len(raw) == base + 44


def test_big_endian_input_is_stored_little_endian(tmp_path):
    x = np.arange(4, dtype=">f8")
    save_arrays(tmp_path / "a.fbpc", {"x": x})
    out, _ = load_arrays(tmp_path / "a.fbpc")
    assert out["x"].dtype.str == "<f8"
    np.testing.assert_array_equal(out["x"], np.arange(4.0))


def test_rejects_garbage_and_truncation(tmp_path):
    bad = tmp_path / "bad.fbpc"
    bad.write_bytes(b"nope" * 10)
    with pytest.raises(ValidationError):
        load_arrays(bad)
    good = tmp_path / "good.fbpc"
    save_arrays(good, {"x": np.arange(10.0)})
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValidationError):
        load_arrays(good)
    with pytest.raises(ValidationError):
        save_arrays(tmp_path / "c.fbpc", {"z": np.array([1 + 2j])})


def test_write_is_atomic_no_temp_left(tmp_path):
    save_arrays(tmp_path / "a.fbpc", {"x": np.zeros(3)})
    save_arrays(tmp_path / "a.fbpc", {"x": np.ones(3)})
    assert [p.name for p in tmp_path.iterdir()] == ["a.fbpc"]
    np.testing.assert_array_equal(load_arrays(tmp_path / "a.fbpc")[0]["x"], np.ones(3))
