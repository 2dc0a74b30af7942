import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from diibench.container import ContainerError, dumps, load_file, loads, save_file


def test_roundtrip_dtypes(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5),
        "c": np.arange(6, dtype=np.int64).reshape(2, 3),
        "d": np.array([True, False]),
        "e": np.float16([1.5, -2.0]),
        "scalar": np.float32(3.0).reshape(()),
    }
    save_file(tensors, tmp_path / "x.safetensors", {"format": "np"})
    back, meta = load_file(tmp_path / "x.safetensors")
    assert meta == {"format": "np"}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)


def test_header_layout():
    data = dumps({"w": np.zeros((2, 2), np.float32)})
    (n,) = struct.unpack("<Q", data[:8])
    assert (8 + n) % 8 == 0
    header = json.loads(data[8 : 8 + n])
    assert header["w"] == {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}


def test_bf16_read():
    vals = np.float32([1.0, -2.5, 3.140625])
    raw = (vals.view(np.uint32) >> 16).astype("<u2").tobytes()
    header = json.dumps({"w": {"dtype": "BF16", "shape": [3], "data_offsets": [0, 6]}}).encode()
    tensors, _ = loads(struct.pack("<Q", len(header)) + header + raw)
    assert np.array_equal(tensors["w"], vals)


@pytest.mark.parametrize(
    "blob",
    [
        b"\x01\x02",
        struct.pack("<Q", 999) + b"{}",
        struct.pack("<Q", 2) + b"[]",
        struct.pack("<Q", 5) + b"{oops",
    ],
)
def test_malformed(blob):
    with pytest.raises(ContainerError):
        loads(blob)


def test_out_of_range_offsets():
    header = json.dumps({"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}).encode()
    with pytest.raises(ContainerError):
        loads(struct.pack("<Q", len(header)) + header + b"\0" * 8)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=5), elements=st.floats(-1e3, 1e3, width=32)))
def test_roundtrip_property(arr):
    back, _ = loads(dumps({"t": arr}))
    assert np.array_equal(back["t"], arr)


def test_interop_with_reference_library(tmp_path):
    st_np = pytest.importorskip("safetensors.numpy")
    rng = np.random.default_rng(1)
    tensors = {"x": rng.standard_normal((4, 3)).astype(np.float32), "y": np.arange(5, dtype=np.int32)}
    st_np.save_file(tensors, str(tmp_path / "ref.safetensors"))
    ours, _ = load_file(tmp_path / "ref.safetensors")
    save_file(tensors, tmp_path / "ours.safetensors")
    ref = st_np.load_file(str(tmp_path / "ours.safetensors"))
    for k in tensors:
        assert np.array_equal(ours[k], tensors[k]) and np.array_equal(ref[k], tensors[k])
