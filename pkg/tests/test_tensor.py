import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sefcn.tensor import InvalidShapeError, TensorFormatError, as_nchw, concat_channels, \
    decode_tensor, elementwise, encode_tensor, global_spatial_mean, read_tensor, read_tensors, \
    scale_channels, scale_spatial, write_tensor, write_tensors


def test_global_spatial_mean_is_per_item_and_channel(rng):
    u = rng.standard_normal((3, 4, 5, 6))
    z = global_spatial_mean(u)
    assert z.shape == (3, 4, 1, 1)
    assert np.allclose(z[2, 1, 0, 0], u[2, 1].mean())


def test_scale_channels_accepts_vector_and_per_batch(rng):
    u = rng.standard_normal((2, 3, 4, 4))
    s = np.array([0.5, 1.0, 2.0])
    assert np.allclose(scale_channels(u, s)[:, 2], 2 * u[:, 2])
    per_batch = rng.random((2, 3, 1, 1))
    assert np.allclose(scale_channels(u, per_batch)[1, 0], per_batch[1, 0, 0, 0] * u[1, 0])
    with pytest.raises(InvalidShapeError):
        scale_channels(u, np.ones(4))


def test_scale_spatial_broadcasts_over_channels(rng):
    u = rng.standard_normal((2, 3, 4, 5))
    m = rng.random((4, 5))
    out = scale_spatial(u, m)
    assert np.allclose(out[1, 2], u[1, 2] * m)
    with pytest.raises(InvalidShapeError):
        scale_spatial(u, np.ones((5, 4)))


def test_elementwise_and_concat():
    a = np.arange(8.0).reshape(1, 2, 2, 2)
    b = np.full_like(a, 3.0)
    assert np.array_equal(elementwise("max", a, b), np.maximum(a, b))
    assert np.array_equal(elementwise("add", a, b), a + 3)
    assert concat_channels(a, b).shape == (1, 4, 2, 2)
    with pytest.raises(InvalidShapeError):
        elementwise("mul", a, b[:, :1])
    with pytest.raises(ValueError):
        elementwise("sub", a, b)
    with pytest.raises(InvalidShapeError):
        concat_channels(a, b[:, :, :1])


def test_as_nchw_prepends_unit_axes():
    assert as_nchw(np.zeros((4, 5))).shape == (1, 1, 4, 5)
    with pytest.raises(InvalidShapeError):
        as_nchw(np.zeros((1, 1, 1, 1, 1)))


def test_encoding_layout_is_little_endian():
    buf = encode_tensor(np.array([[1.0, -2.0, 0.5]], dtype=np.float32))
    assert buf[:4] == b"FTNS"
    assert struct.unpack("<III", buf[4:16]) == (2, 1, 3)
    assert np.array_equal(np.frombuffer(buf[16:], "<f4"), [1.0, -2.0, 0.5])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_is_bit_exact(t):
    out, end = decode_tensor(encode_tensor(t))
    assert end == len(encode_tensor(t))
    assert out.shape == t.shape and np.array_equal(out, t)


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XTNS" + b[4:], 0),
    (lambda b: b[:6], 0),
    (lambda b: b[:4] + struct.pack("<I", 7) + b[8:], 4),
    (lambda b: b[:-1], 16),
])
def test_malformed_streams_report_offset(mutate, offset):
    buf = encode_tensor(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(TensorFormatError) as e:
        decode_tensor(mutate(buf))
    assert e.value.offset == offset
    assert f"at byte {offset}" in str(e.value)


def test_file_io(tmp_path):
    t = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_tensor(t, tmp_path / "a.tns")
    assert np.array_equal(read_tensor(tmp_path / "a.tns"), t)
    with open(tmp_path / "a.tns", "ab") as f:
        f.write(b"\0")
    with pytest.raises(TensorFormatError, match="trailing"):
        read_tensor(tmp_path / "a.tns")
    many = [t, np.ones(3, np.float32), np.zeros((1, 2, 3, 4), np.float32)]
    write_tensors(many, tmp_path / "b.tns")
    back = read_tensors(tmp_path / "b.tns")
    assert [x.shape for x in back] == [x.shape for x in many]
    assert all(np.array_equal(x, y) for x, y in zip(back, many))
