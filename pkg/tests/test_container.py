import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dv4d.container import (
    ChecksumError,
    FormatError,
    TruncationError,
    VersionError,
    read_bundle,
    read_records,
    read_tensor,
    tensor_bytes,
    tensor_from_bytes,
    write_bundle,
    write_tensor,
)


def arrays():
    return [
        np.arange(24, dtype=np.float64).reshape(2, 3, 4),
        np.float32([[1.5, -0.25], [np.inf, 3.0]]),
        np.uint8([[0, 255], [17, 128]]),
        np.int32([-(2**31), 2**31 - 1]),
        np.int64([0]),
        np.array(True),
        np.zeros((0, 5), dtype=np.float64),
        np.array(2.5),
    ]


def test_round_trip_bit_exact(tmp_path):
    for i, a in enumerate(arrays()):
        p = tmp_path / f"t{i}.dv4d"
        write_tensor(p, a)
        b = read_tensor(p)
        assert b.dtype == a.dtype
        assert b.shape == a.shape
        assert a.tobytes() == b.tobytes()


def test_nan_payload_round_trip():
    a = np.array([np.nan, -np.nan, 0.0, -0.0])
    b, _ = tensor_from_bytes(tensor_bytes(a))
    assert a.tobytes() == b.tobytes()


def test_read_is_writable():
    b, _ = tensor_from_bytes(tensor_bytes(np.zeros(3)))
    b[0] = 1.0  # must own its memory, not view the input buffer


def test_corrupted_magic_rejected():
    buf = bytearray(tensor_bytes(np.zeros(2)))
    buf[0] ^= 0xFF
    with pytest.raises(FormatError):
        tensor_from_bytes(bytes(buf))


def test_version_mismatch_rejected():
    buf = bytearray(tensor_bytes(np.zeros(2)))
    buf[4] = 99
    with pytest.raises(VersionError):
        tensor_from_bytes(bytes(buf))


def test_unknown_dtype_tag_rejected():
    buf = bytearray(tensor_bytes(np.zeros(2)))
    buf[6] = 200
    with pytest.raises(FormatError):
        tensor_from_bytes(bytes(buf))


def test_flipped_payload_byte_rejected():
    buf = bytearray(tensor_bytes(np.arange(4.0)))
    buf[-8] ^= 0x01  # inside payload, length unchanged
    with pytest.raises(ChecksumError):
        tensor_from_bytes(bytes(buf))


def test_truncation_reports_position():
    buf = tensor_bytes(np.arange(6.0))
    with pytest.raises(TruncationError) as e:
        tensor_from_bytes(buf[:20])
    assert e.value.position == 20


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_any_strict_prefix_rejected(data):
    buf = tensor_bytes(np.arange(10, dtype=np.float32).reshape(2, 5))
    cut = data.draw(st.integers(min_value=0, max_value=len(buf) - 1))
    with pytest.raises((TruncationError, FormatError)):
        tensor_from_bytes(buf[:cut])


def test_concatenated_records():
    parts = arrays()[:4]
    blob = b"".join(tensor_bytes(a) for a in parts)
    out = read_records(blob)
    assert len(out) == len(parts)
    for a, b in zip(parts, out):
        assert a.tobytes() == b.tobytes()


def test_bundle_round_trip(tmp_path):
    named = {"mu": np.random.default_rng(0).normal(size=(7, 3)),
             "mask": np.array([[True, False]]),
             "t": np.float32([0, 1, 2])}
    meta = {"fx": 100.0, "view": 1}
    p = tmp_path / "bundle.dv4d"
    write_bundle(p, named, meta)
    got, got_meta = read_bundle(p)
    assert list(got) == list(named)
    assert got_meta == meta
    for k in named:
        assert named[k].tobytes() == got[k].tobytes()
        assert np.asarray(named[k]).dtype == got[k].dtype


def test_bundle_missing_manifest(tmp_path):
    p = tmp_path / "b.dv4d"
    write_bundle(p, {"a": np.zeros(2)})
    (tmp_path / "b.dv4d.json").unlink()
    with pytest.raises(FormatError):
        read_bundle(p)


def test_bundle_count_mismatch(tmp_path):
    p = tmp_path / "b.dv4d"
    write_bundle(p, {"a": np.zeros(2), "b": np.ones(3)})
    blob = p.read_bytes()
    p.write_bytes(blob + tensor_bytes(np.zeros(1)))
    with pytest.raises(FormatError):
        read_bundle(p)


def test_bundle_shape_mismatch(tmp_path):
    p = tmp_path / "b.dv4d"
    write_bundle(p, {"a": np.zeros((2, 2))})
    p.write_bytes(tensor_bytes(np.zeros(4)))
    with pytest.raises(FormatError):
        read_bundle(p)
