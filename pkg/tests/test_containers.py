import numpy as np
import pytest

from rhythmotion.containers import FormatError, SchemaVersionError, dump_header, read_container, write_container


def test_roundtrip_preserves_header_and_payload(tmp_path):
    data = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_container(tmp_path / "x.bin", b"TEST", {"a": 1, "b": [1, 2]}, data)
    header, payload = read_container(tmp_path / "x.bin", b"TEST")
    assert header["a"] == 1 and header["b"] == [1, 2]
    assert header["schema_version"] == 1
    np.testing.assert_array_equal(payload, data.ravel())


def test_wrong_magic_rejected(tmp_path):
    write_container(tmp_path / "x.bin", b"TEST", {}, np.zeros(1))
    with pytest.raises(FormatError):
        read_container(tmp_path / "x.bin", b"NOPE")


def test_schema_version_mismatch_is_hard_error(tmp_path):
    p = tmp_path / "x.bin"
    write_container(p, b"TEST", {}, np.zeros(1))
    raw = p.read_bytes().replace(b'"schema_version":1', b'"schema_version":9')
    p.write_bytes(raw)
    with pytest.raises(SchemaVersionError):
        read_container(p, b"TEST")


def test_truncated_payload_rejected(tmp_path):
    p = tmp_path / "x.bin"
    write_container(p, b"TEST", {}, np.zeros(3))
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(FormatError):
        read_container(p, b"TEST")


def test_header_serialization_is_canonical():
    assert dump_header({"b": 1, "a": 2}) == dump_header({"a": 2, "b": 1})
