"""Binary container helpers shared by the .mft, .traj and NNCK formats.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then a float32 little-endian payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not match the expected container layout."""


class SchemaVersionError(FormatError):
    pass


def dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path: str | Path, magic: bytes, header: dict, payload: np.ndarray) -> None:
    assert len(magic) == 4
    header = dict(header, magic=magic.decode("ascii"), schema_version=SCHEMA_VERSION)
    blob = dump_header(header)
    data = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(data)


def read_container(path: str | Path, magic: bytes) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}")
    (n,) = struct.unpack("<I", raw[4:8])
    if 8 + n > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: schema version {version!r}, this build reads {SCHEMA_VERSION}"
        )
    body = raw[8 + n :]
    if len(body) % 4:
        raise FormatError(f"{path}: payload is not a whole number of float32 values")
    return header, np.frombuffer(body, dtype="<f4").copy()
