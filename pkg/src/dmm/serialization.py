"""Binary containers for checkpoints ("DMMC") and datasets ("DMMD").

Layout, all integers little-endian:

    magic (4 bytes) | u16 version | u32 header_len | header JSON (UTF-8)
    repeated per array, sorted by name:
        u16 name_len | name (UTF-8) | u8 rank | rank * u32 dims | f32 payload
    u32 CRC32 of every preceding byte

The header JSON carries the model spec / dataset metadata; numeric payloads
are always float32, so a load/save round trip is byte-identical. Array
records run until exactly the four CRC bytes remain.
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

CHECKPOINT_MAGIC = b"DMMC"
DATASET_MAGIC = b"DMMD"
FORMAT_VERSION = 1


class FormatError(Exception):
    """Base class for container format failures."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack_container(magic, header, arrays):
    """Serialize header dict + named float32 arrays to bytes."""
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    hdr = _canonical_json(header)
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise TruncatedError(f"file truncated while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def unpack_container(blob, expected_magic):
    """Parse bytes back into (header, arrays). Raises the FormatError taxonomy."""
    if len(blob) < 4:
        raise TruncatedError("file shorter than magic")
    if blob[:4] != expected_magic:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {expected_magic!r}")
    if len(blob) < 4 + 2 + 4 + 4:
        raise TruncatedError("file shorter than fixed header")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"CRC32 mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    r = _Reader(blob[:-4])
    r.take(4, "magic")
    version = r.u16("version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported container version {version}, expected {FORMAT_VERSION}")
    hdr_len = r.u32("header length")
    try:
        header = json.loads(r.take(hdr_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid header JSON: {exc}") from exc
    arrays = {}
    while r.pos < len(r.blob):
        name_len = r.u16("array name length")
        name = r.take(name_len, "array name").decode("utf-8")
        rank = r.u8("array rank")
        dims = tuple(r.u32(f"dim {i} of {name}") for i in range(rank))
        count = 1
        for d in dims:
            count *= d
        raw = r.take(4 * count, f"payload of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return header, arrays


def write_container(path, magic, header, arrays):
    with open(path, "wb") as fh:
        fh.write(pack_container(magic, header, arrays))


def read_container(path, expected_magic):
    with open(path, "rb") as fh:
        return unpack_container(fh.read(), expected_magic)
