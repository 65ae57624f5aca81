"""Binary checkpoint container.

Layout::

    b"CAPSCKPT" | u32 LE header length | UTF-8 JSON header | payloads | u32 LE CRC-32

The header lists ``records`` (name, dtype "f32", shape, offset, length) with
offsets relative to the start of the payload region, plus a free-form
``meta`` object. The CRC covers the payload region only.
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"CAPSCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    records, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = a.tobytes(order="C")
        records.append({"name": name, "dtype": "f32", "shape": list(a.shape),
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": FORMAT_VERSION, "records": records, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    return (MAGIC + struct.pack("<I", len(header)) + header + payload
            + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def decode_checkpoint(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic bytes")
    if len(blob) < 16:
        raise CheckpointError("truncated checkpoint")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    payload = blob[12 + hlen:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch in payload region")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for rec in header["records"]:
        if rec["dtype"] != "f32":
            raise CheckpointError(f"{rec['name']}: unsupported dtype {rec['dtype']!r}")
        start, length = rec["offset"], rec["length"]
        if start + length > len(payload):
            raise CheckpointError(f"{rec['name']}: record exceeds payload")
        a = np.frombuffer(payload[start:start + length], dtype="<f4")
        arrays[rec["name"]] = a.reshape(rec["shape"]).astype(np.float32)
    return arrays, header.get("meta", {})


def payload_crc(blob: bytes) -> int:
    (crc,) = struct.unpack("<I", blob[-4:])
    return crc


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> int:
    blob = encode_checkpoint(arrays, meta)
    Path(path).write_bytes(blob)
    return payload_crc(blob)


def load(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    return decode_checkpoint(Path(path).read_bytes())
