"""Bit-exact checkpoint container.

Layout (all integers little-endian)::

    b"ADPT" | u32 version | section* | u32 crc32(all preceding bytes)
    section := u16 name_len | name | u8 rank | u32 extent * rank | f32 payload

Non-numeric metadata (configs, hashes) is stored as ``meta:*`` sections whose
payload is the UTF-8 bytes widened to float32, which round-trips exactly.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

MAGIC = b"ADPT"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    """Bad magic, truncated data, or CRC mismatch."""


class IncompatibleCheckpoint(CheckpointError):
    """Well-formed file that does not fit the requested use."""


def encode(sections: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in sections.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError(f"section {name!r} has too many dimensions")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptCheckpoint("not an ADPT checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpoint("CRC mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(body):
                raise CorruptCheckpoint(f"section {name!r} payload is truncated")
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
            if name in out:
                raise CorruptCheckpoint(f"duplicate section {name!r}")
            out[name] = arr
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed section table: {exc}") from exc
    return out


def save(path: str | os.PathLike, sections: dict[str, np.ndarray]) -> None:
    data = encode(sections)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def text_section(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def section_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def require(sections: dict[str, np.ndarray], names) -> None:
    missing = [n for n in names if n not in sections]
    if missing:
        raise IncompatibleCheckpoint(f"missing sections: {', '.join(missing)}")
