"""Binary checkpoint format.

Layout (little-endian)::

    magic      4s   b"MMVC"
    version    u32
    digest     32s  sha256 of the canonical encoder-config JSON
    meta_len   u32, then meta_len bytes of UTF-8 JSON (step, seeds, config echo)
    n_arrays   u32
    per array: u16 name length, name bytes, u8 ndim, ndim x u32 dims,
               prod(dims) x f32 values
    crc32      u32 over every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"MMVC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(cfg: dict) -> bytes:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).digest()


def encode_checkpoint(arrays: dict[str, np.ndarray], encoder_cfg: dict, meta: dict) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), config_digest(encoder_cfg),
             struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4", order="C")  # ascontiguousarray would make 0-d arrays 1-d
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes, encoder_cfg: dict | None = None):
    """Parse a checkpoint; returns ``(arrays, meta)``.

    With ``encoder_cfg`` given, a digest mismatch is rejected.
    """
    if len(buf) < 4 + 4 + 32 + 4 + 4 + 4:
        raise CheckpointError(f"truncated checkpoint ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if crc != zlib.crc32(buf[:-4]):
        raise CheckpointError("checksum mismatch (file truncated or corrupted)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    digest = buf[8:40]
    if encoder_cfg is not None and digest != config_digest(encoder_cfg):
        raise CheckpointError("encoder config digest mismatch")
    pos = 40
    try:
        (mlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos:pos + mlen].decode())
        pos += mlen
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nl].decode()
            pos += nl
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            end = pos + 4 * count
            if end > len(buf) - 4:
                raise CheckpointError(f"array {name} overruns file")
            arrays[name] = np.frombuffer(buf[pos:end], dtype="<f4").astype(np.float32).reshape(dims)
            pos = end
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from None
    if pos != len(buf) - 4:
        raise CheckpointError(f"{len(buf) - 4 - pos} trailing bytes")
    return arrays, meta


def save_checkpoint(path, arrays: dict, encoder_cfg: dict, meta: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(arrays, encoder_cfg, meta))
    tmp.replace(path)


def load_checkpoint(path, encoder_cfg: dict | None = None):
    return decode_checkpoint(Path(path).read_bytes(), encoder_cfg)
