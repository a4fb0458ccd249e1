"""Versioned binary checkpoint: named little-endian arrays plus a JSON manifest.

Layout::

    magic   8 bytes   b"PEDROCKP"
    version u32 LE
    hlen    u64 LE    length of the JSON header
    header  hlen bytes, UTF-8 JSON {"config": ..., "tensors": [...], "version": n}
    blob    raw tensor bytes; each manifest entry gives dtype, shape, offset, nbytes

Offsets are relative to the start of the blob.  Serialization is fully
deterministic, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PEDROCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"<f4", "<f8", "<i8", "<i4"}


class CheckpointError(ValueError):
    def __init__(self, message: str, entry: str | None = None):
        super().__init__(message)
        self.entry = entry


def _le(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr, dtype=dt)


def dumps(tensors: dict[str, np.ndarray], config: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = _le(np.asarray(arr))
        if arr.dtype.str not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}", name)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": FORMAT_VERSION, "config": config or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("file too short for checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if start + hlen > len(buf):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if header.get("version") != version:
        raise CheckpointError("header version disagrees with file prefix")
    blob = memoryview(buf)[start + hlen:]
    tensors: dict[str, np.ndarray] = {}
    spans = []
    for e in header.get("tensors", []):
        name = e.get("name", "?")
        try:
            dtype, shape, off, n = np.dtype(e["dtype"]), tuple(e["shape"]), int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError) as err:
            raise CheckpointError(f"malformed manifest entry {name!r}: {err}", name) from None
        if e["dtype"] not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {e['dtype']} in entry {name!r}", name)
        if n != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"entry {name!r}: nbytes {n} does not match shape {list(shape)}", name)
        if off < 0 or off + n > len(blob):
            raise CheckpointError(
                f"entry {name!r} needs bytes [{off}, {off + n}) but blob has {len(blob)} (truncated?)", name)
        spans.append((off, off + n, name))
        tensors[name] = np.frombuffer(blob[off:off + n], dtype=dtype).reshape(shape).copy()
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"entries {an!r} and {bn!r} overlap", bn)
    return tensors, header.get("config", {})


def save(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, config))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return loads(buf)
