"""
Flat binary container for named arrays plus a JSON metadata header.

Byte layout:
    b"GCNP"                      magic
    uint8                        format version (1)
    uint32 little-endian         header length in bytes
    header                       UTF-8 JSON, sorted keys, no whitespace:
                                 {"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                                  "meta": {...}}
    payload                      row-major little-endian array bytes, concatenated in header order;
                                 "offset" is relative to the start of the payload

Only "<f8" and "<i8" arrays are stored. Writing is deterministic: the same
arrays and metadata always give the same bytes.
"""
import json
import logging
import os
import struct
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from core.errors import ContainerError

logger = logging.getLogger(__name__)

MAGIC = b"GCNP"
VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _canonical(array: np.ndarray) -> Tuple[str, np.ndarray]:
    if np.issubdtype(array.dtype, np.floating):
        return "<f8", np.ascontiguousarray(array, dtype="<f8")
    if np.issubdtype(array.dtype, np.integer) or np.issubdtype(array.dtype, np.bool_):
        return "<i8", np.ascontiguousarray(array, dtype="<i8")
    raise ContainerError(f"unsupported dtype {array.dtype}")


def encode(arrays: Mapping[str, np.ndarray], meta: Dict[str, Any]) -> bytes:
    entries = []
    payload = []
    offset = 0
    for name, array in arrays.items():
        dtype, data = _canonical(np.asarray(array))
        raw = data.tobytes(order="C")
        entries.append({"name": name, "dtype": dtype, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<BI", VERSION, len(header)) + header + b"".join(payload)


def decode(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if blob[:4] != MAGIC:
        raise ContainerError("not a container file (bad magic)")
    version, header_len = struct.unpack("<BI", blob[4:9])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = 9 + header_len
    try:
        header = json.loads(blob[9:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt container header: {e}") from e

    arrays: Dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ContainerError(f"unsupported dtype {entry['dtype']} for '{entry['name']}'")
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise ContainerError(f"truncated payload for '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(blob[lo:hi], dtype=dtype).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def save(path: str, arrays: Mapping[str, np.ndarray], meta: Dict[str, Any]) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode(arrays, meta))
    logger.info(f"Wrote {len(arrays)} arrays to {path}")
    return path


def load(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if not os.path.exists(path):
        raise ContainerError(f"container file not found at {path}")
    with open(path, "rb") as f:
        return decode(f.read())
