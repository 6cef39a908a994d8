"""Binary container for named float arrays (bit-exact round trips).

Layout, all integers little-endian:

    magic (4 bytes, "MBDS" for datasets / "MBCK" for checkpoints)
    u32 version = 1
    u64 header length in bytes
    UTF-8 JSON header: list of {"name", "dtype": "f32"|"f64", "shape": [...]}
        in payload order
    payloads: row-major little-endian array bytes, each payload aligned to a
        64-byte boundary from the start of the file

Only f32/f64 payloads are allowed; integer data (e.g. stimulus ids) is
stored as f64, which is exact below 2**53.
"""

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

DATASET_MAGIC = b"MBDS"
CHECKPOINT_MAGIC = b"MBCK"
VERSION = 1
_ALIGN = 64

_DTYPE_TO_TAG = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}
_TAG_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _align_up(offset: int) -> int:
    return (offset + _ALIGN - 1) // _ALIGN * _ALIGN


def save_container(path, arrays: dict[str, np.ndarray], magic: bytes = DATASET_MAGIC) -> None:
    """Write named arrays; names keep their given order in header and payload."""
    if len(magic) != 4:
        raise ParameterError("magic must be exactly 4 bytes")
    entries = []
    payloads = []
    for name, array in arrays.items():
        array = np.asarray(array)  # tobytes() emits row-major bytes regardless of layout
        tag = _DTYPE_TO_TAG.get(array.dtype.newbyteorder("<"))
        if tag is None:
            raise ParameterError(f"array {name!r} has unsupported dtype {array.dtype}; use f32/f64")
        if array.size and not np.all(np.isfinite(array)):
            raise ParameterError(f"array {name!r} contains non-finite values")
        entries.append({"name": name, "dtype": tag, "shape": list(array.shape)})
        payloads.append(array.astype(array.dtype.newbyteorder("<"), copy=False))
    header = json.dumps(entries, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += magic
    out += VERSION.to_bytes(4, "little")
    out += len(header).to_bytes(8, "little")
    out += header
    for payload in payloads:
        pad = _align_up(len(out)) - len(out)
        out += b"\x00" * pad
        out += payload.tobytes()
    Path(path).write_bytes(bytes(out))


def load_container(path, magic: bytes = DATASET_MAGIC) -> dict[str, np.ndarray]:
    """Read a container back; raises FormatError naming the byte offset on damage."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise FormatError(f"truncated container: only {len(blob)} bytes before offset 16")
    if blob[:4] != magic:
        raise FormatError(f"bad magic at offset 0: expected {magic!r}, got {blob[:4]!r}")
    version = int.from_bytes(blob[4:8], "little")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    header_len = int.from_bytes(blob[8:16], "little")
    if 16 + header_len > len(blob):
        raise FormatError(f"truncated header: need {header_len} bytes at offset 16")
    try:
        entries = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header at offset 16: {exc}") from exc
    if not isinstance(entries, list):
        raise FormatError("header at offset 16 must be a JSON list")
    arrays: dict[str, np.ndarray] = {}
    offset = 16 + header_len
    for entry in entries:
        try:
            name, tag, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed header entry {entry!r}") from exc
        if tag not in _TAG_TO_DTYPE:
            raise FormatError(f"unknown dtype tag {tag!r} for array {name!r}")
        if name in arrays:
            raise FormatError(f"duplicate array name {name!r} in header")
        dtype = _TAG_TO_DTYPE[tag]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        offset = _align_up(offset)
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(
                f"truncated payload for {name!r}: need {nbytes} bytes at offset {offset}"
            )
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"trailing {len(blob) - offset} bytes after offset {offset}")
    return arrays
