"""Binary tensor blobs and checksummed manifest bundles.

Blob layout: ``b"ALGCDTEN"``, version byte (1), dtype byte (0=f32, 1=f64),
little-endian u32 rank, rank little-endian u64 extents, row-major
little-endian payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError

MAGIC = b"ALGCDTEN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    head = MAGIC + struct.pack("<BBI", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 14 or buf[:8] != MAGIC:
        raise FormatError("not a tensor blob (bad magic)")
    version, code, rank = struct.unpack_from("<BBI", buf, 8)
    if version != VERSION:
        raise FormatError(f"unsupported blob version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 14
    if len(buf) < off + 8 * rank:
        raise FormatError("truncated blob header")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dt = _DTYPES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != need:
        raise FormatError(f"blob payload has {len(buf) - off} bytes, expected {need}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_bundle(directory, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write one blob per array plus ``manifest.json`` carrying per-blob and whole-bundle digests."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name in sorted(arrays):
        raw = encode(arrays[name])
        (d / f"{name}.bin").write_bytes(raw)
        digests[name] = sha256(raw)
    manifest = dict(manifest)
    manifest["format_version"] = VERSION
    manifest["blobs"] = digests
    manifest["checksum"] = sha256("".join(digests[k] for k in sorted(digests)).encode())
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, d / "manifest.json")


def read_bundle(directory) -> tuple[dict, dict[str, np.ndarray]]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format_version") != VERSION:
        raise FormatError(f"bundle version {manifest.get('format_version')} != {VERSION}")
    digests = manifest.get("blobs", {})
    whole = sha256("".join(digests[k] for k in sorted(digests)).encode())
    if whole != manifest.get("checksum"):
        raise ChecksumError("manifest checksum does not match its blob digests")
    arrays = {}
    for name, digest in digests.items():
        raw = (d / f"{name}.bin").read_bytes()
        if sha256(raw) != digest:
            raise ChecksumError(f"checksum mismatch for blob {name!r}")
        arrays[name] = decode(raw)
    return manifest, arrays


def write_ints(path, values) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in values))


def read_ints(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    try:
        return np.array([int(ln) for ln in lines if ln], dtype=np.int64)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
