"""Named-tensor weight archive.

Layout (all integers little-endian)::

    magic          8 bytes   b"HIFIWTS\\x00"
    version        uint32    FORMAT_VERSION
    manifest_len   uint32    byte length of the manifest
    manifest       UTF-8 JSON
    padding        zero bytes up to an 8-byte boundary
    payload        float32 little-endian, row-major, tensors back to back

The manifest holds ``format_version``, ``config`` (network switches),
``meta`` (free-form) and ``tensors``: a list of ``{name, shape, dtype,
offset, nbytes}`` in canonical order, offsets relative to payload start.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import NetConfig, NetworkParams
from .tensor import Tensor

MAGIC = b"HIFIWTS\x00"
FORMAT_VERSION = 1
SCALAR = np.dtype("<f4")


class ArchiveError(ValueError):
    pass


def save_archive(path, arrays: dict[str, np.ndarray], config: dict | None = None, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=SCALAR)
        entries.append({
            "name": name,
            "shape": list(data.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": data.nbytes,
        })
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, len(manifest)) + manifest
    pad = (-len(head)) % 8
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(head + b"\x00" * pad)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def read_manifest(path) -> tuple[dict, int]:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise ArchiveError(f"{path}: not a weight archive")
        version, mlen = struct.unpack("<II", head[8:])
        if version != FORMAT_VERSION:
            raise ArchiveError(f"{path}: unsupported archive version {version}")
        raw = f.read(mlen)
    if len(raw) != mlen:
        raise ArchiveError(f"{path}: truncated manifest")
    manifest = json.loads(raw.decode("utf-8"))
    start = 16 + mlen
    return manifest, start + (-start) % 8


def load_archive(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return ``(arrays, config, meta)``; arrays are float32 in manifest order."""
    manifest, start = read_manifest(path)
    payload = Path(path).read_bytes()[start:]
    arrays = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise ArchiveError(f"{path}: payload truncated at tensor {e['name']}")
        arr = np.frombuffer(payload, dtype=SCALAR, count=e["nbytes"] // 4, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return arrays, manifest["config"], manifest["meta"]


def save_weights(path, params: NetworkParams, meta: dict | None = None) -> None:
    save_archive(path, {n: t.data for n, t in params.items()}, params.config.to_dict(), meta)


def load_weights(path, dtype=np.float32) -> NetworkParams:
    arrays, config, _ = load_archive(path)
    cfg = NetConfig.from_dict(config)
    return NetworkParams(cfg, {n: Tensor(a.astype(dtype, copy=False)) for n, a in arrays.items()})
