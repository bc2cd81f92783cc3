"""Versioned binary checkpoints of a particle set.

Layout::

    magic (8 bytes) | version (uint32 LE) | sha256 of body (32 bytes) | body

``body`` is a little-endian uint32 header length, a JSON header describing
each array (name, dtype, shape) plus free-form metadata, then the raw array
bytes in header order.  Nothing time-dependent is written, so saving the
same set twice gives identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .smc.sampler import ParticleSet

MAGIC = b"FLUSMCCK"
VERSION = 1
_ARRAYS = ("z", "theta", "log_w", "parent", "log_prior", "hist_ll", "g", "cache")


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


def dumps(ps: ParticleSet, metadata: dict | None = None) -> bytes:
    arrays = {name: np.ascontiguousarray(getattr(ps, name)) for name in _ARRAYS}
    header = {
        "arrays": [{"name": k, "dtype": v.dtype.newbyteorder("<").str, "shape": list(v.shape)} for k, v in arrays.items()],
        "t_index": int(ps.t_index),
        "delta0": float(ps.delta0).hex(),
        "metadata": metadata or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(hb)), hb]
    for spec in header["arrays"]:
        parts.append(arrays[spec["name"]].astype(spec["dtype"], copy=False).tobytes())
    body = b"".join(parts)
    return MAGIC + struct.pack("<I", VERSION) + hashlib.sha256(body).digest() + body


def loads(blob: bytes) -> tuple[ParticleSet, dict]:
    if len(blob) < 44 or blob[:8] != MAGIC:
        raise CheckpointIntegrityError("not a particle-set checkpoint (bad magic header)")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    digest, body = blob[12:44], blob[44:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError("checkpoint content hash mismatch; file is corrupted")
    try:
        (hlen,) = struct.unpack("<I", body[:4])
        header = json.loads(body[4 : 4 + hlen])
        pos = 4 + hlen
        arrays = {}
        for spec in header["arrays"]:
            dt = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            size = dt.itemsize * int(np.prod(shape, dtype=np.int64))
            chunk = body[pos : pos + size]
            if len(chunk) != size:
                raise CheckpointIntegrityError("truncated array payload")
            arrays[spec["name"]] = np.frombuffer(chunk, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
            pos += size
    except (ValueError, KeyError, struct.error) as exc:
        raise CheckpointIntegrityError(f"malformed checkpoint: {exc}") from exc
    ps = ParticleSet(**arrays, t_index=int(header["t_index"]), delta0=float.fromhex(header["delta0"]))
    return ps, header["metadata"]


def save(ps: ParticleSet, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(ps, metadata))
    return path


def load(path) -> tuple[ParticleSet, dict]:
    return loads(Path(path).read_bytes())
