"""Versioned binary checkpoints.

Layout (little-endian)::

    magic    8 bytes  b"ADAPRCK\\0"
    major    u16
    minor    u16
    reserved u32
    mlen     u64      length of the manifest
    manifest mlen bytes of UTF-8 JSON:
             {"entries": [{"name", "shape", "dtype", "offset", "nbytes"}, ...],
              "meta": {...}}
    payload  raw tensor bytes; entry offsets are relative to payload start
"""
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    MissingFileError,
)

MAGIC = b"ADAPRCK\0"
MAJOR = 1
MINOR = 0
_HEADER = struct.Struct("<8sHHIQ")


def write_arrays(path, arrays, meta=None):
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"entries": entries, "meta": meta or {}}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, MAJOR, MINOR, 0, len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)
    return path


def read_arrays(path):
    """Return ``(arrays, meta)`` from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than header")
    magic, major, minor, _, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if major != MAJOR:
        raise CheckpointVersionError(f"{path}: format version {major}.{minor}, expected {MAJOR}.x")
    start = _HEADER.size + mlen
    if len(data) < start:
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    manifest = json.loads(data[_HEADER.size : start].decode("utf-8"))
    arrays = {}
    for e in manifest["entries"]:
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise CheckpointTruncatedError(f"{path}: payload for {e['name']!r} truncated")
        arrays[e["name"]] = np.frombuffer(data[lo:hi], dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest.get("meta", {})


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def network_state(net):
    arrays = {f"param/{n}": p.data for n, p in net.named_parameters()}
    arrays.update({f"buffer/{n}": b for n, b in net.named_buffers()})
    return arrays


def save_checkpoint(net, path, optimizer=None, estimator=None, meta=None):
    arrays = network_state(net)
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    if estimator is not None:
        arrays.update(estimator.state_arrays())
    meta = dict(meta or {})
    meta.setdefault("network", net.cfg.name)
    meta.setdefault("variant", net.variant.value)
    meta["spm_state"] = {str(s.layer_id): s.extra_state() for s in net.spms}
    return write_arrays(path, arrays, meta)


def load_checkpoint(net, path, optimizer=None, estimator=None, allow_missing_spm=False):
    """Load a checkpoint into ``net`` (and optionally optimizer/estimator state).

    With ``allow_missing_spm`` a dense checkpoint can seed a gated network:
    conv/BN/linear tensors are loaded and SPM parameters keep their init.
    Returns the checkpoint metadata.
    """
    arrays, meta = read_arrays(path)
    targets = [(f"param/{n}", p.data, n) for n, p in net.named_parameters()]
    targets += [(f"buffer/{n}", b, n) for n, b in net.named_buffers()]
    missing = []
    for key, dest, name in targets:
        if key not in arrays:
            if allow_missing_spm and ".spm." in name:
                continue
            missing.append(name)
            continue
        src = arrays[key]
        if src.shape != dest.shape:
            raise CheckpointShapeError(f"shape mismatch for {name!r}: checkpoint {src.shape}, network {dest.shape}")
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks {len(missing)} tensors, first {missing[0]!r}")
    for key, dest, _ in targets:
        if key in arrays:
            dest[...] = arrays[key]
    spm_state = meta.get("spm_state", {})
    for s in net.spms:
        if str(s.layer_id) in spm_state:
            s.load_extra_state(spm_state[str(s.layer_id)])
    if optimizer is not None:
        optimizer.load_state_arrays(arrays)
    if estimator is not None:
        estimator.load_state_arrays(arrays)
    return meta
