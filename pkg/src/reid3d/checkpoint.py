"""Checkpoint container: JSON manifest followed by TNSR records.

Layout (little-endian)::

    bytes 0-3   b"RCKP"
    u16         container version (1)
    u32         manifest length M
    M bytes     UTF-8 JSON manifest
    ...         concatenated TNSR records

The manifest holds ``config`` (model config dict), ``digest`` (sha256 of the
canonical config JSON), ``optimizer_step`` (int or null) and ``tensors``: a
list of ``{name, offset, length, shape, dtype}`` with offsets relative to the
first byte after the manifest. Parameter and buffer names are as produced by
``TrackEncoder.named_parameters``/``named_buffers``; optimizer moments are
stored as ``opt.m.<name>`` and ``opt.v.<name>``.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import CheckpointError, DigestMismatchError, MissingParameterError, TensorFormatError
from .model import ModelConfig, TrackEncoder, build
from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"RCKP"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


def save_checkpoint(enc: TrackEncoder, path: str | os.PathLike, optimizer=None) -> None:
    tensors = {**enc.named_parameters(), **enc.named_buffers()}
    if optimizer is not None:
        for name, m in optimizer.m.items():
            tensors[f"opt.m.{name}"] = m
        for name, v in optimizer.v.items():
            tensors[f"opt.v.{name}"] = v
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        blob = tensor_to_bytes(tensors[name])
        arr = tensors[name]
        entries.append({"name": name, "offset": offset, "length": len(blob),
                        "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "config": enc.config.to_dict(),
        "digest": enc.config.digest(),
        "optimizer_step": optimizer.step if optimizer is not None else None,
        "tensors": entries,
    }
    raw = json.dumps(manifest, sort_keys=True).encode()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate the whole container; returns ``(manifest, tensors)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEAD.size:
        raise CheckpointError("checkpoint header truncated")
    magic, version, mlen = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEAD.size + mlen
    if len(buf) < start:
        raise CheckpointError("manifest truncated")
    try:
        manifest = json.loads(buf[_HEAD.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    tensors = {}
    for entry in manifest["tensors"]:
        lo = start + entry["offset"]
        hi = lo + entry["length"]
        if hi > len(buf):
            raise CheckpointError(f"record {entry['name']!r} truncated")
        try:
            arr, _ = tensor_from_bytes(buf[lo:hi])
        except TensorFormatError as exc:
            raise CheckpointError(f"record {entry['name']!r}: {exc}") from exc
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"record {entry['name']!r} shape disagrees with manifest")
        tensors[entry["name"]] = arr
    return manifest, tensors


def load_checkpoint(path: str | os.PathLike, config: ModelConfig | None = None) -> TrackEncoder:
    """Rebuild an encoder in eval mode. With ``config`` the digests must match.

    The file is fully parsed before any model is built, so a bad file never
    yields a partially loaded model.
    """
    manifest, tensors = read_checkpoint(path)
    stored = ModelConfig.from_dict(manifest["config"])
    if stored.digest() != manifest["digest"]:
        raise CheckpointError("manifest config does not hash to its recorded digest")
    if config is not None and config.digest() != manifest["digest"]:
        raise DigestMismatchError(
            f"config digest {config.digest()[:12]} != checkpoint digest {manifest['digest'][:12]}"
        )
    enc = build(stored, seed=0)
    wanted = {**enc.named_parameters(), **enc.named_buffers()}
    missing = sorted(set(wanted) - set(tensors))
    if missing:
        raise MissingParameterError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]!r}")
    enc.load_state(tensors)
    enc.set_training(False)
    return enc
