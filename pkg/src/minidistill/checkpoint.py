"""Checkpoint file format: text header + packed float32 payload.

Layout:
    line 1: ``MINIDISTILL-CKPT 1``
    line 2: ``header-bytes: <N>``
    next N bytes: UTF-8 JSON with the model config, the tensor manifest
        (name, shape, element type, byte offset, in payload order), the
        payload byte count and its sha256;
    remainder: concatenated little-endian float32 arrays, row-major.

Offsets are contiguous and non-overlapping by construction and verified
on load; the sha256 catches payload corruption. Saving a float32 model
and loading it back is bitwise exact; a float64 load converts values.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .model import ModelConfig, TransformerModel

MAGIC = "MINIDISTILL-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, corrupt, or incompatible checkpoint file."""


def save_checkpoint(model: TransformerModel, path: str) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in model.parameters.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape),
                         "dtype": "<f4", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": model.config.to_dict(),
        "manifest": manifest,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION}\n".encode("ascii"))
        fh.write(f"header-bytes: {len(header_bytes)}\n".encode("ascii"))
        fh.write(header_bytes)
        fh.write(payload)
    os.replace(tmp, path)


def _read_line(fh) -> str:
    raw = fh.readline(256)
    if not raw.endswith(b"\n"):
        raise CheckpointError("truncated checkpoint header")
    return raw[:-1].decode("ascii", errors="replace")


def load_checkpoint(path: str, dtype=np.float32) -> TransformerModel:
    with open(path, "rb") as fh:
        magic = _read_line(fh)
        parts = magic.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        if parts[1] != str(VERSION):
            raise CheckpointError(
                f"unsupported checkpoint format version {parts[1]!r}; "
                f"this build reads version {VERSION}")
        size_line = _read_line(fh)
        if not size_line.startswith("header-bytes: "):
            raise CheckpointError("missing header-bytes line")
        try:
            header_len = int(size_line.split(": ", 1)[1])
        except ValueError as exc:
            raise CheckpointError(f"bad header length: {size_line!r}") from exc
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable header: {exc}") from exc
        payload = fh.read()
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"payload is {len(payload)} bytes, header says "
            f"{header['payload_bytes']}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch; file is corrupt")
    config = ModelConfig.from_dict(header["config"])
    model = TransformerModel(config, seed=0, dtype=dtype)
    manifest = header["manifest"]
    if [m["name"] for m in manifest] != list(model.parameters):
        raise CheckpointError("manifest names do not match this model layout")
    expected = 0
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry["dtype"] != "<f4":
            raise CheckpointError(f"unsupported element type {entry['dtype']}")
        if entry["offset"] != expected:
            raise CheckpointError(
                f"manifest offsets overlap or leave gaps at {name}")
        count = int(np.prod(shape))
        end = expected + 4 * count
        arr = np.frombuffer(payload[expected:end], dtype="<f4").reshape(shape)
        param = model.parameters[name]
        if param.shape != shape:
            raise CheckpointError(
                f"{name}: stored shape {shape} vs model shape {param.shape}")
        param.data = arr.astype(model.dtype)
        expected = end
    if expected != len(payload):
        raise CheckpointError("payload has trailing bytes beyond manifest")
    return model


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def params_sha256(model: TransformerModel) -> str:
    """Digest of the parameter values in manifest order (float32 cast)."""
    h = hashlib.sha256()
    for tensor in model.parameters.values():
        h.update(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return h.hexdigest()
