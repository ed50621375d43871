"""Versioned single-file container for a trained model.

Layout: magic, format version (u32 LE), header length (u64 LE), UTF-8 JSON
header, little-endian float64 payload, then a sha256 digest of everything
before it.  The header is written with sorted keys so identical content
always gives identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, Sequential

MAGIC = b"CTXMONB\x00"
FORMAT_VERSION = 1
_DIGEST = 32


class BundleError(Exception):
    pass


class BundleVersionError(BundleError):
    pass


class BundleIntegrityError(BundleError):
    pass


@dataclass
class Bundle:
    model: Sequential
    norm: dict | None = None
    metadata: dict = field(default_factory=dict)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_bundle(model: Sequential, norm=None, metadata=None) -> bytes:
    tensors = []
    chunks = []
    for i, k, arr in model.parameters() + model.buffers():
        tensors.append({"layer": i, "name": k, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = _dumps({
        "config": model.config.to_dict(),
        "tensors": tensors,
        "norm": norm,
        "metadata": metadata or {},
    })
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_bundle(blob: bytes) -> Bundle:
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + _DIGEST or blob[:len(MAGIC)] != MAGIC:
        raise BundleIntegrityError("not a model bundle or truncated")
    version, hlen = struct.unpack("<IQ", blob[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise BundleVersionError(f"bundle format version {version}, expected {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise BundleIntegrityError("checksum mismatch (corrupt or truncated bundle)")
    try:
        header = json.loads(body[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleIntegrityError(f"unreadable header: {exc}") from exc
    model = Sequential(ModelConfig.from_dict(header["config"]))
    payload = body[fixed + hlen:]
    weights, pos = [], 0
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        raw = payload[pos:pos + 8 * n]
        if len(raw) != 8 * n:
            raise BundleIntegrityError("payload shorter than tensor index")
        weights.append(np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64))
        pos += 8 * n
    if pos != len(payload):
        raise BundleIntegrityError("trailing bytes after tensor payload")
    model.set_weights(weights)
    return Bundle(model, header.get("norm"), header.get("metadata") or {})


def save_bundle(path, model: Sequential, norm=None, metadata=None):
    Path(path).write_bytes(encode_bundle(model, norm, metadata))


def load_bundle(path) -> Bundle:
    return decode_bundle(Path(path).read_bytes())
