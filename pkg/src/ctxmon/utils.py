"""Seeding and serialisation helpers shared across modules."""
from __future__ import annotations

import hashlib
import json
import zlib
from pathlib import Path

import numpy as np


def derive_seed(root: int, *keys) -> int:
    """Counter-based child seed: stable for a given ``(root, keys)`` tuple.

    String keys are folded through crc32 so module names can be used.
    """
    ints = [int(root)]
    for k in keys:
        ints.append(zlib.crc32(k.encode("utf-8")) if isinstance(k, str) else int(k))
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint32)[0])


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dumps(obj) -> str:
    """Canonical JSON text (sorted keys, fixed separators, trailing newline)."""
    return json.dumps(obj, sort_keys=True, indent=1, default=_default, allow_nan=True) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj), encoding="utf-8")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
