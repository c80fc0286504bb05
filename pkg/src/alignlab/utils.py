"""Small shared helpers: deterministic RNG streams, hashing, canonical JSON."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Independent generator derived from a base seed and a tag path.

    Streams for different tag paths are statistically independent, and the
    mapping is stable across platforms and process boundaries (it does not
    depend on hash randomization).
    """
    key = "|".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def canonical_json(obj) -> str:
    """JSON with sorted keys and no whitespace, for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_json(obj) -> str:
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
