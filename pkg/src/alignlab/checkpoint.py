"""Versioned checkpoint files.

Layout: a UTF-8 text header terminated by an ``end-header`` line, followed
by raw little-endian float32 parameter payloads in manifest order::

    alignlab-ckpt v1
    config {"vocab_size": 64, ...}
    meta {"config_hash": "...", ...}
    param tok_embed 64,64 0
    param pos_embed 64,64 16384
    ...
    end-header
    <binary float32 data>

Values are stored as float32 and widened to float64 on load.  Because a
float32 value widens and re-truncates to the same bits, save -> load -> save
is byte-identical, which the round-trip tests assert.
"""

from __future__ import annotations

import io
import json
import os

import numpy as np

from .model import ModelConfig, PolicyModel, ValueVectorIndex, mlp_value_vector_index
from .params import ParameterStore

MAGIC = "alignlab-ckpt v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, policy: PolicyModel, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    header = io.StringIO()
    header.write(MAGIC + "\n")
    header.write("config " + json.dumps(policy.config.to_dict(), sort_keys=True) + "\n")
    header.write("meta " + json.dumps(meta, sort_keys=True) + "\n")
    offset = 0
    blobs = []
    for name, t in policy.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape)
        header.write(f"param {name} {shape} {offset}\n")
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header.write("end-header\n")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header.getvalue().encode("utf-8"))
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[PolicyModel, dict]:
    """Rebuild a policy from disk; returns (policy, meta).

    Parameter insertion order follows the manifest, so coordinate ids match
    the store that was saved.
    """
    with open(path, "rb") as f:
        raw = f.read()
    sep = b"end-header\n"
    split = raw.find(sep)
    if split < 0:
        raise CheckpointError(f"{path}: missing end-header")
    head_lines = raw[:split].decode("utf-8").splitlines()
    payload = raw[split + len(sep):]
    if not head_lines or head_lines[0] != MAGIC:
        got = head_lines[0] if head_lines else "<empty>"
        raise CheckpointError(f"{path}: bad magic {got!r}, expected {MAGIC!r}")

    config = None
    meta: dict = {}
    manifest: list[tuple[str, tuple, int]] = []
    for line in head_lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config = ModelConfig.from_dict(json.loads(rest))
        elif kind == "meta":
            meta = json.loads(rest)
        elif kind == "param":
            name, shape_s, off_s = rest.rsplit(" ", 2)
            shape = tuple(int(x) for x in shape_s.split(","))
            manifest.append((name, shape, int(off_s)))
        else:
            raise CheckpointError(f"{path}: unknown header line kind {kind!r}")
    if config is None:
        raise CheckpointError(f"{path}: no config line")
    if not manifest:
        raise CheckpointError(f"{path}: no parameters")

    store = ParameterStore()
    for name, shape, off in manifest:
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        store.add(name, arr.astype(np.float64).reshape(shape))

    vv_source = meta.get("vv_source", "mlp_down")
    from .model import value_vector_index
    policy = PolicyModel(config=config, params=store,
                         vv_index=value_vector_index(config, vv_source))
    policy.vv_index.validate_against(store)
    return policy, meta
