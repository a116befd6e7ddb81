"""Tensor files, content hashing, and checkpoint directory helpers.

A tensor is stored as a raw little-endian payload plus a JSON sidecar with
its name, shape, and dtype. Checkpoints narrow to float32 on save (the
narrowing is deliberate and lossy); mid-run training state uses float64 so
a restored run continues bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np


class CheckpointError(RuntimeError):
    """Corrupt, missing, or hash-mismatched checkpoint content."""


_DTYPES = {"f32": "<f4", "f64": "<f8"}


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_tensor(directory, name, array, dtype="f32"):
    """Write `<name>.bin` + `<name>.json`; returns the payload sha256."""
    arr = np.asarray(array, dtype=np.float64)
    payload = arr.astype(_DTYPES[dtype]).tobytes()
    with open(os.path.join(directory, name + ".bin"), "wb") as f:
        f.write(payload)
    sidecar = {"name": name, "shape": list(arr.shape), "dtype": dtype}
    with open(os.path.join(directory, name + ".json"), "w") as f:
        json.dump(sidecar, f)
    return sha256_hex(payload)


def read_tensor(directory, name, expected_sha=None):
    """Load a tensor back as float64, verifying shape and optional hash."""
    sidecar_path = os.path.join(directory, name + ".json")
    bin_path = os.path.join(directory, name + ".bin")
    if not os.path.exists(sidecar_path) or not os.path.exists(bin_path):
        raise CheckpointError(f"missing tensor files for {name!r} in {directory}")
    with open(sidecar_path) as f:
        sidecar = json.load(f)
    with open(bin_path, "rb") as f:
        payload = f.read()
    if expected_sha is not None and sha256_hex(payload) != expected_sha:
        raise CheckpointError(f"hash mismatch for tensor {name!r} in {directory}")
    shape = tuple(sidecar["shape"])
    arr = np.frombuffer(payload, dtype=_DTYPES[sidecar["dtype"]]).astype(np.float64)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"payload size does not match shape {shape} for {name!r}")
    return arr.reshape(shape)


def content_hash(meta: dict, tensor_hashes: dict) -> str:
    """Deterministic hash over checkpoint metadata plus per-tensor hashes."""
    return sha256_hex(canonical_json({"meta": meta, "tensors": tensor_hashes}).encode())


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    if not os.path.exists(path):
        raise CheckpointError(f"missing file: {path}")
    with open(path) as f:
        return json.load(f)
