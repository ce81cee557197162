"""DMAE v1 checkpoints.

Layout::

    b"DMAE1\\0\\0\\0"            8-byte magic
    u64 little-endian           header length in bytes
    header                      canonical JSON (sorted keys, no spaces)
    payload                     concatenated DTNSR v1 tensors

The header holds the format version, the model config, the init seed,
free-form training state, and a manifest entry per tensor with its name,
shape, byte offset into the payload, byte length and SHA-256. Parameter
values are stored under their own names; Adam moments under ``name@m`` and
``name@v`` with step counts in the header, so a resumed run continues
exactly where it stopped.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct

import numpy as np

from .model import DenoMAE, DenoMAEConfig
from .numerics import dtnsr

MAGIC = b"DMAE1\x00\x00\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def to_bytes(model: DenoMAE, train_state: dict | None = None) -> bytes:
    payload = io.BytesIO()
    manifest = []
    step_counts = {}
    for name, p in model.params.items():
        step_counts[name] = p.step_count
        for key, arr in ((name, p.data), (f"{name}@m", p.adam_m), (f"{name}@v", p.adam_v)):
            blob = dtnsr.encode(arr)
            manifest.append({
                "name": key,
                "shape": list(arr.shape),
                "offset": payload.tell(),
                "nbytes": len(blob),
                "sha256": hashlib.sha256(blob).hexdigest(),
            })
            payload.write(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "step_counts": step_counts,
        "train_state": train_state or {},
        "tensors": manifest,
    }
    head = canonical_json(header).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + payload.getvalue()


def from_bytes(buf: bytes) -> tuple[DenoMAE, dict]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a DMAE v1 checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    start = 16 + hlen
    try:
        header = json.loads(buf[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    config = DenoMAEConfig.from_dict(header["config"])
    model = DenoMAE(config, seed=int(header["seed"]))
    arrays = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        blob = buf[lo:lo + entry["nbytes"]]
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise ChecksumError(f"checksum mismatch for tensor {entry['name']!r}")
        arr = dtnsr.decode(blob)
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"shape mismatch for tensor {entry['name']!r}")
        arrays[entry["name"]] = arr
    missing = [k for k in model.params if k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing[:5]}")
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{name}: stored shape {arrays[name].shape} != model shape {p.shape}")
        p.data = arrays[name]
        p.adam_m = arrays[f"{name}@m"]
        p.adam_v = arrays[f"{name}@v"]
        p.step_count = int(header["step_counts"][name])
        p.zero_grad()
    return model, header["train_state"]


def save(path: str | os.PathLike, model: DenoMAE, train_state: dict | None = None) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(model, train_state))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[DenoMAE, dict]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def copy_params(src: DenoMAE, dst: DenoMAE, prefixes: tuple[str, ...]) -> list[str]:
    """Copy values of matching parameters (moments reset); returns copied names."""
    copied = []
    for name, p in dst.params.items():
        if name.startswith(prefixes) and name in src.params:
            s = src.params[name]
            if s.shape != p.shape:
                raise CheckpointError(f"{name}: shape {s.shape} incompatible with {p.shape}")
            p.data = np.array(s.data, dtype=np.float32)
            copied.append(name)
    return copied
