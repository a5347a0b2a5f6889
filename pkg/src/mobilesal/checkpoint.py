"""Binary checkpoint format.

Layout: ``b"MSAL"``, u32 format version, 32-byte SHA-256 architecture
fingerprint, u32 manifest length, UTF-8 JSON manifest (config, and per
tensor name/shape/byte offset), then raw little-endian float32 payloads.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import atomic_write
from .network import MobileSal, MobileSalConfig, build_mobilesal
from .params import ParamStore
from .tensor import Tensor

MAGIC = b"MSAL"
VERSION = 1
_HEADER = struct.Struct("<4sI32sI")


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


def encode_checkpoint(store: ParamStore, config: MobileSalConfig, meta: dict | None = None,
                      exclude: Sequence[str] = ()) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in store.items():
        if any(name.startswith(p) for p in exclude):
            continue
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset,
                        "trainable": store.is_trainable(name)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"config": config.to_dict(), "tensors": entries, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode()
    header = _HEADER.pack(MAGIC, VERSION, bytes.fromhex(config.fingerprint()), len(manifest))
    return header + manifest + b"".join(blobs)


def save_checkpoint(store: ParamStore, config: MobileSalConfig, path: str | os.PathLike,
                    meta: dict | None = None, exclude: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, encode_checkpoint(store, config, meta, exclude))
    return path


def decode_checkpoint(buf: bytes, expected: MobileSalConfig | None = None):
    """Return ``(config, {name: (array, trainable)}, meta)``."""
    if len(buf) < _HEADER.size:
        raise CorruptCheckpoint("checkpoint shorter than its header")
    magic, version, fp, mlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    if start + mlen > len(buf):
        raise CorruptCheckpoint("manifest truncated")
    try:
        manifest = json.loads(buf[start:start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable manifest: {exc}") from None
    config = MobileSalConfig.from_dict(manifest["config"])
    if config.fingerprint() != fp.hex():
        raise CorruptCheckpoint("stored config does not match stored fingerprint")
    if expected is not None and expected.fingerprint() != fp.hex():
        raise FingerprintMismatch("checkpoint architecture differs from the requested configuration "
                                  f"(stored {manifest['config']})")
    payload = buf[start + mlen:]
    tensors = {}
    total = 0
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"]))
        lo, hi = e["offset"], e["offset"] + 4 * count
        if hi > len(payload):
            raise CorruptCheckpoint(f"payload truncated inside {e['name']!r}")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").astype(np.float32).reshape(e["shape"])
        tensors[e["name"]] = (arr, e.get("trainable", True))
        total = max(total, hi)
    if total != len(payload):
        raise CorruptCheckpoint(f"payload size {len(payload)} does not match manifest ({total})")
    return config, tensors, manifest.get("meta", {})


def load_checkpoint(path: str | os.PathLike, expected: MobileSalConfig | None = None):
    return decode_checkpoint(Path(path).read_bytes(), expected)


def load_network(path: str | os.PathLike, expected: MobileSalConfig | None = None,
                 allow_missing: Sequence[str] = ("idr.",)) -> MobileSal:
    """Rebuild the stored architecture and copy every tensor into it.

    Tensors under ``allow_missing`` prefixes may be absent (deployment
    checkpoints drop the depth-restoration head).
    """
    config, tensors, meta = load_checkpoint(path, expected)
    net = build_mobilesal(config)
    assign(net.store, tensors, allow_missing)
    net.meta = meta
    return net


def assign(store: ParamStore, tensors: dict, allow_missing: Sequence[str] = ()) -> None:
    for name, t in store.items():
        if name not in tensors:
            if any(name.startswith(p) for p in allow_missing):
                continue
            raise CorruptCheckpoint(f"checkpoint lacks tensor {name!r}")
        arr = tensors[name][0]
        if arr.shape != t.shape:
            raise CorruptCheckpoint(f"{name}: stored shape {arr.shape} != expected {t.shape}")
        t.data = arr.astype(t.dtype).copy()
    unknown = set(tensors) - set(store.names())
    if unknown:
        raise CorruptCheckpoint(f"checkpoint has unknown tensors, e.g. {sorted(unknown)[0]!r}")


def checkpoint_roundtrip(store: ParamStore, config: MobileSalConfig, path: str | os.PathLike) -> ParamStore:
    save_checkpoint(store, config, path)
    _, tensors, _ = load_checkpoint(path, config)
    out = ParamStore()
    for name, (arr, trainable) in tensors.items():
        t = Tensor(arr, requires_grad=trainable, name=name, dtype=np.float32)
        out._tensors[name] = t
        out._trainable[name] = trainable
    return out
