"""Single-file checkpoint archive.

Layout: 8-byte magic, little-endian u64 manifest length, JSON manifest
(format version, config snapshot, epoch, best validation DSC, RNG state,
tensor index), then raw little-endian tensor payloads in index order.
The writer is fully deterministic: save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

MAGIC = b"FSAMCK01"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    best_val_dsc: float
    tensors: dict = field(default_factory=dict)  # name -> torch.Tensor
    rng_state: bytes = b""


def _tensor_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    arr = t.detach().cpu().numpy()
    if arr.dtype.name not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return arr.dtype.name, np.ascontiguousarray(arr).astype("<" + arr.dtype.str[1:]).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    index = {}
    payload = bytearray()
    for name in sorted(ckpt.tensors):
        dtype, raw = _tensor_bytes(ckpt.tensors[name])
        index[name] = {
            "dtype": dtype,
            "shape": list(ckpt.tensors[name].shape),
            "offset": len(payload),
            "nbytes": len(raw),
        }
        payload.extend(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "best_val_dsc": ckpt.best_val_dsc,
        "rng_state": ckpt.rng_state.hex(),
        "payload_crc32": zlib.crc32(bytes(payload)),
        "tensors": index,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (blob_len,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16 : 16 + blob_len])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version")
    payload = data[16 + blob_len :]
    if zlib.crc32(payload) != manifest["payload_crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch, file is corrupted")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<" + np.dtype(_DTYPES[entry["dtype"]]).str[1:])
        tensors[name] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return Checkpoint(
        config=manifest["config"],
        epoch=manifest["epoch"],
        best_val_dsc=manifest["best_val_dsc"],
        tensors=tensors,
        rng_state=bytes.fromhex(manifest["rng_state"]),
    )
