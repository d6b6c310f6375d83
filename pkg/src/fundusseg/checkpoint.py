"""Binary checkpoint container for model parameters and optimizer state.

File layout::

    bytes 0..3   magic b"RTN1"
    bytes 4..7   header length, unsigned 32-bit little-endian
    header       UTF-8 JSON with keys "blobs", "config", "config_hash",
                 "epoch"; "blobs" maps each tensor name to its dtype,
                 shape, byte offset and byte length within the payload
    payload      little-endian float32 blobs, concatenated in header order

Tensor names: parameters appear under their own names, optimizer momentum
buffers under ``momentum:<param name>``, and normalization running
statistics under ``state:<name>``.  Blobs are laid out in sorted-name
order (the order the header JSON lists them), with contiguous,
non-overlapping offsets starting at zero.

All payloads are stored as float32 regardless of the in-memory dtype;
``load`` returns float32 arrays.  Saving the result of a load reproduces
the original file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RTN1"
MOMENTUM_PREFIX = "momentum:"
STATE_PREFIX = "state:"
_RESERVED = (MOMENTUM_PREFIX, STATE_PREFIX)


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or inconsistent checkpoint files."""


def config_hash(config: dict) -> str:
    """SHA-256 hex digest of the canonical JSON form of a config dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _as_f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file.

    ``params``, ``momentum`` and ``state`` map bare tensor names (no
    prefixes) to float32 arrays.
    """

    config: dict
    epoch: int
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    state: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def _blobs(self) -> dict[str, np.ndarray]:
        for name in list(self.params) + list(self.state) + list(self.momentum):
            if name.startswith(_RESERVED):
                raise CheckpointError(
                    f"tensor name {name!r} collides with a reserved prefix")
        blobs = dict(self.params)
        blobs.update({MOMENTUM_PREFIX + k: v for k, v in self.momentum.items()})
        blobs.update({STATE_PREFIX + k: v for k, v in self.state.items()})
        if len(blobs) != len(self.params) + len(self.momentum) + len(self.state):
            raise CheckpointError("duplicate tensor names across sections")
        return blobs

    def save(self, path: str) -> None:
        if not isinstance(self.epoch, int) or self.epoch < 0:
            raise CheckpointError(f"epoch must be a non-negative int, "
                                  f"got {self.epoch!r}")
        blobs = self._blobs()
        manifest = {}
        chunks = []
        offset = 0
        for name in sorted(blobs):
            raw = _as_f32_bytes(blobs[name])
            manifest[name] = {
                "dtype": "float32",
                "shape": list(blobs[name].shape),
                "offset": offset,
                "length": len(raw),
            }
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"blobs": manifest, "config": self.config,
             "config_hash": self.config_hash, "epoch": self.epoch},
            sort_keys=True, separators=(",", ":")).encode("utf-8")
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for raw in chunks:
                fh.write(raw)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 8 or data[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file "
                                  f"(bad magic {data[:4]!r})")
        (header_len,) = struct.unpack("<I", data[4:8])
        if len(data) < 8 + header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(data[8:8 + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        try:
            manifest = header["blobs"]
            config = header["config"]
            stored_hash = header["config_hash"]
            epoch = header["epoch"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: header missing field {exc}") from exc
        if config_hash(config) != stored_hash:
            raise CheckpointError(f"{path}: config hash mismatch — "
                                  "file corrupt or tampered")
        payload = data[8 + header_len:]

        params: dict[str, np.ndarray] = {}
        momentum: dict[str, np.ndarray] = {}
        state: dict[str, np.ndarray] = {}
        expected = 0  # blobs are contiguous in sorted-name (header) order
        for name in sorted(manifest):
            entry = manifest[name]
            if entry["dtype"] != "float32":
                raise CheckpointError(
                    f"{path}: blob {name!r} has unsupported dtype "
                    f"{entry['dtype']!r}")
            shape = tuple(entry["shape"])
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            off, length = entry["offset"], entry["length"]
            if length != 4 * size:
                raise CheckpointError(
                    f"{path}: blob {name!r} length {length} does not match "
                    f"shape {shape}")
            if off != expected:
                raise CheckpointError(
                    f"{path}: blob {name!r} offset {off} breaks contiguity "
                    f"(expected {expected})")
            expected = off + length
            if off + length > len(payload):
                raise CheckpointError(f"{path}: truncated payload at {name!r}")
            arr = np.frombuffer(payload, dtype="<f4", count=size,
                                offset=off).reshape(shape).copy()
            if name.startswith(MOMENTUM_PREFIX):
                momentum[name[len(MOMENTUM_PREFIX):]] = arr
            elif name.startswith(STATE_PREFIX):
                state[name[len(STATE_PREFIX):]] = arr
            else:
                params[name] = arr
        if expected != len(payload):
            raise CheckpointError(
                f"{path}: payload has {len(payload) - expected} trailing bytes")
        return cls(config=config, epoch=epoch, params=params,
                   momentum=momentum, state=state)
