"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"DNFT"
    u32   format version
    u32   n bytes, schedule id (utf-8)
    u32   n bytes, architecture descriptor (canonical JSON, utf-8)
    32 B  sha256 digest of the producing config
    u64   number of weights
    f64[] flattened weights

Saving what was loaded reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn import MLP

MAGIC = b"DNFT"
FORMAT_VERSION = 1
DIGEST_BYTES = 32


@dataclass
class Checkpoint:
    schedule_id: str
    architecture: dict
    digest: bytes
    weights: np.ndarray
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: MLP, schedule_id: str, digest: bytes):
        return cls(schedule_id, model.architecture(), bytes(digest), model.get_flat())

    def to_model(self) -> MLP:
        return MLP.from_architecture(self.architecture, self.weights)

    def to_bytes(self) -> bytes:
        if len(self.digest) != DIGEST_BYTES:
            raise CheckpointError(f"digest must be {DIGEST_BYTES} bytes")
        sched = self.schedule_id.encode()
        arch = json.dumps(self.architecture, sort_keys=True, separators=(",", ":")).encode()
        w = np.ascontiguousarray(self.weights, dtype="<f8")
        return b"".join(
            [
                MAGIC,
                struct.pack("<I", self.version),
                struct.pack("<I", len(sched)),
                sched,
                struct.pack("<I", len(arch)),
                arch,
                self.digest,
                struct.pack("<Q", w.size),
                w.tobytes(),
            ]
        )

    @classmethod
    def from_bytes(cls, blob: bytes):
        view = memoryview(blob)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("checkpoint is truncated")
            chunk = bytes(view[pos : pos + n])
            pos += n
            return chunk

        if take(4) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic bytes)")
        (version,) = struct.unpack("<I", take(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", take(4))
        sched = take(n).decode()
        (n,) = struct.unpack("<I", take(4))
        try:
            arch = json.loads(take(n).decode())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"bad architecture descriptor: {exc}") from exc
        digest = take(DIGEST_BYTES)
        (count,) = struct.unpack("<Q", take(8))
        weights = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        if pos != len(view):
            raise CheckpointError(f"{len(view) - pos} trailing bytes after weights")
        return cls(sched, arch, digest, weights, version)


def save_checkpoint(path, ckpt: Checkpoint):
    """Write atomically: a partial write never replaces a good file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(ckpt.to_bytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path, expected_digest: bytes = None, force=False) -> Checkpoint:
    """Read a checkpoint; refuse a digest mismatch unless ``force``."""
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if expected_digest is not None and ckpt.digest != expected_digest and not force:
        raise CheckpointError(
            f"{path} was produced by a different config (digest {ckpt.digest.hex()[:12]}, "
            f"expected {expected_digest.hex()[:12]}); pass force to load anyway"
        )
    return ckpt
