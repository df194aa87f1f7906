"""Binary checkpoint files and on-disk checkpoint stores.

Layout (little-endian throughout)::

    b"SGHC"  u16 version
    16s config hash (ASCII hex)  u64 epoch  u32 cycle
    f64 eta  f64 temperature  f64 lambda  u64 seed  u64 n
    n * f32 payload
    u32 CRC32 of the payload bytes
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .models import Layout, WeightVector
from .sampler import Checkpoint, CheckpointStore

MAGIC = b"SGHC"
VERSION = 1
_PREFIX = struct.Struct("<4sH")
_HEADER = struct.Struct("<16sQIdddQQ")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


class CRCMismatchError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ConfigHashMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class CheckpointHeader:
    config_hash: str
    epoch: int = 0
    cycle: int = 0
    eta: float = 0.0
    temperature: float = 0.0
    lam: float = 0.0
    seed: int = 0

    def __post_init__(self):
        h = self.config_hash.encode("ascii")
        if len(h) > 16:
            raise ValueError("config hash must be at most 16 ASCII characters")


def encode_checkpoint(values: np.ndarray, header: CheckpointHeader, version: int = VERSION) -> bytes:
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    head = _PREFIX.pack(MAGIC, version) + _HEADER.pack(
        header.config_hash.encode("ascii"), header.epoch, header.cycle, header.eta,
        header.temperature, header.lam, header.seed, len(payload) // 4)
    return head + payload + _CRC.pack(zlib.crc32(payload))


def decode_checkpoint(blob: bytes, expected_hash: str | None = None) -> tuple[np.ndarray, CheckpointHeader]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint")
    magic, version = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    if len(blob) < _PREFIX.size + _HEADER.size:
        raise CheckpointError("truncated header")
    h, epoch, cycle, eta, temp, lam, seed, n = _HEADER.unpack_from(blob, _PREFIX.size)
    start = _PREFIX.size + _HEADER.size
    end = start + 4 * n
    if len(blob) != end + _CRC.size:
        raise CheckpointError(f"payload size mismatch: header says {n} floats, file has "
                              f"{max(len(blob) - start - _CRC.size, 0) / 4:g}")
    payload = blob[start:end]
    (crc,) = _CRC.unpack_from(blob, end)
    if zlib.crc32(payload) != crc:
        raise CRCMismatchError("payload CRC32 does not match")
    header = CheckpointHeader(h.rstrip(b"\0").decode("ascii"), epoch, cycle, eta, temp, lam, seed)
    if expected_hash is not None and header.config_hash != expected_hash:
        raise ConfigHashMismatchError(
            f"checkpoint was written for config {header.config_hash}, expected {expected_hash}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32), header


def save_checkpoint(path: str | Path, weights: WeightVector | np.ndarray, header: CheckpointHeader) -> Path:
    values = weights.values if isinstance(weights, WeightVector) else np.asarray(weights)
    p = Path(path)
    p.write_bytes(encode_checkpoint(values, header))
    return p


def load_checkpoint(path: str | Path, expected_hash: str | None = None,
                    layout: Layout | None = None):
    """Weights (a WeightVector if ``layout`` is given, else a float32 array) and the header."""
    values, header = decode_checkpoint(Path(path).read_bytes(), expected_hash)
    if layout is not None:
        if layout.size != values.size:
            raise CheckpointError(f"checkpoint holds {values.size} weights, layout expects {layout.size}")
        return WeightVector(values, layout), header
    return values, header


def save_store(store: CheckpointStore, directory: str | Path, config_hash: str, seed: int = 0,
               temperature: float = 0.0, lam: float = 0.0) -> Path:
    """One file per checkpoint plus ``store.json`` with the order and the chain metadata."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, c in enumerate(store.checkpoints):
        name = f"ckpt_{i:04d}_e{c.epoch:05d}.sghc"
        save_checkpoint(d / name, c.weights,
                        CheckpointHeader(config_hash, c.epoch, c.cycle, c.lr, temperature, lam, seed))
        names.append(name)
    index = {"config_hash": config_hash, "files": names, "meta": store.meta}
    (d / "store.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return d


def load_store(directory: str | Path, layout: Layout, expected_hash: str | None = None) -> CheckpointStore:
    d = Path(directory)
    index = json.loads((d / "store.json").read_text())
    want = expected_hash if expected_hash is not None else index["config_hash"]
    cps = []
    for name in index["files"]:
        w, h = load_checkpoint(d / name, want, layout)
        cps.append(Checkpoint(h.epoch, h.cycle, h.eta, w))
    return CheckpointStore(cps, index.get("meta", {}))


def header_dict(header: CheckpointHeader) -> dict:
    return asdict(header)
