"""Binary checkpoint container.

Layout (little-endian)::

    b"RTOK" | version u32 | config length u32 | config JSON (utf-8)
    | tensor count u32
    | per tensor: name length u32 | name | rank u32 | extents u64 * rank | float64 data
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RTOK"
VERSION = 1
MAX_ELEMENTS = 1 << 40


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found: int, expected: int = VERSION):
        super().__init__(f"checkpoint version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class TruncatedFileError(CheckpointError):
    pass


class ExtentOverflowError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(blob).hexdigest()


def encode(ckpt: Checkpoint) -> bytes:
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        if len(buf) < 4:
            raise TruncatedFileError("file shorter than the magic header")
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(version)
    try:
        config = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable config record: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        extents = r.unpack(f"<{rank}Q")
        n = 1
        for e in extents:
            n *= e
            if n > MAX_ELEMENTS:
                raise ExtentOverflowError(f"tensor {name!r} extents {extents} overflow")
        raw = r.take(8 * n)
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(extents)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return Checkpoint(config, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def model_checkpoint(model, seed: int | None = None, extra: dict | None = None) -> Checkpoint:
    """Pack backbone weights with their architecture and provenance."""
    from .vit import config_dict

    cfg = {"kind": "backbone", "vit": config_dict(model.config), "seed": seed}
    cfg.update(extra or {})
    cfg["config_hash"] = config_hash(cfg)
    return Checkpoint(cfg, model.state_dict())


def model_from_checkpoint(ckpt: Checkpoint):
    from .vit import ModelWeights, ViTConfig

    if "vit" not in ckpt.config:
        raise CheckpointError("checkpoint has no backbone config record")
    model = ModelWeights.from_state_dict(ViTConfig(**ckpt.config["vit"]), ckpt.tensors)
    return model.freeze()


def tokens_checkpoint(tokens: np.ndarray, backbone_hash: str | None, seed: int | None = None, extra: dict | None = None) -> Checkpoint:
    cfg = {"kind": "rob_tokens", "backbone_hash": backbone_hash, "seed": seed}
    cfg.update(extra or {})
    cfg["config_hash"] = config_hash(cfg)
    return Checkpoint(cfg, {"rob.tokens": np.asarray(tokens, dtype=np.float64)})


def tokens_from_checkpoint(ckpt: Checkpoint) -> np.ndarray:
    if "rob.tokens" not in ckpt.tensors:
        raise CheckpointError("checkpoint holds no rob.tokens tensor")
    return ckpt.tensors["rob.tokens"]
