"""Binary checkpoint format: PTAB magic, JSON manifest, raw float32 data.

Layout: ``b"PTAB"``, version u32 LE, metadata length u32 LE, UTF-8 JSON
metadata (config + meta + tensor manifest), then each tensor's row-major
little-endian float32 bytes in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, Parameters, parameter_shapes

MAGIC = b"PTAB"
VERSION = 1


@dataclass(frozen=True)
class CheckpointMeta:
    """Provenance of a saved model: stage, best epoch, selection metric."""

    stage: str  # "MF" or "CF"
    epoch: int
    metric: float
    provenance: dict[str, int]
    config_digest: str

    def __post_init__(self):
        if self.stage not in ("MF", "CF"):
            raise FormatError(f"stage must be MF or CF, got {self.stage!r}")
        if not np.isfinite(self.metric):
            raise FormatError("checkpoint metric must be finite")


def config_digest(config: ModelConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def save_checkpoint(params: Parameters, meta: CheckpointMeta, path: str | Path) -> None:
    """Write params (cast to float32) and metadata; load() restores bit-exactly."""
    manifest = [
        {"name": name, "shape": list(tensor.shape)}
        for name, tensor in params.tensors.items()
    ]
    header = {
        "config": asdict(params.config),
        "meta": asdict(meta),
        "tensors": manifest,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for tensor in params.tensors.values():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Parameters, ModelConfig, CheckpointMeta]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes (not a checkpoint)")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<I", data, 8)
    if len(data) < 12 + meta_len:
        raise FormatError(f"{path}: truncated metadata")
    try:
        header = json.loads(data[12 : 12 + meta_len].decode("utf-8"))
        config = ModelConfig(**header["config"])
        meta = CheckpointMeta(**header["meta"])
        manifest = header["tensors"]
    except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed metadata: {exc}") from exc

    expected = parameter_shapes(config)
    if [m["name"] for m in manifest] != list(expected):
        raise FormatError(f"{path}: tensor manifest does not match the config")
    tensors: dict[str, np.ndarray] = {}
    offset = 12 + meta_len
    for entry in manifest:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]]:
            raise FormatError(f"{path}: tensor {entry['name']} has wrong shape")
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated tensor data at {entry['name']}")
        tensors[entry["name"]] = (
            np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return Parameters(config, tensors), config, meta
