"""Binary network checkpoints.

Layout (all integers little-endian):

    offset  size  field
    0       4     magic b"HFCK"
    4       2     u16 format version (1)
    6       2     u16 reserved (0)
    8       4     u32 config length L
    12      L     UTF-8 JSON: {"network": NetworkConfig, "precision": ...}
    12+L    8     u64 parameter count P
    20+L    4P    parameters, float32 little-endian, flat-vector order
    ...     8     u64 running-statistics count S
    ...     4S    batch-norm running mean/var per pipeline per block, float32
    ...     8     u64 iteration count
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from hippofusion.errors import CheckpointError, MissingFileError
from hippofusion.model import FusionNetwork, build_network
from hippofusion.models import NetworkConfig

logger = logging.getLogger(__name__)

MAGIC = b"HFCK"
VERSION = 1


@dataclass
class Checkpoint:
    network: FusionNetwork
    iteration: int
    version: int = VERSION


def encode_checkpoint(net: FusionNetwork, iteration: int = 0) -> bytes:
    config = json.dumps(
        {"network": net.config.model_dump(mode="json"), "precision": str(net.dtype)},
        sort_keys=True,
    ).encode("utf-8")
    params = np.ascontiguousarray(net.params, dtype="<f4").tobytes()
    running = np.ascontiguousarray(net.running_flat(), dtype="<f4").tobytes()
    return b"".join(
        [
            MAGIC,
            struct.pack("<HHI", VERSION, 0, len(config)),
            config,
            struct.pack("<Q", net.params.size),
            params,
            struct.pack("<Q", len(running) // 4),
            running,
            struct.pack("<Q", iteration),
        ]
    )


def _take(raw: bytes, offset: int, size: int, field: str) -> bytes:
    if offset + size > len(raw):
        raise CheckpointError(f"checkpoint truncated in {field}", field=field, offset=offset)
    return raw[offset:offset + size]


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if _take(raw, 0, 4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)", field="magic")
    version, _, config_len = struct.unpack("<HHI", _take(raw, 4, 8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", field="version", version=version)
    offset = 12
    meta = json.loads(_take(raw, offset, config_len, "config").decode("utf-8"))
    offset += config_len
    config = NetworkConfig.model_validate(meta["network"])
    net = build_network(config, init_seed=0, precision=meta.get("precision", "float32"))

    (n_params,) = struct.unpack("<Q", _take(raw, offset, 8, "parameter count"))
    offset += 8
    if n_params != net.params.size:
        raise CheckpointError(
            f"checkpoint has {n_params} parameters, config implies {net.params.size}",
            field="parameter count",
        )
    params = np.frombuffer(_take(raw, offset, 4 * n_params, "parameters"), dtype="<f4")
    offset += 4 * n_params
    net.set_flat(params.astype(net.dtype))

    (n_running,) = struct.unpack("<Q", _take(raw, offset, 8, "running count"))
    offset += 8
    running = np.frombuffer(_take(raw, offset, 4 * n_running, "running statistics"), dtype="<f4")
    offset += 4 * n_running
    net.set_running_flat(running.astype(net.dtype))

    (iteration,) = struct.unpack("<Q", _take(raw, offset, 8, "iteration"))
    offset += 8
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after checkpoint", field="iteration")
    return Checkpoint(net, iteration, version)


def save_checkpoint(path: Union[str, Path], net: FusionNetwork, iteration: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(net, iteration))
    logger.info(f"Saved checkpoint {path} at iteration {iteration}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}", path=str(path))
    return decode_checkpoint(path.read_bytes())
