"""
Checkpoints for LaneTopoLab
Binary parameter snapshots: the `LTCK` magic, a little-endian u32 header
length, a sorted-key JSON header, then every parameter as little-endian
float32 in registry order. Files are byte-for-byte reproducible and are
identified by their git blob hash.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from errors import CheckpointVersionError
from numerics import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"LTCK"
FORMAT_VERSION = 1


def content_hash(data: bytes) -> str:
    """git blob SHA-1 of `data`"""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path: Union[str, Path]) -> str:
    return content_hash(Path(path).read_bytes())


def encode_checkpoint(params: ParamStore, config: Dict[str, Any], seed: int) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "seed": int(seed),
        "params": [{"name": name, "shape": list(node.shape)} for name, node in params.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(node.values.astype("<f4").tobytes() for _, node in params.items())
    return MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + body


def decode_checkpoint(data: bytes, dtype: str = "float64") -> Tuple[Dict[str, Any], ParamStore]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointVersionError("not a LaneTopoLab checkpoint (bad magic)")
    (length,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointVersionError(f"unreadable checkpoint header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format_version {version!r}; "
                                     f"expected {FORMAT_VERSION}")

    params = ParamStore(header.get("seed", 0), dtype)
    offset = 8 + length
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointVersionError(f"checkpoint truncated in parameter {entry['name']!r}")
        values = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape)
        params.register(entry["name"], values)
        offset = end
    if offset != len(data):
        raise CheckpointVersionError(f"{len(data) - offset} trailing bytes after the last parameter")
    return header, params


def save_checkpoint(path: Union[str, Path], params: ParamStore, config: Dict[str, Any], seed: int) -> str:
    """Write a checkpoint and return its content hash"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(params, config, seed)
    path.write_bytes(data)
    digest = content_hash(data)
    logger.info(f"Checkpoint written to {path} ({len(params)} tensors, {digest[:12]})")
    return digest


def load_checkpoint(path: Union[str, Path], dtype: str = "float64") -> Tuple[Dict[str, Any], ParamStore]:
    path = Path(path)
    if not path.exists():
        raise CheckpointVersionError(f"checkpoint {path} not found")
    return decode_checkpoint(path.read_bytes(), dtype)
