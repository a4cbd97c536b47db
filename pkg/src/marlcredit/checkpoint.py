"""Checkpoint persistence: a structured text header followed by
length-prefixed little-endian float64 arrays for every named tensor.
"""
from __future__ import annotations

import json

import numpy as np

MAGIC = b"MCKPT001"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """header must be JSON-serializable; tensors are written as float64."""
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        fh.write(np.uint64(len(tensors)).tobytes())
        for name, array in tensors.items():
            data = np.ascontiguousarray(array, dtype="<f8")
            name_bytes = name.encode()
            fh.write(np.uint64(len(name_bytes)).tobytes())
            fh.write(name_bytes)
            fh.write(np.uint64(data.ndim).tobytes())
            fh.write(np.asarray(data.shape, dtype="<u8").tobytes())
            fh.write(data.tobytes())


def _read_u64(fh) -> int:
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated checkpoint")
    return int(np.frombuffer(raw, dtype="<u8")[0])


def load_checkpoint(path, expected_config_hash: str | None = None, force: bool = False):
    """Returns (header, tensors). A config-hash mismatch is refused unless
    force is set."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        header = json.loads(fh.read(_read_u64(fh)).decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        if (
            expected_config_hash is not None
            and header.get("config_hash") != expected_config_hash
            and not force
        ):
            raise CheckpointError(
                f"config hash mismatch: checkpoint {header.get('config_hash')} vs "
                f"current {expected_config_hash} (use force to load anyway)"
            )
        tensors = {}
        for _ in range(_read_u64(fh)):
            name = fh.read(_read_u64(fh)).decode()
            ndim = _read_u64(fh)
            shape = tuple(
                int(v) for v in np.frombuffer(fh.read(8 * ndim), dtype="<u8")
            )
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"truncated tensor data for {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header, tensors
