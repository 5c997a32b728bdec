"""Binary checkpoint format.

Layout (all little-endian):
    magic "TAPL" | u16 format version | u32 config-text length + UTF-8 text
    | u64 iteration counter
    | named tensor block (parameters)
    | u64 optimizer step count | named tensor block (moment estimates)
    | u32 rng-state JSON length + UTF-8 JSON

A named tensor block is: u32 count, then per tensor u16 name length + name,
u8 rank, rank * u32 dims, and the float64 payload.  Round trips are
bit-exact, including rng and optimizer state, so resuming reproduces the
same trajectory as an unbroken run.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"TAPL"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class CheckpointData:
    config_text: str
    iteration: int
    params: dict[str, np.ndarray]
    optimizer_step: int
    optimizer_moments: dict[str, np.ndarray]   # "m:<name>" and "v:<name>"
    rng_states: dict                            # stream name -> generator state


def _write_named(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        array = np.asarray(array, dtype=np.float64)
        encoded = name.encode()
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", array.ndim))
        for dim in array.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(array.astype("<f8").tobytes())


def _read_named(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode()
        (rank,) = struct.unpack("<B", fh.read(1))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        payload = fh.read(8 * size)
        if len(payload) != 8 * size:
            raise CheckpointError(f"truncated tensor payload for {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out


def save_checkpoint(path: Path, data: CheckpointData) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        config_bytes = data.config_text.encode()
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<Q", data.iteration))
        _write_named(fh, data.params)
        fh.write(struct.pack("<Q", data.optimizer_step))
        _write_named(fh, data.optimizer_moments)
        rng_bytes = json.dumps(data.rng_states, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(rng_bytes)))
        fh.write(rng_bytes)


def load_checkpoint(path: Path) -> CheckpointData:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} != supported {FORMAT_VERSION}")
        (config_len,) = struct.unpack("<I", fh.read(4))
        config_text = fh.read(config_len).decode()
        (iteration,) = struct.unpack("<Q", fh.read(8))
        params = _read_named(fh)
        (opt_step,) = struct.unpack("<Q", fh.read(8))
        moments = _read_named(fh)
        (rng_len,) = struct.unpack("<I", fh.read(4))
        rng_states = json.loads(fh.read(rng_len).decode())
    return CheckpointData(config_text=config_text, iteration=iteration, params=params,
                          optimizer_step=opt_step, optimizer_moments=moments,
                          rng_states=rng_states)
