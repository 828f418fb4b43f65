"""Binary checkpoint format for the parameter store.

Layout (all integers little-endian):

    magic  b"NMNCKPT1"
    u32    tensor count N
    N records:                value tensors, sorted by name
    2N records:               per tensor, optimizer state under the same
                              name suffixed ".Eg2" then ".Edx2"
    u64    CRC-64 of every preceding byte

Each record is: u16 name length, UTF-8 name, u8 rank, rank u32 dims,
float32 data row-major. Values are stored bit-exactly, so saving and
reloading a float32 store reproduces it byte for byte. The CRC (reflected
ECMA-182 polynomial) is verified on load.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .params import ParameterStore

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint",
           "checkpoint_bytes", "store_from_checkpoint", "crc64"]

MAGIC = b"NMNCKPT1"

_CRC64_POLY = 0xC96C5795D7870F42
_CRC64_MASK = 0xFFFFFFFFFFFFFFFF


def _make_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _make_table()


def crc64(data: bytes) -> int:
    crc = _CRC64_MASK
    table = _CRC_TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ _CRC64_MASK


class CheckpointError(ValueError):
    pass


def _encode_record(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise CheckpointError(f"name too long: {name!r}")
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim > 4:
        raise CheckpointError(f"rank {arr.ndim} unsupported for {name!r}")
    parts = [struct.pack("<H", len(encoded)), encoded,
             struct.pack("<B", arr.ndim)]
    parts += [struct.pack("<I", d) for d in arr.shape]
    parts.append(arr.tobytes())
    return b"".join(parts)


def checkpoint_bytes(store: ParameterStore) -> bytes:
    names = store.names()
    parts = [MAGIC, struct.pack("<I", len(names))]
    for name in names:
        parts.append(_encode_record(name, store.get(name).data))
    for name in names:
        eg2, edx2 = store.opt_state(name)
        parts.append(_encode_record(f"{name}.Eg2", eg2))
        parts.append(_encode_record(f"{name}.Edx2", edx2))
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def save_checkpoint(store: ParameterStore, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(store))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def record(self) -> tuple[str, np.ndarray]:
        (name_len,) = struct.unpack("<H", self.take(2))
        name = self.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", self.take(1))
        dims = tuple(struct.unpack("<I", self.take(4))[0] for _ in range(rank))
        count = 1
        for d in dims:
            count *= d
        raw = self.take(4 * count)
        values = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        return name, values


def load_checkpoint(path_or_bytes) -> tuple[dict[str, np.ndarray],
                                            dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Parse a checkpoint into value and optimizer-state arrays (float32)."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        data = Path(path_or_bytes).read_bytes()
    if len(data) < len(MAGIC) + 4 + 8:
        raise CheckpointError("file too short to be a checkpoint")
    body, trailer = data[:-8], data[-8:]
    (stored_crc,) = struct.unpack("<Q", trailer)
    actual = crc64(body)
    if actual != stored_crc:
        raise CheckpointError(
            f"CRC mismatch: stored {stored_crc:016x}, computed {actual:016x}")
    reader = _Reader(body)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic bytes")
    (count,) = struct.unpack("<I", reader.take(4))
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, arr = reader.record()
        values[name] = arr
    raw_state: dict[str, np.ndarray] = {}
    for _ in range(2 * count):
        name, arr = reader.record()
        raw_state[name] = arr
    if reader.pos != len(body):
        raise CheckpointError(f"{len(body) - reader.pos} trailing bytes")
    state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name in values:
        try:
            state[name] = (raw_state[f"{name}.Eg2"], raw_state[f"{name}.Edx2"])
        except KeyError as missing:
            raise CheckpointError(f"missing optimizer state {missing}") from None
    return values, state


def store_from_checkpoint(path_or_bytes, seed: int = 0) -> ParameterStore:
    values, state = load_checkpoint(path_or_bytes)
    store = ParameterStore(seed=seed)
    for name, arr in values.items():
        store.set_value(name, arr)
        eg2, edx2 = state[name]
        store.set_opt_state(name, eg2, edx2)
    return store
