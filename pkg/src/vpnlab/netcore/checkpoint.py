"""
Checkpoint container.

Layout (all integers little-endian):

    magic         b"VPNLAB-CKPT"
    version       u16
    header_len    u32, then a YAML header of that many bytes
    n_records     u32, then per record:
        name_len u16, name (utf-8), dtype code (2 ascii bytes, f4/f8),
        ndim u8, dims (u32 each), values (row-major)

Records keep insertion order, so reading and rewriting reproduces the file
byte for byte.
"""

import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.errors import ConfigurationError
from vpnlab.netcore.adam import AdamState
from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import Array

logger: VpnlabLogger = vpnlab_logger.init(__name__)

CHECKPOINT_MAGIC: bytes = b"VPNLAB-CKPT"
CHECKPOINT_VERSION: int = 1

_DTYPE_CODES: dict[str, np.dtype[Any]] = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
}


def _dtype_code(values: Array) -> str:
    if values.dtype == np.float32:
        return "f4"
    if values.dtype == np.float64:
        return "f8"
    raise ConfigurationError(f"cannot store dtype {values.dtype} in a checkpoint")


def encode_checkpoint(header: Mapping[str, Any], records: Mapping[str, Array]) -> bytes:
    header_bytes = yaml.safe_dump(dict(header), sort_keys=True).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<HI", CHECKPOINT_VERSION, len(header_bytes)),
        header_bytes,
        struct.pack("<I", len(records)),
    ]
    for name, values in records.items():
        code = _dtype_code(values)
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(code.encode("ascii"))
        chunks.append(struct.pack("<B", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype=_DTYPE_CODES[code]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self._blob = blob
        self._offset = 0

    def take(self, size: int) -> bytes:
        end = self._offset + size
        if end > len(self._blob):
            raise ConfigurationError("checkpoint is truncated")
        chunk = self._blob[self._offset : end]
        self._offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self._offset == len(self._blob)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, Any], dict[str, Array]]:
    reader = _Reader(blob)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ConfigurationError("not a vpnlab checkpoint")
    version, header_len = reader.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    header = yaml.safe_load(reader.take(header_len).decode("utf-8")) or {}

    records: dict[str, Array] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code = reader.take(2).decode("ascii")
        if code not in _DTYPE_CODES:
            raise ConfigurationError(f"record `{name}` has unknown dtype code {code!r}")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        dtype = _DTYPE_CODES[code]
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(size * dtype.itemsize), dtype=dtype)
        records[name] = values.reshape(shape).astype(dtype.newbyteorder("="))
    if not reader.exhausted:
        raise ConfigurationError("trailing bytes after checkpoint records")
    return header, records


def save_checkpoint(path: Path, header: Mapping[str, Any], records: Mapping[str, Array]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(header, records))
    logger.info(f"wrote checkpoint {path}")


def load_checkpoint(path: Path) -> tuple[dict[str, Any], dict[str, Array]]:
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


def pack_training_state(
    params: ParamStore,
    opt: AdamState | None = None,
    target: ParamStore | None = None,
) -> dict[str, Array]:
    """Flatten params, target copy and Adam moments into named records."""
    records: dict[str, Array] = {}
    for name, param in params.items():
        records[f"param/{name}"] = param.data
    if target is not None:
        for name, param in target.items():
            records[f"target/{name}"] = param.data
    if opt is not None:
        for name in params:
            if name in opt.m:
                records[f"adam.m/{name}"] = opt.m[name]
                records[f"adam.v/{name}"] = opt.v[name]
    return records


def _section(records: Mapping[str, Array], prefix: str) -> dict[str, Array]:
    return {
        name[len(prefix) :]: values for name, values in records.items() if name.startswith(prefix)
    }


def unpack_training_state(
    records: Mapping[str, Array],
    params: ParamStore,
    opt: AdamState | None = None,
    target: ParamStore | None = None,
) -> None:
    params.load_values(_section(records, "param/"))
    if target is not None:
        stored = _section(records, "target/")
        target.load_values(stored or _section(records, "param/"))
    if opt is not None:
        opt.m = {name: values.copy() for name, values in _section(records, "adam.m/").items()}
        opt.v = {name: values.copy() for name, values in _section(records, "adam.v/").items()}
