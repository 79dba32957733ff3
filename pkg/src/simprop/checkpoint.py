"""Binary checkpoint format.

Layout: the magic line ``SPNKPT1\\n``, a block of ``key=value`` header lines
describing the model configuration, one blank line, then for every tensor in
canonical order a name line, a comma-separated shape line, and the raw
little-endian float32 payload. A CRC32 of all payload bytes (in order) is
appended as four little-endian bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

MAGIC = b"SPNKPT1\n"


class CheckpointError(ValueError):
    pass


def save(path: str | Path, params: ModelParams) -> None:
    crc = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        for k, v in params.config.header_items():
            f.write(f"{k}={v}\n".encode("ascii"))
        f.write(b"\n")
        for name, t in params.named_tensors():
            f.write(name.encode("ascii") + b"\n")
            f.write(",".join(map(str, t.data.shape)).encode("ascii") + b"\n")
            payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            crc = zlib.crc32(payload, crc)
            f.write(payload)
        f.write(struct.pack("<I", crc))


def _read_line(f) -> str:
    raw = f.readline()
    if not raw:
        raise CheckpointError("truncated checkpoint: unexpected end of file")
    if not raw.endswith(b"\n"):
        raise CheckpointError("truncated checkpoint: unterminated line")
    try:
        return raw[:-1].decode("ascii")
    except UnicodeDecodeError as e:
        raise CheckpointError("corrupt checkpoint: non-ascii metadata line") from e


def load(path: str | Path, expected_config: ModelConfig | None = None) -> ModelParams:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        header: dict[str, str] = {}
        while True:
            line = _read_line(f)
            if line == "":
                break
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"{path}: malformed header line {line!r}")
            header[key] = value
        try:
            config = ModelConfig.from_header(header)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: bad header: {e}") from e
        if expected_config is not None and config != expected_config:
            raise CheckpointError(
                f"{path}: checkpoint configuration does not match the requested one"
            )

        # A fresh skeleton pins the expected tensor names and shapes.
        params = ModelParams(config, seed=None)
        crc = 0
        for name, t in params.named_tensors():
            got = _read_line(f)
            if got != name:
                raise CheckpointError(f"{path}: expected tensor {name!r}, found {got!r}")
            shape_line = _read_line(f)
            shape = tuple(int(s) for s in shape_line.split(",")) if shape_line else ()
            if shape != t.data.shape:
                raise CheckpointError(
                    f"{path}: tensor {name}: shape {shape} does not match {t.data.shape}"
                )
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4
            payload = f.read(nbytes)
            if len(payload) != nbytes:
                raise CheckpointError(f"{path}: truncated payload for tensor {name}")
            crc = zlib.crc32(payload, crc)
            t.data[...] = np.frombuffer(payload, dtype="<f4").reshape(shape)
        tail = f.read(4)
        if len(tail) != 4:
            raise CheckpointError(f"{path}: missing checksum")
        (stored,) = struct.unpack("<I", tail)
        if stored != crc:
            raise CheckpointError(f"{path}: checksum mismatch (corrupt payload)")
        if f.read(1):
            raise CheckpointError(f"{path}: trailing data after checksum")
    return params
