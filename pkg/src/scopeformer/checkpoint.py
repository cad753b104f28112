"""Binary checkpoint format shared by every module.

Layout (little-endian): magic "SCKP", version u32, param_count u32; then per
parameter: name_len u16 + UTF-8 name, rank u8, extents u32 each, float32
values. Loading matches strictly by name; missing or extra names are errors.
"""

from __future__ import annotations

import struct

import numpy as np

from .nn import ParamModule

MAGIC = b"SCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(module: ParamModule, path) -> None:
    params = list(module.named_parameters())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for name, t in params:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", t.data.ndim))
            for extent in t.data.shape:
                f.write(struct.pack("<I", extent))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError("bad magic")
        version, count = struct.unpack("<II", _read_exact(f, 8))
        if version != VERSION:
            raise CheckpointError(f"unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0]
                          for _ in range(rank))
            n_values = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(_read_exact(f, 4 * n_values), dtype="<f4")
            if name in out:
                raise CheckpointError(f"duplicate parameter {name!r}")
            out[name] = values.reshape(shape).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after last parameter")
    return out


def load_checkpoint(module: ParamModule, path) -> None:
    """Load values into the module's registry; the name sets must match."""
    stored = read_checkpoint(path)
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"parameter name mismatch; missing={missing[:3]} extra={extra[:3]}")
    for name, t in params.items():
        values = stored[name]
        if values.shape != t.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: {values.shape} vs {t.data.shape}")
        t.data = values.astype(t.data.dtype)
