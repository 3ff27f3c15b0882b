"""Binary checkpoint format.

::

    b"METH" | u32 version | u32 len | config JSON (UTF-8)
    float64 LE parameter blob, parameters in declaration order
    [optional] b"OPTM" | u32 section version | u32 len | state JSON | float64 LE state blob

All integers are little-endian.  The config JSON records parameter names and
shapes so the blob can be split without building a model first.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .io_utils import atomic_write_bytes
from .numerics import Tensor

MAGIC = b"METH"
OPT_MAGIC = b"OPTM"
VERSION = 1
OPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optim_step: int | None = None
    optim_state: list = field(default_factory=list)  # [(name, slot, array)]

    def to_bytes(self) -> bytes:
        header = dict(self.config)
        header["param_names"] = list(self.params)
        header["param_shapes"] = [list(a.shape) for a in self.params.values()]
        hb = _dumps(header)
        out = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb]
        out += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.params.values()]
        if self.optim_step is not None:
            meta = {"step": int(self.optim_step),
                    "slots": [[n, s, list(a.shape)] for n, s, a in self.optim_state]}
            mb = _dumps(meta)
            out += [OPT_MAGIC, struct.pack("<II", OPT_VERSION, len(mb)), mb]
            out += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, _, a in self.optim_state]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        try:
            return cls._parse(data)
        except CheckpointError as err:
            raise CheckpointError(f"{source}: {err}") from None
        except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as err:
            raise CheckpointError(f"{source}: corrupt checkpoint ({err})") from None

    @classmethod
    def _parse(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("bad magic, not a checkpoint file")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        names = header.pop("param_names")
        shapes = header.pop("param_shapes")
        params, pos = _read_arrays(data, pos, shapes)
        ck = cls(header, dict(zip(names, params)))
        if pos == len(data):
            return ck
        if data[pos:pos + 4] != OPT_MAGIC:
            raise CheckpointError("trailing bytes after parameter blob")
        oversion, mlen = struct.unpack_from("<II", data, pos + 4)
        if oversion != OPT_VERSION:
            raise CheckpointError(f"unsupported optimizer section version {oversion}")
        pos += 12
        meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
        pos += mlen
        arrays, pos = _read_arrays(data, pos, [s[2] for s in meta["slots"]])
        if pos != len(data):
            raise CheckpointError("trailing bytes after optimizer section")
        ck.optim_step = int(meta["step"])
        ck.optim_state = [(n, s, a) for (n, s, _), a in zip(meta["slots"], arrays)]
        return ck

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as err:
            raise CheckpointError(f"{path}: {err.strerror}") from None
        return cls.from_bytes(data, str(path))

    def tensors(self) -> dict[str, Tensor]:
        return {n: Tensor(a.copy(), requires_grad=True) for n, a in self.params.items()}


def _read_arrays(data: bytes, pos: int, shapes) -> tuple[list[np.ndarray], int]:
    out = []
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointError("truncated array blob")
        out.append(np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(shape))
        pos = end
    return out, pos
