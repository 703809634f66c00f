"""Binary checkpoint format (all integers little-endian):

    8 bytes   magic b"NNWMCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 length n of the header
    n bytes   UTF-8 JSON header (sorted keys): architecture, meta, tensor table
    ...       raw float64 ('<f8') tensors, C order, in tensor-table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import Model, layer_from_spec
from .errors import DataError

MAGIC = b"NNWMCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def to_bytes(model: Model) -> bytes:
    tensors = [{"layer": l, "param": p, "shape": list(model.layer(l).params[p].shape)}
               for l, p in model.param_keys()]
    header = json.dumps({"architecture": model.architecture(), "meta": model.meta, "tensors": tensors},
                        sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in model.parameters())
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + body


def from_bytes(blob: bytes) -> Model:
    if len(blob) < _PREFIX.size:
        raise DataError(f"checkpoint too short ({len(blob)} bytes)")
    magic, version, n = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt checkpoint header: {e}") from None
    arch = header["architecture"]
    model = Model([layer_from_spec(s) for s in arch["layers"]], tuple(arch["input_shape"]),
                  arch["embed_layer"], arch["seed"], header["meta"])
    offset = _PREFIX.size + n
    arrays = []
    for t in header["tensors"]:
        count = int(np.prod(t["shape"]))
        end = offset + 8 * count
        if end > len(blob):
            raise DataError(f"checkpoint truncated at byte offset {len(blob)}; tensor "
                            f"{t['layer']}.{t['param']} needs bytes {offset}..{end}")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
                      .reshape(t["shape"]).astype(np.float64))
        offset = end
    if offset != len(blob):
        raise DataError(f"{len(blob) - offset} trailing bytes after last tensor at offset {offset}")
    if [(t["layer"], t["param"]) for t in header["tensors"]] != model.param_keys():
        raise DataError("tensor table does not match the architecture")
    model.set_parameters(arrays)
    return model


def save(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing checkpoint {path}")
    return from_bytes(path.read_bytes())
