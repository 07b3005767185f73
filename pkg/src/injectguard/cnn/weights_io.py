"""Weight-file format: "FLWT" header + float32 little-endian payload.

Layout:

    magic   4s   b"FLWT"
    version u16
    count   u16  number of tensors
    per tensor: rank u8, then rank dims u32
    payload: all tensor values as IEEE-754 binary32 LE, declaration order

No checksum: a flipped header byte fails structural validation, and a
flipped payload byte changes parameter values without breaking shapes.
The same byte string is what travels inside federation wire frames.
Values are quantized to binary32 on write; reading promotes back to
float64, so serialize(deserialize(b)) == b always, and a weight set that
has passed through the format once round-trips bit-exactly thereafter.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import CorruptWeightsError, InvalidInputError
from ..fileio import atomic_write_bytes
from .model import ModelWeights

MAGIC = b"FLWT"
FORMAT_VERSION = 1

_MAX_RANK = 8
_F32_MAX = float(np.finfo(np.float32).max)


def serialize_weights(weights: ModelWeights) -> bytes:
    """Encode weights; raises if any value overflows binary32."""
    if not weights.tensors:
        raise InvalidInputError("no tensors to serialize")
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(weights.tensors))]
    payload = []
    for t in weights.tensors:
        if t.ndim == 0 or t.ndim > _MAX_RANK:
            raise InvalidInputError(f"unsupported tensor rank {t.ndim}")
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        if t.size and float(np.max(np.abs(t))) > _F32_MAX:
            raise InvalidInputError("weight value overflows 32-bit float")
        payload.append(t.astype("<f4").tobytes(order="C"))
    return b"".join(parts) + b"".join(payload)


def deserialize_weights(blob: bytes) -> ModelWeights:
    """Decode a weight byte string; structural damage → CorruptWeightsError."""
    if len(blob) < 8:
        raise CorruptWeightsError("weight blob too short for header")
    if blob[:4] != MAGIC:
        raise CorruptWeightsError("bad magic (not a weight file)")
    version, count = struct.unpack_from("<HH", blob, 4)
    if version != FORMAT_VERSION:
        raise CorruptWeightsError(f"unsupported weight format version {version}")
    if count == 0:
        raise CorruptWeightsError("weight file declares zero tensors")
    off = 8
    shapes = []
    total = 0
    for _ in range(count):
        if off + 1 > len(blob):
            raise CorruptWeightsError("truncated tensor header")
        rank = blob[off]
        off += 1
        if rank == 0 or rank > _MAX_RANK:
            raise CorruptWeightsError(f"implausible tensor rank {rank}")
        if off + 4 * rank > len(blob):
            raise CorruptWeightsError("truncated tensor dims")
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        if any(d == 0 for d in dims):
            raise CorruptWeightsError(f"zero-sized dimension in {dims}")
        size = 1
        for d in dims:
            size *= d
        shapes.append(dims)
        total += size
    if len(blob) - off != 4 * total:
        raise CorruptWeightsError(
            f"payload is {len(blob) - off} bytes, shapes require {4 * total}"
        )
    values = np.frombuffer(blob, dtype="<f4", count=total, offset=off)
    tensors = []
    pos = 0
    for dims in shapes:
        size = int(np.prod(dims))
        tensors.append(values[pos : pos + size].astype(np.float64).reshape(dims))
        pos += size
    try:
        return ModelWeights(tensors)
    except InvalidInputError as exc:
        raise CorruptWeightsError("non-finite value in weight payload") from exc


def save_weights(weights: ModelWeights, path: str) -> int:
    """Write a weight file atomically; returns bytes written."""
    blob = serialize_weights(weights)
    atomic_write_bytes(path, blob)
    return len(blob)


def load_weights(path: str) -> ModelWeights:
    with open(path, "rb") as fh:
        return deserialize_weights(fh.read())
