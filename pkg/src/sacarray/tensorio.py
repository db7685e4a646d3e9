"""Raw tensor files: three little-endian u32 dims (c, h, w) then u8 values row-major."""

import struct

import numpy as np

from .ir import QuantTensor

_DIMS = struct.Struct("<III")


class TensorFormatError(ValueError):
    pass


def tensor_to_bytes(t) -> bytes:
    v = t.values if isinstance(t, QuantTensor) else np.asarray(t, dtype=np.uint8)
    if v.ndim != 3:
        raise TensorFormatError(f"expected a 3-D tensor, got shape {v.shape}")
    return _DIMS.pack(*v.shape) + np.ascontiguousarray(v, dtype=np.uint8).tobytes()


def tensor_from_bytes(data: bytes) -> QuantTensor:
    if len(data) < _DIMS.size:
        raise TensorFormatError("truncated tensor header")
    c, h, w = _DIMS.unpack_from(data)
    n = c * h * w
    if len(data) != _DIMS.size + n:
        raise TensorFormatError(f"tensor header says {c}x{h}x{w} = {n} values, file holds {len(data) - _DIMS.size}")
    v = np.frombuffer(data, dtype=np.uint8, offset=_DIMS.size).reshape(c, h, w)
    return QuantTensor(v.copy())


def read_tensor(path) -> QuantTensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def write_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))
