"""Deploy-time column combining and the 8-bit systolic cell encoding.

Cell byte layout (MSB first)::

    7 6 5 | 4    | 3 2 1 0
    index | sign | power

``index`` is the channel offset of the kept weight inside its group,
``sign`` is 1 for negative weights and ``power`` is 0 for a zero weight or
``exponent + 7`` otherwise (so 2**-6 -> 0001 and 2**0 -> 0111).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .ir import MAX_EXP, LayerSpec, PowTwoWeight

INDEX_SHIFT = 5
SIGN_BIT = 1 << 4
POWER_MASK = 0x0F
POWER_OFFSET = 7
MAX_POWER_CODE = MAX_EXP + POWER_OFFSET
ZERO_CELL = 0

HEADER = struct.Struct("<HHB3s")


class MalformedCellError(ValueError):
    pass


def encode_cell(index: int, w: PowTwoWeight, group_size: int = 8) -> int:
    if not 0 <= index < min(group_size, 8):
        raise ValueError(f"cell index {index} outside group of {group_size}")
    if w.is_zero:
        return ZERO_CELL
    sign = SIGN_BIT if w.sign < 0 else 0
    return (index << INDEX_SHIFT) | sign | (w.exponent + POWER_OFFSET)


def decode_cell(code: int) -> Tuple[int, PowTwoWeight]:
    if not 0 <= code <= 0xFF:
        raise MalformedCellError(f"cell code {code} is not a byte")
    power = code & POWER_MASK
    if power > MAX_POWER_CODE:
        raise MalformedCellError(f"reserved power code {power:04b} in cell 0x{code:02x}")
    if power == 0:
        if code != ZERO_CELL:
            raise MalformedCellError(f"non-canonical zero cell 0x{code:02x}")
        return 0, PowTwoWeight.zero()
    sign = -1 if code & SIGN_BIT else 1
    return code >> INDEX_SHIFT, PowTwoWeight(sign, power - POWER_OFFSET)


def cell_fields(cells: np.ndarray):
    """Split a cell array into (index, sign, power) arrays."""
    cells = np.asarray(cells, dtype=np.uint8)
    return cells >> INDEX_SHIFT, (cells & SIGN_BIT) >> 4, cells & POWER_MASK


def validate_cells(cells: np.ndarray, group_size: int) -> None:
    idx, sign, power = cell_fields(cells)
    bad = power > MAX_POWER_CODE
    bad |= (power == 0) & (np.asarray(cells) != ZERO_CELL)
    bad |= idx >= group_size
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise MalformedCellError(f"malformed cell 0x{int(cells[r, c]):02x} at ({r}, {c})")


@dataclass(frozen=True, eq=False)
class PackedLayer:
    """A layer after column combining: ``rows x cols`` cell bytes plus per-row bias."""

    rows: int
    cols: int
    group_size: int
    cells: np.ndarray
    bias_fx: np.ndarray
    provenance: np.ndarray = None
    channels: int = None
    dropped: int = 0

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.uint8)
        if cells.shape != (self.rows, self.cols):
            raise ValueError(f"cells must be {self.rows}x{self.cols}, got {cells.shape}")
        bias = np.array(self.bias_fx, dtype=np.int64)
        if bias.shape != (self.rows,):
            raise ValueError(f"bias must have length {self.rows}")
        cells.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "bias_fx", bias)
        if self.channels is None:
            object.__setattr__(self, "channels", self.cols * self.group_size)
        if self.provenance is None:
            prov = self._derived_provenance()
            object.__setattr__(self, "provenance", prov)

    def _derived_provenance(self):
        idx, _, power = cell_fields(self.cells)
        col = np.arange(self.cols)[None, :] * self.group_size
        return np.where(power > 0, col + idx, -1)

    def __eq__(self, other):
        if not isinstance(other, PackedLayer):
            return NotImplemented
        return (
            self.group_size == other.group_size
            and np.array_equal(self.cells, other.cells)
            and np.array_equal(self.bias_fx, other.bias_fx)
        )

    def decode(self, row: int, col: int) -> Tuple[int, PowTwoWeight]:
        return decode_cell(int(self.cells[row, col]))

    def unpack(self) -> Tuple[np.ndarray, np.ndarray]:
        """Expand back to sparse ``(signs, exps)`` matrices of width ``channels``."""
        validate_cells(self.cells, self.group_size)
        idx, sign, power = cell_fields(self.cells)
        width = self.cols * self.group_size
        signs = np.zeros((self.rows, width), dtype=np.int8)
        exps = np.zeros((self.rows, width), dtype=np.int8)
        r, c = np.nonzero(power)
        ch = c * self.group_size + idx[r, c]
        signs[r, ch] = np.where(sign[r, c] == 1, -1, 1)
        exps[r, ch] = power[r, c].astype(np.int8) - POWER_OFFSET
        return signs[:, : self.channels], exps[:, : self.channels]

    def slice(self, rows: slice, cols: slice, keep_bias: bool = True) -> "PackedLayer":
        cells = self.cells[rows, cols]
        bias = self.bias_fx[rows] if keep_bias else np.zeros(cells.shape[0], dtype=np.int64)
        return PackedLayer(cells.shape[0], cells.shape[1], self.group_size, cells, bias)

    def to_bytes(self, reserved: bytes = b"\0\0\0") -> bytes:
        if not (self.rows < 1 << 16 and self.cols < 1 << 16):
            raise ValueError("packed layer too large for the u16 header")
        if ((self.bias_fx < -(1 << 31)) | (self.bias_fx >= 1 << 31)).any():
            raise ValueError("bias does not fit in 32 bits")
        head = HEADER.pack(self.rows, self.cols, self.group_size, reserved)
        return head + self.cells.tobytes() + self.bias_fx.astype("<i4").tobytes()

    @staticmethod
    def byte_size(rows: int, cols: int) -> int:
        return HEADER.size + rows * cols + 4 * rows

    @classmethod
    def from_bytes(cls, data: bytes) -> Tuple["PackedLayer", bytes]:
        """Parse one packed layer; returns it with the header's reserved bytes."""
        if len(data) < HEADER.size:
            raise MalformedCellError("truncated packed-layer header")
        rows, cols, g, reserved = HEADER.unpack_from(data)
        need = cls.byte_size(rows, cols)
        if len(data) < need:
            raise MalformedCellError(f"packed layer needs {need} bytes, got {len(data)}")
        if g not in (1, 2, 4, 8):
            raise MalformedCellError(f"invalid group size {g}")
        off = HEADER.size
        cells = np.frombuffer(data, dtype=np.uint8, count=rows * cols, offset=off).reshape(rows, cols)
        validate_cells(cells, g)
        bias = np.frombuffer(data, dtype="<i4", count=rows, offset=off + rows * cols)
        return cls(rows, cols, g, cells, bias.astype(np.int64)), reserved


def combine_columns(layer: LayerSpec) -> PackedLayer:
    """Pack a layer by keeping, per row and channel group, the largest-magnitude weight.

    Ties go to the lowest channel index. Channels are zero-padded up to a
    multiple of the group size.
    """
    g = layer.g
    cols = -(-layer.c // g)
    width = cols * g
    signs = np.zeros((layer.f, width), dtype=np.int8)
    exps = np.zeros((layer.f, width), dtype=np.int8)
    signs[:, : layer.c] = layer.signs
    exps[:, : layer.c] = layer.exps
    # power code doubles as a magnitude rank: 0 for zero, larger for bigger weights
    power = np.where(signs != 0, exps.astype(np.int16) + POWER_OFFSET, 0)
    grouped = power.reshape(layer.f, cols, g)
    idx = grouped.argmax(axis=2)
    rows_i = np.arange(layer.f)[:, None]
    cols_i = np.arange(cols)[None, :]
    ch = cols_i * g + idx
    kept_power = grouped[rows_i, cols_i, idx]
    kept_sign = signs[rows_i, ch]
    nz = kept_power > 0
    cells = np.where(
        nz,
        (idx << INDEX_SHIFT) | np.where(kept_sign < 0, SIGN_BIT, 0) | kept_power,
        ZERO_CELL,
    ).astype(np.uint8)
    prov = np.where(nz, ch, -1)
    dropped = layer.nonzeros - int(nz.sum())
    aff = layer.folded()
    if aff.scale_exp.any():
        raise ValueError("batch-norm scale must be folded into the weights before packing")
    bias = aff.bias_fx
    return PackedLayer(layer.f, cols, g, cells, bias, prov, layer.c, dropped)


def pack_model_bytes(packed_layers) -> bytes:
    """Concatenate packed-layer binaries in model order."""
    return b"".join(p.to_bytes() for p in packed_layers)


def read_packed_model(data: bytes):
    layers = []
    off = 0
    while off < len(data):
        layer, _ = PackedLayer.from_bytes(data[off:])
        layers.append(layer)
        off += PackedLayer.byte_size(layer.rows, layer.cols)
    return layers

