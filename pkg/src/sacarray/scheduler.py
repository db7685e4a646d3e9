"""Tiling of packed layers onto a fixed array and the instruction stream.

Each tile becomes a pair of instructions: LoadWeights (with its cell payload)
then MatMul. Tiles are visited vertical-outer, horizontal-inner; horizontal
tiles of one filter range accumulate partial sums, vertical tiles
concatenate their output rows.

Instruction word (64 bits, little endian on disk)::

    bit 0       load-weights flag
    bit 1       matrix-multiply flag
    bits 15..8  tile width (array columns used)
    bits 23..16 tile height (array rows used)
    bits 39..24 input width
    bits 55..40 input height
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ir
from .packer import HEADER, MalformedCellError, PackedLayer, combine_columns

LOAD_FLAG = 1 << 0
MATMUL_FLAG = 1 << 1
WIDTH_SHIFT, HEIGHT_SHIFT = 8, 16
IN_W_SHIFT, IN_H_SHIFT = 24, 40
TILE_FIELD_MAX = 0xFF
INPUT_FIELD_MAX = 0xFFFF
_KNOWN_BITS = (
    LOAD_FLAG
    | MATMUL_FLAG
    | (TILE_FIELD_MAX << WIDTH_SHIFT)
    | (TILE_FIELD_MAX << HEIGHT_SHIFT)
    | (INPUT_FIELD_MAX << IN_W_SHIFT)
    | (INPUT_FIELD_MAX << IN_H_SHIFT)
)

WORD = struct.Struct("<Q")

# Flag bits stored in the first reserved header byte of a tile payload.
F_SHIFT = 1 << 0
F_FC = 1 << 1
F_LAYER_FIRST = 1 << 2
F_RANGE_FIRST = 1 << 3
F_RANGE_LAST = 1 << 4
F_LAYER_LAST = 1 << 5

NO_SHIFT_CODE = 4  # (0, 0) in row-major offset order


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 128
    cols: int = 64
    max_group: int = 8

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array dimensions must be >= 1")
        if self.rows > TILE_FIELD_MAX or self.cols > TILE_FIELD_MAX:
            raise ValueError(f"array dimensions must be <= {TILE_FIELD_MAX}")

    @classmethod
    def parse(cls, text: str) -> "ArrayConfig":
        m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
        if not m:
            raise ValueError(f"array size must look like RxC, got {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    def __str__(self):
        return f"{self.rows}x{self.cols}"


def _split(total: int, size: int) -> List[Tuple[int, int]]:
    return [(a, min(a + size, total)) for a in range(0, total, size)]


@dataclass(frozen=True)
class TilePlan:
    """Filter ranges (vertical tiles) and packed-column ranges (horizontal tiles)."""

    vertical: Tuple[Tuple[int, int], ...]
    horizontal: Tuple[Tuple[int, int], ...]

    @property
    def count(self) -> int:
        return len(self.vertical) * len(self.horizontal)

    def tiles(self):
        for v in self.vertical:
            for h in self.horizontal:
                yield v, h


def plan_tiles(packed: PackedLayer, cfg: ArrayConfig) -> TilePlan:
    if packed.group_size > cfg.max_group:
        raise ValueError(f"group size {packed.group_size} exceeds array limit {cfg.max_group}")
    return TilePlan(tuple(_split(packed.rows, cfg.rows)), tuple(_split(packed.cols, cfg.cols)))


@dataclass(eq=False)
class TilePayload:
    """Everything a LoadWeights carries: cells, bias and channel-shifter settings."""

    tile: PackedLayer
    flags: int = 0
    stride: int = 1
    shift_codes: Optional[np.ndarray] = None

    def __post_init__(self):
        span = self.tile.cols * self.tile.group_size
        if self.shift_codes is None:
            self.shift_codes = np.full(span, NO_SHIFT_CODE, dtype=np.uint8)
        self.shift_codes = np.asarray(self.shift_codes, dtype=np.uint8)
        if self.shift_codes.shape != (span,):
            raise EncodingError(f"expected {span} shift codes, got {self.shift_codes.shape}")
        if (self.shift_codes > 8).any():
            raise EncodingError("shift codes must lie in 0..8")

    def shift_dirs(self):
        return [ir.SHIFT_OFFSETS[c] for c in self.shift_codes]

    @staticmethod
    def byte_size(rows: int, cols: int, g: int) -> int:
        n = PackedLayer.byte_size(rows, cols) + cols * g
        return -(-n // WORD.size) * WORD.size

    def to_bytes(self) -> bytes:
        t = self.tile
        body = t.to_bytes(bytes([self.flags, self.stride, 0])) + self.shift_codes.tobytes()
        pad = self.byte_size(t.rows, t.cols, t.group_size) - len(body)
        return body + b"\0" * pad

    @classmethod
    def from_bytes(cls, data: bytes) -> "TilePayload":
        tile, reserved = PackedLayer.from_bytes(data)
        off = PackedLayer.byte_size(tile.rows, tile.cols)
        span = tile.cols * tile.group_size
        if len(data) < off + span:
            raise MalformedCellError("truncated shift-direction section")
        codes = np.frombuffer(data, dtype=np.uint8, count=span, offset=off)
        flags, stride = reserved[0], reserved[1]
        if stride not in ir.STRIDES:
            raise EncodingError(f"invalid stride {stride} in tile payload")
        return cls(tile, flags, stride, codes.copy())


@dataclass(eq=False)
class LoadWeights:
    tile_rows: int
    tile_cols: int
    payload: Optional[TilePayload] = field(default=None, repr=False)

    def __eq__(self, other):
        return (
            isinstance(other, LoadWeights)
            and (self.tile_rows, self.tile_cols) == (other.tile_rows, other.tile_cols)
        )


@dataclass(frozen=True)
class MatMul:
    input_h: int
    input_w: int


Instruction = object  # LoadWeights | MatMul


def encode_instruction(instr) -> int:
    if isinstance(instr, LoadWeights):
        if not (0 <= instr.tile_rows <= TILE_FIELD_MAX and 0 <= instr.tile_cols <= TILE_FIELD_MAX):
            raise EncodingError(f"tile {instr.tile_rows}x{instr.tile_cols} overflows 8-bit fields")
        return LOAD_FLAG | (instr.tile_cols << WIDTH_SHIFT) | (instr.tile_rows << HEIGHT_SHIFT)
    if isinstance(instr, MatMul):
        if not (0 <= instr.input_h <= INPUT_FIELD_MAX and 0 <= instr.input_w <= INPUT_FIELD_MAX):
            raise EncodingError(f"input {instr.input_h}x{instr.input_w} overflows 16-bit fields")
        return MATMUL_FLAG | (instr.input_w << IN_W_SHIFT) | (instr.input_h << IN_H_SHIFT)
    raise TypeError(f"not an instruction: {instr!r}")


def decode_instruction(word: int):
    if word & ~_KNOWN_BITS:
        raise EncodingError(f"reserved bits set in instruction 0x{word:016x}")
    kind = word & (LOAD_FLAG | MATMUL_FLAG)
    if kind == LOAD_FLAG:
        if word >> IN_W_SHIFT:
            raise EncodingError("load-weights word carries input dimensions")
        return LoadWeights((word >> HEIGHT_SHIFT) & TILE_FIELD_MAX, (word >> WIDTH_SHIFT) & TILE_FIELD_MAX)
    if kind == MATMUL_FLAG:
        if (word >> WIDTH_SHIFT) & 0xFFFF:
            raise EncodingError("matrix-multiply word carries tile dimensions")
        return MatMul((word >> IN_H_SHIFT) & INPUT_FIELD_MAX, (word >> IN_W_SHIFT) & INPUT_FIELD_MAX)
    raise EncodingError(f"instruction 0x{word:016x} must set exactly one kind bit")


def _shift_codes(layer: ir.LayerSpec, c0: int, c1: int) -> np.ndarray:
    codes = np.full(c1 - c0, NO_SHIFT_CODE, dtype=np.uint8)
    if layer.has_shift:
        for k, ch in enumerate(range(c0, min(c1, layer.c))):
            codes[k] = ir.SHIFT_OFFSETS.index(layer.shift_dirs[ch])
    return codes


def emit_instructions(plans: Sequence[TilePlan], manifest: ir.ModelManifest, packed=None) -> list:
    """Expand per-layer tile plans (conv layers then classifier) into instruction pairs.

    ``packed`` supplies the PackedLayer for each plan; without it the
    LoadWeights carry geometry only.
    """
    specs = manifest.all_layers()
    if len(plans) != len(specs):
        raise ValueError(f"expected {len(specs)} tile plans, got {len(plans)}")
    dims = manifest.layer_input_dims()
    out = []
    for li, (plan, spec, (h, w)) in enumerate(zip(plans, specs, dims)):
        is_fc = li == len(specs) - 1
        n_h = len(plan.horizontal)
        tiles = list(plan.tiles())
        for ti, ((r0, r1), (c0, c1)) in enumerate(tiles):
            hi = ti % n_h
            payload = None
            if packed is not None:
                p = packed[li]
                flags = (F_SHIFT if spec.has_shift else 0) | (F_FC if is_fc else 0)
                flags |= F_LAYER_FIRST if ti == 0 else 0
                flags |= F_RANGE_FIRST if hi == 0 else 0
                flags |= F_RANGE_LAST if hi == n_h - 1 else 0
                flags |= F_LAYER_LAST if ti == len(tiles) - 1 else 0
                g = p.group_size
                tile = p.slice(slice(r0, r1), slice(c0, c1), keep_bias=hi == 0)
                payload = TilePayload(tile, flags, spec.s, _shift_codes(spec, c0 * g, c1 * g))
            out.append(LoadWeights(r1 - r0, c1 - c0, payload))
            out.append(MatMul(h, w))
    return out


def instruction_count(plans: Sequence[TilePlan]) -> int:
    return 2 * sum(p.count for p in plans)


# ---------------------------------------------------------------------------
# Whole-model compilation and the stream file
# ---------------------------------------------------------------------------


def prepare_layer(layer: ir.LayerSpec, lsb_exp: int = 0) -> ir.LayerSpec:
    """Quantize batch norm if needed and fold its scale into the weights."""
    if isinstance(layer.bn, ir.BnParams):
        layer = replace(layer, bn=ir.quantize_bn(layer.bn, lsb_exp))
    if layer.bn is None:
        return layer
    return ir.fold_bn_into_weights(layer)


@dataclass(eq=False)
class CompiledModel:
    manifest: ir.ModelManifest
    config: ArrayConfig
    packed: List[PackedLayer]
    plans: List[TilePlan]
    instructions: list

    @property
    def dropped(self) -> List[int]:
        return [p.dropped for p in self.packed]

    def to_bytes(self) -> bytes:
        return write_stream(self.instructions)


def pack_manifest(manifest: ir.ModelManifest) -> List[PackedLayer]:
    return [combine_columns(prepare_layer(l, manifest.lsb_exp)) for l in manifest.all_layers()]


def compile_model(manifest: ir.ModelManifest, cfg: ArrayConfig) -> CompiledModel:
    packed = pack_manifest(manifest)
    plans = [plan_tiles(p, cfg) for p in packed]
    instrs = emit_instructions(plans, manifest, packed)
    return CompiledModel(manifest, cfg, packed, plans, instrs)


def write_stream(instructions) -> bytes:
    chunks = []
    for instr in instructions:
        chunks.append(WORD.pack(encode_instruction(instr)))
        if isinstance(instr, LoadWeights):
            if instr.payload is None:
                raise EncodingError("load-weights instruction without a payload")
            t = instr.payload.tile
            if (t.rows, t.cols) != (instr.tile_rows, instr.tile_cols):
                raise EncodingError("payload geometry disagrees with its instruction")
            chunks.append(instr.payload.to_bytes())
    return b"".join(chunks)


def read_stream(data: bytes) -> list:
    """Parse a stream file back into instructions with payloads attached."""
    out = []
    off = 0
    expect_matmul = False
    while off < len(data):
        if len(data) - off < WORD.size:
            raise EncodingError(f"truncated instruction word at byte {off}")
        instr = decode_instruction(WORD.unpack_from(data, off)[0])
        off += WORD.size
        if isinstance(instr, LoadWeights):
            if expect_matmul:
                raise EncodingError(f"load-weights at byte {off - 8} without a preceding matmul")
            if len(data) - off < HEADER.size:
                raise EncodingError("truncated tile payload")
            rows, cols, g, _ = HEADER.unpack_from(data, off)
            size = TilePayload.byte_size(rows, cols, g)
            payload = TilePayload.from_bytes(data[off : off + size])
            if (rows, cols) != (instr.tile_rows, instr.tile_cols):
                raise EncodingError(f"payload {rows}x{cols} disagrees with instruction at byte {off - 8}")
            instr.payload = payload
            off += size
            expect_matmul = True
        else:
            if not expect_matmul:
                raise EncodingError(f"matmul at byte {off - 8} without loaded weights")
            expect_matmul = False
        out.append(instr)
    if expect_matmul:
        raise EncodingError("stream ends after a load-weights instruction")
    return out
