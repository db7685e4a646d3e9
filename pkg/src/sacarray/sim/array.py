"""The SAC systolic array: weight state, matmul execution and counters."""

from dataclasses import dataclass

import numpy as np

from ..fixedpoint import ACC_MAX, ACC_MIN, AccumulatorOverflow, DATA_BITS
from ..packer import PackedLayer, cell_fields, validate_cells
from ..scheduler import ArrayConfig
from .bitserial import bit_serial_matmul

FIDELITIES = ("bit", "word")
# Elements per (rows, cols, vectors) block in the word-level path.
_BLOCK = 1 << 20
_NO_OVERFLOW = (1 << 62, 1 << 62)


class PayloadMismatch(ValueError):
    pass


@dataclass
class Counters:
    cycles: int = 0
    cell_cycles_total: int = 0
    cell_cycles_active: int = 0
    matmuls: int = 0
    loads: int = 0


def matmul_cycles(n_vectors: int, tile_rows: int, tile_cols: int) -> int:
    """Pipeline fill and drain of the skewed array plus one word per input vector."""
    return n_vectors + tile_rows + tile_cols + DATA_BITS - 2


def load_cycles(tile_rows: int) -> int:
    return tile_rows


def word_level_matmul(cells, bias, x, group_size, zero_skip=True):
    """Functional path: gather, shift and add whole words.

    Returns the accumulators and the number of active cell-cycles.
    """
    cells = np.asarray(cells, dtype=np.uint8)
    R, C = cells.shape
    x = np.asarray(x, dtype=np.uint8)
    N = x.shape[1]
    idx, sign, power = (a.astype(np.int64) for a in cell_fields(cells))
    nonzero = power > 0
    k = np.where(nonzero, power - 1, 0)
    neg = np.where(sign == 1, -1, 1) * nonzero
    chan = np.arange(C)[None, :] * group_size + idx
    bias = np.asarray(bias, dtype=np.int64)
    out = np.empty((R, N), dtype=np.int64)
    active = 0
    first = _NO_OVERFLOW
    step = max(1, _BLOCK // max(R * C, 1))
    for n0 in range(0, N, step):
        sel = x[chan, n0 : n0 + step].astype(np.int64)  # (R, C, n)
        terms = (sel << k[..., None]) * neg[..., None]
        if zero_skip:
            active += int(np.count_nonzero(nonzero[..., None] & (sel != 0)))
        acc = bias[:, None] + terms.sum(axis=1)
        bound = np.abs(bias)[:, None] + np.abs(terms).sum(axis=1)
        if (bound > ACC_MAX).any():
            prefix = bias[:, None, None] + np.cumsum(terms, axis=1)
            bad = ((prefix < ACC_MIN) | (prefix > ACC_MAX)).any(axis=1)
            for r, n in np.argwhere(bad):
                first = min(first, (int(r), int(n0 + n)))
        out[:, n0 : n0 + step] = acc
    if first != _NO_OVERFLOW:
        r, n = first
        raise AccumulatorOverflow(f"accumulator overflow at row {r}, position {n}", row=r, position=n)
    if not zero_skip:
        active = R * C * N
    return out, active


class SacArray:
    """A rows x cols array of selector-accumulator cells.

    Holds the currently loaded tile and accumulates cycle and activity
    counters across load and matmul operations.
    """

    def __init__(self, cfg: ArrayConfig = ArrayConfig(), fidelity="word", zero_skip=True):
        if fidelity not in FIDELITIES:
            raise ValueError(f"fidelity must be one of {FIDELITIES}")
        self.cfg = cfg
        self.fidelity = fidelity
        self.zero_skip = zero_skip
        self.cells = np.zeros((cfg.rows, cfg.cols), dtype=np.uint8)
        self.bias = np.zeros(cfg.rows, dtype=np.int64)
        self.group_size = 1
        self.tile_rows = 0
        self.tile_cols = 0
        self.counters = Counters()
        self.last_activity = (0, 0)

    def load_weights(self, tile: PackedLayer, tile_rows=None, tile_cols=None):
        """Configure the cells from a packed tile; cells outside it become zero."""
        if tile_rows is not None and (tile_rows, tile_cols) != (tile.rows, tile.cols):
            raise PayloadMismatch(
                f"payload is {tile.rows}x{tile.cols} but instruction says {tile_rows}x{tile_cols}"
            )
        if tile.rows > self.cfg.rows or tile.cols > self.cfg.cols:
            raise PayloadMismatch(f"tile {tile.rows}x{tile.cols} exceeds array {self.cfg}")
        if tile.group_size > self.cfg.max_group:
            raise PayloadMismatch(f"group size {tile.group_size} exceeds {self.cfg.max_group}")
        validate_cells(tile.cells, tile.group_size)
        self.cells[:] = 0
        self.bias[:] = 0
        self.cells[: tile.rows, : tile.cols] = tile.cells
        self.bias[: tile.rows] = tile.bias_fx
        self.group_size = tile.group_size
        self.tile_rows, self.tile_cols = tile.rows, tile.cols
        self.counters.cycles += load_cycles(tile.rows)
        self.counters.loads += 1
        return self

    def cell_codes(self) -> np.ndarray:
        return self.cells.copy()

    def tile_cells(self) -> np.ndarray:
        return self.cells[: self.tile_rows, : self.tile_cols].copy()

    @property
    def span(self) -> int:
        return self.tile_cols * self.group_size

    def run_matmul(self, x) -> np.ndarray:
        """Multiply the loaded tile by ``x`` of shape ``(tile_cols * g, N)``."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[0] != self.span:
            raise ValueError(f"expected input of shape ({self.span}, N), got {x.shape}")
        if x.dtype != np.uint8:
            if x.size and (x.min() < 0 or x.max() > 255):
                raise ValueError("input words must lie in [0, 255]")
            x = x.astype(np.uint8)
        R, C = self.tile_rows, self.tile_cols
        N = x.shape[1]
        cells = self.cells[:R, :C]
        bias = self.bias[:R]
        if self.fidelity == "bit":
            acc, enabled = bit_serial_matmul(cells, bias, x, self.group_size, self.zero_skip)
            active = int(np.count_nonzero(enabled))
        else:
            acc, active = word_level_matmul(cells, bias, x, self.group_size, self.zero_skip)
        total = R * C * N
        self.counters.cycles += matmul_cycles(N, R, C)
        self.counters.cell_cycles_total += total
        self.counters.cell_cycles_active += active
        self.counters.matmuls += 1
        self.last_activity = (active, total)
        return acc

    def zero_skip_account(self):
        """(active, total) cell-cycles of the most recent matmul."""
        return self.last_activity
