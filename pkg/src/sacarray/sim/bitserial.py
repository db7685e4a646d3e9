"""Cycle-level model of the bit-serial selector-accumulator array.

Data words enter each column LSB first through per-channel register chains.
A chain position ``p`` holds the bit that entered ``p`` cycles ago, so a
cell in row ``r`` reading position ``r + k`` sees its input delayed by ``k``
extra cycles, i.e. multiplied by ``2**k``. Partial sums travel rightwards
along each row as 32-bit two's-complement bit streams; each cell adds its
(optionally negated) selected stream with a one-bit full adder and a carry
flip-flop. Row ``r``, column ``c`` handles bit ``T - r - c`` at cycle ``T``,
which is the skew of the systolic wavefront.
"""

import numpy as np

from ..fixedpoint import ACC_BITS, DATA_BITS, AccumulatorOverflow
from ..packer import cell_fields

MAX_TAP = 6


class RegisterChain:
    """Shift-register chains for one or more bit streams.

    ``bits`` has shape ``(streams, length, ...)``; position 0 is the entry.
    """

    def __init__(self, streams, length, batch=()):
        self.bits = np.zeros((streams, length) + tuple(batch), dtype=np.uint8)

    def step(self, entering):
        self.bits[:, 1:] = self.bits[:, :-1]
        self.bits[:, 0] = entering

    def tap(self, stream, position):
        return self.bits[stream, position]


def chain_tap(value: int, k: int) -> int:
    """Multiply an 8-bit word by ``2**k`` by reading a register chain ``k`` stages in."""
    if not 0 <= k <= MAX_TAP:
        raise ValueError(f"tap offset {k} outside [0, {MAX_TAP}]")
    if not 0 <= value < 1 << DATA_BITS:
        raise ValueError(f"{value} is not an unsigned 8-bit word")
    chain = RegisterChain(1, MAX_TAP + 1)
    out = 0
    for t in range(DATA_BITS + MAX_TAP):
        bit = (value >> t) & 1 if t < DATA_BITS else 0
        chain.step(bit)
        out |= int(chain.tap(0, k)) << t
    return out


def bit_serial_matmul(cells, bias, x, group_size, zero_skip=True):
    """Run one tile bit-serially.

    ``cells`` is the ``(R, C)`` tile of cell bytes, ``bias`` the per-row
    injected partial sums, ``x`` the ``(C * g, N)`` data words. Returns the
    ``(R, N)`` accumulators and the ``(R, C, N)`` cell-enable mask.
    """
    cells = np.asarray(cells, dtype=np.uint8)
    R, C = cells.shape
    g = group_size
    x = np.asarray(x, dtype=np.uint8)
    N = x.shape[1]
    idx, sign, power = (a.astype(np.int64) for a in cell_fields(cells))
    nonzero = power > 0
    k = np.where(nonzero, power - 1, 0)

    xg = x.reshape(C, g, N)
    rr, cc = np.meshgrid(np.arange(R), np.arange(C), indexing="ij")
    selected = xg[cc, idx]  # (R, C, N) words feeding each cell's zero detector
    if zero_skip:
        enabled = nonzero[..., None] & (selected != 0)
    else:
        enabled = np.ones((R, C, N), dtype=bool)

    chain = RegisterChain(C * g, R + MAX_TAP + 1, (N,))
    chain_view = chain.bits.reshape(C, g, R + MAX_TAP + 1, N)
    tap_pos = rr + k
    sign_b = sign.astype(np.uint8)[..., None]
    keep = nonzero.astype(np.uint8)[..., None]
    bias_u = np.asarray(bias, dtype=np.int64) & ((1 << ACC_BITS) - 1)

    link = np.zeros((R, C, N), dtype=np.uint8)  # partial-sum bit entering each cell
    carry = np.zeros((R, C, N), dtype=np.uint8)
    overflow = np.zeros((R, C, N), dtype=bool)
    result = np.zeros((R, N), dtype=np.int64)
    col_entry = np.arange(C)
    rows = np.arange(R)

    for T in range(ACC_BITS + R + C - 1):
        b_in = T - col_entry
        entering = np.zeros((C, g, N), dtype=np.uint8)
        live = (b_in >= 0) & (b_in < DATA_BITS)
        if live.any():
            sh = b_in[live][:, None, None]
            entering[live] = (xg[live] >> sh) & 1
        chain.step(entering.reshape(C * g, N))

        b_bias = T - rows
        bias_bits = np.where(
            (b_bias >= 0) & (b_bias < ACC_BITS), (bias_u >> np.clip(b_bias, 0, ACC_BITS - 1)) & 1, 0
        )
        link[:, 0] = bias_bits[:, None]

        b_cell = T - rr - cc
        p = (chain_view[cc, idx, tap_pos] & keep) ^ sign_b
        carry = np.where((b_cell == 0)[..., None], sign_b, carry)
        y = link
        s = y ^ p ^ carry
        cout = (y & p) | (y & carry) | (p & carry)
        msb = (b_cell == ACC_BITS - 1)[..., None]
        overflow |= msb & enabled & (carry != cout)
        out = np.where(enabled, s, y)
        carry = np.where(enabled, cout, carry)

        b_out = T - rows - (C - 1)
        ready = (b_out >= 0) & (b_out < ACC_BITS)
        if ready.any():
            result[ready] |= out[ready, C - 1].astype(np.int64) << b_out[ready][:, None]
        link = np.empty_like(link)
        link[:, 1:] = out[:, :-1]

    bad = overflow.any(axis=1)
    if bad.any():
        r, n = np.argwhere(bad)[0]
        raise AccumulatorOverflow(
            f"accumulator overflow at row {r}, position {n}", row=int(r), position=int(n)
        )
    result = np.where(result >= 1 << (ACC_BITS - 1), result - (1 << ACC_BITS), result)
    return result, enabled
