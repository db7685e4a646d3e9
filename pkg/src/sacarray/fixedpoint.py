"""Scalar fixed-point rules shared by the simulator and the reference model.

Data words are unsigned 8-bit integers. Accumulators are 32-bit two's
complement words whose LSB is 2**-6 of a data LSB, so every product of a
data word with a power-of-two weight in [2**-6, 2**0] is an integer.
"""

import numpy as np

ACC_FRAC_BITS = 6
ACC_BITS = 32
DATA_BITS = 8
ACC_MIN = -(1 << (ACC_BITS - 1))
ACC_MAX = (1 << (ACC_BITS - 1)) - 1
DATA_MAX = (1 << DATA_BITS) - 1


class AccumulatorOverflow(ArithmeticError):
    """A 32-bit accumulator word left its representable range."""

    def __init__(self, message, row=None, position=None):
        super().__init__(message)
        self.row = row
        self.position = position


def fits_acc(value):
    return ACC_MIN <= value <= ACC_MAX


def relu_quantize(acc):
    """Map one accumulator word to an 8-bit data word.

    Negative values become 0; otherwise the word is shifted right by the
    fractional bits (floor) and clipped to 255.
    """
    acc = int(acc)
    if acc < 0:
        return 0
    return min(acc >> ACC_FRAC_BITS, DATA_MAX)


def relu_quantize_array(acc):
    acc = np.asarray(acc, dtype=np.int64)
    out = np.right_shift(np.maximum(acc, 0), ACC_FRAC_BITS)
    return np.minimum(out, DATA_MAX).astype(np.uint8)


def check_acc_array(acc, what="accumulator"):
    """Raise AccumulatorOverflow at the first out-of-range entry of a 2-D array."""
    acc = np.asarray(acc)
    bad = (acc < ACC_MIN) | (acc > ACC_MAX)
    if bad.any():
        idx = np.argwhere(bad)[0]
        row = int(idx[0])
        pos = int(idx[1]) if len(idx) > 1 else None
        raise AccumulatorOverflow(
            f"{what} overflow at row {row}, position {pos}: {int(acc[tuple(idx)])}",
            row=row,
            position=pos,
        )
