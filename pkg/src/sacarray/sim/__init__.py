"""Software model of the bit-serial selector-accumulator systolic array."""

from .array import SacArray, load_cycles, matmul_cycles, word_level_matmul
from .bitserial import RegisterChain, bit_serial_matmul, chain_tap
from .engine import Executor, SimReport, output_accumulate, run_model, run_program

__all__ = [
    "Executor",
    "RegisterChain",
    "SacArray",
    "SimReport",
    "bit_serial_matmul",
    "chain_tap",
    "load_cycles",
    "matmul_cycles",
    "output_accumulate",
    "run_model",
    "run_program",
    "word_level_matmul",
]
