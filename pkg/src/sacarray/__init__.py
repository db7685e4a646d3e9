"""Compiler and bit-serial systolic-array simulator for sparse power-of-two CNNs."""

from .ir import (
    BnParams,
    FoldedAffine,
    LayerSpec,
    ModelManifest,
    PowTwoWeight,
    QuantTensor,
    channel_shift,
    dump_manifest,
    fold_bn_into_weights,
    load_manifest,
    log_quantize,
    quantize_bn,
    reshape_input,
)
from .packer import PackedLayer, combine_columns, decode_cell, encode_cell
from .scheduler import (
    ArrayConfig,
    LoadWeights,
    MatMul,
    TilePlan,
    compile_model,
    decode_instruction,
    emit_instructions,
    encode_instruction,
    plan_tiles,
)
from .sim import SacArray, SimReport, chain_tap, run_model

__version__ = "0.1.0"

__all__ = [
    "ArrayConfig",
    "BnParams",
    "FoldedAffine",
    "LayerSpec",
    "LoadWeights",
    "MatMul",
    "ModelManifest",
    "PackedLayer",
    "PowTwoWeight",
    "QuantTensor",
    "SacArray",
    "SimReport",
    "TilePlan",
    "chain_tap",
    "channel_shift",
    "combine_columns",
    "compile_model",
    "decode_cell",
    "decode_instruction",
    "dump_manifest",
    "emit_instructions",
    "encode_cell",
    "encode_instruction",
    "fold_bn_into_weights",
    "load_manifest",
    "log_quantize",
    "plan_tiles",
    "quantize_bn",
    "reshape_input",
    "run_model",
]
