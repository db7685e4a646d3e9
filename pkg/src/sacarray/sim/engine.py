"""Executes instruction streams against a SacArray and produces SimReports."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .. import ir
from ..fixedpoint import ACC_MAX, ACC_MIN, AccumulatorOverflow, check_acc_array, relu_quantize_array
from ..scheduler import (
    F_FC,
    F_LAYER_FIRST,
    F_LAYER_LAST,
    F_RANGE_FIRST,
    F_RANGE_LAST,
    F_SHIFT,
    ArrayConfig,
    EncodingError,
    LoadWeights,
    MatMul,
    compile_model,
)
from .array import SacArray


@dataclass
class SimReport:
    logits: List[int]
    cycles: int
    cell_cycles_total: int
    cell_cycles_active: int
    energy_proxy: float
    latency_ms: float
    clock_mhz: float
    # logits are sums over this many spatial positions (no 1/R averaging)
    logit_scale: int = 1
    array: str = ""
    fidelity: str = "word"
    zero_skip: bool = True
    trace: Optional[list] = field(default=None, repr=False, compare=False)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("trace")
        d["prediction"] = self.prediction
        return d


def output_accumulate(fc_outputs) -> np.ndarray:
    """Sum per-position classifier outputs ``(classes, R)`` into logits.

    The 1/R of average pooling is left out; it does not change the argmax.
    """
    fc_outputs = np.asarray(fc_outputs, dtype=np.int64)
    if fc_outputs.ndim == 1:
        fc_outputs = fc_outputs[:, None]
    running = np.cumsum(fc_outputs, axis=1)
    bad = (running < ACC_MIN) | (running > ACC_MAX)
    if bad.any():
        r, n = np.argwhere(bad)[0]
        raise AccumulatorOverflow(
            f"output accumulator overflow for class {r} after position {n}", row=int(r), position=int(n)
        )
    return running[:, -1].copy()


def _pairs(instructions):
    if len(instructions) % 2:
        raise EncodingError("instruction stream must hold load/matmul pairs")
    for i in range(0, len(instructions), 2):
        lw, mm = instructions[i], instructions[i + 1]
        if not isinstance(lw, LoadWeights) or not isinstance(mm, MatMul):
            raise EncodingError(f"instruction {i} is not a load-weights/matmul pair")
        if lw.payload is None:
            raise EncodingError(f"load-weights instruction {i} has no payload")
        yield i, lw, mm


def prepare_image(image, instructions) -> np.ndarray:
    """Apply input reshaping when the raw image is larger than the first matmul expects."""
    v = image.values if isinstance(image, ir.QuantTensor) else np.asarray(image, dtype=np.uint8)
    if v.ndim != 3:
        raise ValueError(f"image must be (channels, height, width), got {v.shape}")
    first = next((i for i in instructions if isinstance(i, MatMul)), None)
    if first is None:
        raise EncodingError("instruction stream holds no matmul")
    _, h, w = v.shape
    if (h, w) == (first.input_h, first.input_w):
        return v
    if first.input_h and h % first.input_h == 0:
        r = h // first.input_h
        if r in ir.RESHAPE_FACTORS and w == r * first.input_w:
            return ir.reshape_input(v, r).values
    raise ValueError(f"image {v.shape} does not fit first layer input {first.input_h}x{first.input_w}")


class Executor:
    """Runs load/matmul pairs, keeping the data buffer between layers."""

    def __init__(self, cfg: ArrayConfig, fidelity="word", zero_skip=True, keep_trace=False):
        self.array = SacArray(cfg, fidelity, zero_skip)
        self.keep_trace = keep_trace
        self.trace = []
        self.positions = 1

    def run(self, instructions, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data, dtype=np.uint8)
        logits = None
        blocks: List[np.ndarray] = []
        psum = None
        col = 0
        for i, lw, mm in _pairs(instructions):
            if logits is not None:
                raise EncodingError(f"instruction {i} follows the classifier")
            p = lw.payload
            tile = p.tile
            self.array.load_weights(tile, lw.tile_rows, lw.tile_cols)
            if p.flags & F_LAYER_FIRST:
                blocks = []
            if p.flags & F_RANGE_FIRST:
                col, psum = 0, None
            if (mm.input_h, mm.input_w) != data.shape[1:]:
                raise EncodingError(
                    f"matmul {i + 1} expects {mm.input_h}x{mm.input_w} input, buffer holds {data.shape[1:]}"
                )
            g = tile.group_size
            c0, c1 = col * g, (col + tile.cols) * g
            x = np.zeros((c1 - c0,) + data.shape[1:], dtype=np.uint8)
            have = max(0, min(c1, data.shape[0]) - c0)
            x[:have] = data[c0 : c0 + have]
            if p.flags & F_SHIFT:
                x = ir.channel_shift(x, p.shift_dirs()).values
            x = x[:, :: p.stride, :: p.stride]
            out_hw = x.shape[1:]
            acc = self.array.run_matmul(x.reshape(x.shape[0], -1))
            if psum is None:
                psum = acc
            else:
                psum = psum + acc
                check_acc_array(psum, "partial-sum")
            col += tile.cols
            if p.flags & F_RANGE_LAST:
                blocks.append(psum)
            if p.flags & F_LAYER_LAST:
                out = np.concatenate(blocks, axis=0)
                if p.flags & F_FC:
                    self.positions = out.shape[1]
                    logits = output_accumulate(out)
                    if self.keep_trace:
                        self.trace.append(out)
                else:
                    data = relu_quantize_array(out).reshape((out.shape[0],) + out_hw)
                    if self.keep_trace:
                        self.trace.append(data)
        if logits is None:
            raise EncodingError("instruction stream ends without a classifier layer")
        return logits


def _execute(instructions, data, cfg, clock_mhz, fidelity, zero_skip, trace) -> SimReport:
    ex = Executor(cfg, fidelity, zero_skip, keep_trace=trace)
    logits = ex.run(instructions, data)
    c = ex.array.counters
    latency = c.cycles / (clock_mhz * 1e3)
    if not math.isfinite(latency):
        raise ValueError("latency is not finite")
    return SimReport(
        logits=[int(v) for v in logits],
        cycles=c.cycles,
        cell_cycles_total=c.cell_cycles_total,
        cell_cycles_active=c.cell_cycles_active,
        energy_proxy=c.cell_cycles_active / c.cell_cycles_total if c.cell_cycles_total else 0.0,
        latency_ms=latency,
        clock_mhz=clock_mhz,
        logit_scale=ex.positions,
        array=str(cfg),
        fidelity=fidelity,
        zero_skip=zero_skip,
        trace=ex.trace if trace else None,
    )


def run_program(
    instructions,
    image,
    cfg: ArrayConfig = ArrayConfig(),
    clock_mhz: float = 170.0,
    fidelity="word",
    zero_skip=True,
    trace=False,
) -> SimReport:
    """Execute a decoded instruction stream on one raw or pre-reshaped image."""
    data = prepare_image(image, instructions)
    return _execute(instructions, data, cfg, clock_mhz, fidelity, zero_skip, trace)


def run_model(
    manifest: ir.ModelManifest,
    image,
    cfg: ArrayConfig = ArrayConfig(),
    fidelity="word",
    zero_skip=True,
    trace=False,
) -> SimReport:
    """Compile a manifest for ``cfg`` and execute it on one image."""
    v = image.values if isinstance(image, ir.QuantTensor) else np.asarray(image)
    if tuple(v.shape) != manifest.input_shape:
        raise ValueError(f"image shape {v.shape} does not match manifest {manifest.input_shape}")
    compiled = compile_model(manifest, cfg)
    data = ir.reshape_input(v, manifest.reshape_factor).values
    return _execute(compiled.instructions, data, cfg, manifest.clock_mhz, fidelity, zero_skip, trace)
