"""Reference implementations used as ground truth.

Nothing here touches the simulator's matmul code. The only shared pieces are
the scalar fixed-point rules in :mod:`sacarray.fixedpoint` and the data
transforms of :mod:`sacarray.ir`.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from . import ir
from .fixedpoint import ACC_FRAC_BITS, relu_quantize
from .packer import PackedLayer, decode_cell


def _weight_list(weights):
    """Yield (row, channel, sign, exponent) for every nonzero weight."""
    if isinstance(weights, PackedLayer):
        for r in range(weights.rows):
            for col in range(weights.cols):
                index, w = decode_cell(int(weights.cells[r, col]))
                if not w.is_zero:
                    yield r, col * weights.group_size + index, w.sign, w.exponent
    else:
        for r in range(weights.f):
            for ch in range(weights.c):
                s = int(weights.signs[r, ch])
                if s:
                    yield r, ch, s, int(weights.exps[r, ch])


def _rows(weights):
    return weights.rows if isinstance(weights, PackedLayer) else weights.f


def _as_matrix(x):
    v = x.values if isinstance(x, ir.QuantTensor) else np.asarray(x)
    return v.reshape(v.shape[0], -1)


def ref_matmul(weights, x, bias: Optional[Sequence[int]] = None) -> np.ndarray:
    """Nested-loop shift-add product in 64-bit accumulator units.

    ``x`` is a QuantTensor or an array whose first axis is channels.
    """
    xm = _as_matrix(x)
    out = np.zeros((_rows(weights), xm.shape[1]), dtype=np.int64)
    if bias is not None:
        out += np.asarray(bias, dtype=np.int64)[:, None]
    for r, ch, sign, exp in _weight_list(weights):
        if ch >= xm.shape[0]:
            continue
        term = xm[ch].astype(np.int64) << (exp + ACC_FRAC_BITS)
        if sign > 0:
            out[r] += term
        else:
            out[r] -= term
    return out


def ref_matmul_real(weights, x) -> np.ndarray:
    """Same product through floating-point arithmetic, scaled to accumulator units."""
    if isinstance(weights, PackedLayer):
        signs, exps = weights.unpack()
        w = signs * np.exp2(exps.astype(np.float64))
    else:
        w = weights.values()
    xm = _as_matrix(x).astype(np.float64)
    c = min(w.shape[1], xm.shape[0])
    return w[:, :c] @ xm[:c] * 2.0**ACC_FRAC_BITS


def brute_force_prune(layer: ir.LayerSpec) -> ir.LayerSpec:
    """Keep only the largest-magnitude weight per row and aligned channel group.

    Scans every group element by element; ties keep the lowest channel.
    """
    signs = np.zeros_like(layer.signs)
    exps = np.zeros_like(layer.exps)
    g = layer.g
    for r in range(layer.f):
        for start in range(0, layer.c, g):
            best = None
            for ch in range(start, min(start + g, layer.c)):
                if layer.signs[r, ch] == 0:
                    continue
                if best is None or layer.exps[r, ch] > layer.exps[r, best]:
                    best = ch
            if best is not None:
                signs[r, best] = layer.signs[r, best]
                exps[r, best] = layer.exps[r, best]
    return replace(layer, signs=signs, exps=exps)


def _scale_exact(acc: np.ndarray, scale_exp: np.ndarray) -> np.ndarray:
    """Multiply each row by 2**scale_exp, insisting the result is an integer."""
    out = np.empty_like(acc)
    for r, e in enumerate(scale_exp):
        e = int(e)
        if e >= 0:
            out[r] = acc[r] << e
        else:
            if np.any(acc[r] & ((1 << -e) - 1)):
                raise ArithmeticError(f"row {r}: scaling by 2^{e} is not exact")
            out[r] = acc[r] >> -e
    return out


def _layer_forward(layer: ir.LayerSpec, x: np.ndarray, lsb_exp: int, fold: bool):
    if layer.has_shift:
        x = ir.channel_shift(x, layer.shift_dirs).values
    x = x[:, :: layer.s, :: layer.s]
    hw = x.shape[1:]
    layer = brute_force_prune(layer)
    if isinstance(layer.bn, ir.BnParams):
        layer = replace(layer, bn=ir.quantize_bn(layer.bn, lsb_exp))
    aff = layer.folded()
    if fold:
        acc = ref_matmul(ir.fold_bn_into_weights(layer), x, aff.bias_fx)
    else:
        acc = _scale_exact(ref_matmul(layer, x), aff.scale_exp) + aff.bias_fx[:, None]
    return acc, hw


def ref_forward(manifest: ir.ModelManifest, image, fold: bool = True, trace: bool = False):
    """Full-model forward pass; returns the logits (and per-layer outputs if ``trace``).

    With ``fold=False`` the BN scale is applied to each layer's integer sum
    instead of being folded into the weights.
    """
    v = image.values if isinstance(image, ir.QuantTensor) else np.asarray(image, dtype=np.uint8)
    x = ir.reshape_input(v, manifest.reshape_factor).values
    outputs = []
    for layer in manifest.layers:
        acc, hw = _layer_forward(layer, x, manifest.lsb_exp, fold)
        q = np.array([relu_quantize(a) for a in acc.ravel()], dtype=np.uint8)
        x = q.reshape((layer.f,) + hw)
        outputs.append(x)
    fc_out = ref_matmul(brute_force_prune(manifest.fc), x)
    outputs.append(fc_out)
    logits = fc_out.sum(axis=1)
    return (logits, outputs) if trace else logits


def count_active(cells: np.ndarray, group_size: int, x: np.ndarray) -> int:
    """Element-wise count of (cell, vector) pairs with nonzero weight and nonzero selected data."""
    total = 0
    rows, cols = cells.shape
    for r in range(rows):
        for col in range(cols):
            index, w = decode_cell(int(cells[r, col]))
            if w.is_zero:
                continue
            total += int(np.count_nonzero(x[col * group_size + index]))
    return total


# ---------------------------------------------------------------------------
# Synthetic models
# ---------------------------------------------------------------------------


def _synthetic_layer(rng, f, c, s, g, *, dense=False, exp_range=(-4, 0), density=0.8):
    signs = np.zeros((f, c), dtype=np.int8)
    exps = np.zeros((f, c), dtype=np.int8)
    lo, hi = exp_range
    if dense:
        signs[:] = rng.choice(np.array([-1, 1], dtype=np.int8), size=(f, c))
        exps[:] = rng.integers(lo, hi + 1, size=(f, c))
        return signs, exps
    groups = -(-c // g)
    widths = np.minimum(g, c - np.arange(groups) * g)
    keep = rng.random((f, groups)) < density
    offset = rng.integers(0, widths, size=(f, groups))
    sign = rng.choice(np.array([-1, 1], dtype=np.int8), size=(f, groups))
    exp = rng.integers(lo, hi + 1, size=(f, groups))
    r, k = np.nonzero(keep)
    ch = k * g + offset[r, k]
    signs[r, ch] = sign[r, k]
    exps[r, ch] = exp[r, k]
    return signs, exps


def gen_synthetic(
    seed: int,
    layers: Sequence[tuple] = ((16, 1, 2), (16, 1, 2)),
    input_shape=(3, 8, 8),
    reshape_factor: int = 2,
    classes: int = 10,
    fc_g: int = 1,
    dense: bool = False,
    clock_mhz: float = 170.0,
    lsb_exp: int = 0,
) -> ir.ModelManifest:
    """Deterministic pseudo-random model honouring every layer invariant.

    ``layers`` lists ``(filters, stride, group_size)``. Unless ``dense`` is
    set, each row keeps at most one nonzero weight per channel group so the
    packer drops nothing. Weight exponents stay within [-4, 0] and BN sigmas
    within [1, 4) so folded exponents never leave [-6, 0].
    """
    rng = np.random.default_rng(seed)
    c = input_shape[0] * reshape_factor * reshape_factor
    specs = []
    for i, (f, s, g) in enumerate(layers):
        signs, exps = _synthetic_layer(rng, f, c, s, g, dense=dense)
        bn = ir.BnParams(
            mu=np.round(rng.uniform(0.0, 48.0, f), 3),
            sigma=np.round(rng.uniform(1.0, 3.99, f), 3),
            beta=np.round(rng.uniform(-8.0, 24.0, f), 3),
        )
        dirs = None if i == 0 else ir.round_robin_shifts(c)
        specs.append(ir.LayerSpec(f, c, s, g, signs, exps, bn, dirs))
        c = f
    signs, exps = _synthetic_layer(rng, classes, c, 1, fc_g, dense=dense)
    fc = ir.LayerSpec(classes, c, 1, fc_g, signs, exps)
    return ir.ModelManifest(tuple(specs), fc, tuple(input_shape), reshape_factor, clock_mhz, lsb_exp)


def random_image(seed: int, shape, zero_fraction: float = 0.0) -> ir.QuantTensor:
    rng = np.random.default_rng(seed)
    v = rng.integers(1, 256, size=shape, dtype=np.int64)
    if zero_fraction:
        v[rng.random(shape) < zero_fraction] = 0
    return ir.QuantTensor(v.astype(np.uint8))
