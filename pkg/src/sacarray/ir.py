"""Model intermediate representation and inference-side quantization math.

A model is an ordered list of streamlined layers (channel shift, 1x1
convolution with signed power-of-two weights, batch norm, ReLU) followed by
a fully connected classifier. Weights are stored as two small integer
matrices: ``signs`` in {-1, 0, +1} and ``exps`` in [-6, 0] (ignored where
the sign is 0).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .fixedpoint import ACC_FRAC_BITS, ACC_MAX, ACC_MIN, DATA_MAX

MIN_EXP = -6
MAX_EXP = 0
# |x| below 2**-6.5 rounds to zero in the log domain.
ZERO_THRESHOLD = 2.0 ** (MIN_EXP - 0.5)

GROUP_SIZES = (1, 2, 4, 8)
STRIDES = (1, 2)
RESHAPE_FACTORS = (1, 2, 4)

# Row-major over {-1, 0, 1} x {-1, 0, 1}.
SHIFT_OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


class ManifestError(ValueError):
    """Malformed manifest document or violated model invariant."""


class FoldRangeError(ValueError):
    """A folded weight exponent left the representable range."""


@dataclass(frozen=True)
class PowTwoWeight:
    """A signed power of two ``sign * 2**exponent``, or zero when ``sign == 0``."""

    sign: int = 0
    exponent: int = 0

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ValueError(f"sign must be -1, 0 or +1, got {self.sign}")
        if self.sign == 0:
            if self.exponent != 0:
                raise ValueError("a zero weight carries no exponent")
        elif not MIN_EXP <= self.exponent <= MAX_EXP:
            raise ValueError(f"exponent {self.exponent} outside [{MIN_EXP}, {MAX_EXP}]")

    @classmethod
    def zero(cls) -> "PowTwoWeight":
        return cls(0, 0)

    @property
    def is_zero(self) -> bool:
        return self.sign == 0

    @property
    def value(self) -> float:
        return 0.0 if self.sign == 0 else self.sign * 2.0 ** self.exponent

    def __repr__(self):
        if self.sign == 0:
            return "PowTwoWeight(0)"
        return f"PowTwoWeight({'+' if self.sign > 0 else '-'}2^{self.exponent})"


def log_exponent(x: float) -> int:
    """round(log2|x|) with ties toward +inf."""
    return math.floor(math.log2(abs(x)) + 0.5)


def log_quantize(x: float) -> PowTwoWeight:
    """Round a real weight to the nearest signed power of two in [2**-6, 2**0]."""
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    if abs(x) < ZERO_THRESHOLD:
        return PowTwoWeight.zero()
    e = min(max(log_exponent(x), MIN_EXP), MAX_EXP)
    return PowTwoWeight(1 if x > 0 else -1, e)


def log_quantize_array(x) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised log_quantize returning ``(signs, exps)`` int8 arrays."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("cannot quantize non-finite values")
    mag = np.abs(x)
    nz = mag >= ZERO_THRESHOLD
    with np.errstate(divide="ignore"):
        e = np.floor(np.log2(np.where(nz, mag, 1.0)) + 0.5)
    e = np.clip(e, MIN_EXP, MAX_EXP).astype(np.int8)
    signs = np.where(nz, np.sign(x), 0).astype(np.int8)
    return signs, np.where(nz, e, 0).astype(np.int8)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BnParams:
    """Per-filter running statistics; gamma is fixed at 1."""

    mu: np.ndarray
    sigma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for name in ("mu", "sigma", "beta"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ManifestError(f"bn.{name} must be finite")
            object.__setattr__(self, name, arr)
        if (self.sigma <= 0).any():
            raise ManifestError("bn.sigma must be > 0")
        if not (self.mu.shape == self.sigma.shape == self.beta.shape):
            raise ManifestError("bn.mu, bn.sigma and bn.beta must have equal lengths")


@dataclass(frozen=True, eq=False)
class FoldedAffine:
    """Power-of-two scale exponent and bias in accumulator units, per filter."""

    scale_exp: np.ndarray
    bias_fx: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scale_exp)
        b = np.asarray(self.bias_fx)
        if s.shape != b.shape:
            raise ManifestError("bn.scale_exp and bn.bias_fx must have equal lengths")
        for name, arr in (("scale_exp", s), ("bias_fx", b)):
            if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ManifestError(f"bn.{name} must be integers")
        if b.size and ((b < ACC_MIN) | (b > ACC_MAX)).any():
            raise ManifestError("bn.bias_fx does not fit a 32-bit accumulator")
        object.__setattr__(self, "scale_exp", s.astype(np.int64))
        object.__setattr__(self, "bias_fx", b.astype(np.int64))

    def __eq__(self, other):
        if not isinstance(other, FoldedAffine):
            return NotImplemented
        return np.array_equal(self.scale_exp, other.scale_exp) and np.array_equal(
            self.bias_fx, other.bias_fx
        )


def quantize_bn(bn: BnParams, lsb_exp: int = 0) -> FoldedAffine:
    """Split ``(x - mu) / sigma + beta`` into a power-of-two scale and an integer bias.

    The scale exponent is round(log2(1/sigma)) without clamping. The bias
    ``beta - mu/sigma`` is expressed in accumulator units of
    ``2**(lsb_exp - 6)`` and rounded half up.
    """
    sigma = bn.sigma
    scale_exp = np.floor(np.log2(1.0 / sigma) + 0.5).astype(np.int64)
    units = (bn.beta - bn.mu / sigma) / 2.0 ** (lsb_exp - ACC_FRAC_BITS)
    bias = np.floor(units + 0.5)
    if ((bias < ACC_MIN) | (bias > ACC_MAX)).any():
        raise OverflowError("quantized bias does not fit a 32-bit accumulator")
    return FoldedAffine(scale_exp, bias.astype(np.int64))


# ---------------------------------------------------------------------------
# Layers and models
# ---------------------------------------------------------------------------

ShiftDirs = Tuple[Tuple[int, int], ...]


def round_robin_shifts(channels: int) -> ShiftDirs:
    return tuple(SHIFT_OFFSETS[i % len(SHIFT_OFFSETS)] for i in range(channels))


def _readonly(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One pointwise layer: ``f`` filters over ``c`` input channels."""

    f: int
    c: int
    s: int
    g: int
    signs: np.ndarray
    exps: np.ndarray
    bn: Optional[Union[BnParams, FoldedAffine]] = None
    shift_dirs: Optional[ShiftDirs] = None

    def __post_init__(self):
        if self.f < 1 or self.c < 1:
            raise ManifestError("f and c must be positive")
        if self.s not in STRIDES:
            raise ManifestError(f"s must be one of {STRIDES}, got {self.s}")
        if self.g not in GROUP_SIZES:
            raise ManifestError(f"g must be one of {GROUP_SIZES}, got {self.g}")
        signs = _readonly(self.signs, np.int8)
        exps = _readonly(self.exps, np.int8)
        if signs.shape != (self.f, self.c) or exps.shape != (self.f, self.c):
            raise ManifestError(f"weights must be {self.f}x{self.c}, got {signs.shape}")
        if not np.isin(signs, (-1, 0, 1)).all():
            raise ManifestError("weight signs must be -1, 0 or +1")
        nz = signs != 0
        if ((exps[nz] < MIN_EXP) | (exps[nz] > MAX_EXP)).any():
            raise ManifestError(f"weight exponents must lie in [{MIN_EXP}, {MAX_EXP}]")
        if (exps[~nz] != 0).any():
            exps = _readonly(np.where(nz, exps, 0), np.int8)
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "exps", exps)
        if self.bn is not None:
            n = np.asarray(self.bn.bias_fx if isinstance(self.bn, FoldedAffine) else self.bn.mu)
            if n.shape != (self.f,):
                raise ManifestError(f"bn parameters must have length f={self.f}")
        if self.shift_dirs is not None:
            dirs = tuple((int(dy), int(dx)) for dy, dx in self.shift_dirs)
            if len(dirs) != self.c:
                raise ManifestError(f"shift_dirs must have length c={self.c}")
            if any(d not in SHIFT_OFFSETS for d in dirs):
                raise ManifestError("shift_dirs entries must lie in {-1,0,1}x{-1,0,1}")
            object.__setattr__(self, "shift_dirs", dirs)

    @property
    def has_shift(self) -> bool:
        return self.shift_dirs is not None

    def weight(self, row: int, col: int) -> PowTwoWeight:
        return PowTwoWeight(int(self.signs[row, col]), int(self.exps[row, col]))

    def values(self) -> np.ndarray:
        """Real-valued weight matrix."""
        return self.signs * np.exp2(self.exps.astype(np.float64))

    @property
    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.signs))

    def folded(self) -> FoldedAffine:
        """The layer's BN as a FoldedAffine (identity when absent)."""
        if self.bn is None:
            z = np.zeros(self.f, dtype=np.int64)
            return FoldedAffine(z, z)
        if not isinstance(self.bn, FoldedAffine):
            raise TypeError("batch norm is not quantized; call quantize_bn first")
        return self.bn

    @classmethod
    def from_weights(cls, weights: Sequence[Sequence[PowTwoWeight]], s=1, g=1, bn=None, shift_dirs=None):
        f, c = len(weights), len(weights[0])
        signs = np.array([[w.sign for w in row] for row in weights], dtype=np.int8)
        exps = np.array([[w.exponent for w in row] for row in weights], dtype=np.int8)
        return cls(f, c, s, g, signs, exps, bn, shift_dirs)


def fold_bn_into_weights(layer: LayerSpec) -> LayerSpec:
    """Add each filter's BN scale exponent into its weight exponents.

    The returned layer carries a FoldedAffine with zero scale exponents and
    the original bias, so folding is idempotent.
    """
    aff = layer.folded()
    nz = layer.signs != 0
    new_exps = layer.exps.astype(np.int64) + aff.scale_exp[:, None]
    bad = nz & ((new_exps < MIN_EXP) | (new_exps > MAX_EXP))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise FoldRangeError(
            f"folded exponent {int(new_exps[r, c])} at weight ({r}, {c}) outside [{MIN_EXP}, {MAX_EXP}]"
        )
    new_exps = np.where(nz, new_exps, 0)
    return replace(
        layer,
        exps=new_exps,
        bn=FoldedAffine(np.zeros(layer.f, dtype=np.int64), aff.bias_fx),
    )


@dataclass(frozen=True, eq=False)
class ModelManifest:
    layers: Tuple[LayerSpec, ...]
    fc: LayerSpec
    input_shape: Tuple[int, int, int]
    reshape_factor: int = 1
    clock_mhz: float = 170.0
    lsb_exp: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        validate_manifest(self)

    @property
    def classes(self) -> int:
        return self.fc.f

    @property
    def depth(self) -> int:
        """Number of weight layers including the classifier."""
        return len(self.layers) + 1

    def all_layers(self) -> Tuple[LayerSpec, ...]:
        return self.layers + (self.fc,)

    def network_input_shape(self) -> Tuple[int, int, int]:
        c, h, w = self.input_shape
        r = self.reshape_factor
        return (c * r * r, h // r, w // r)

    def layer_input_dims(self):
        """Spatial (h, w) entering each layer and the classifier, before striding."""
        _, h, w = self.network_input_shape()
        dims = []
        for layer in self.layers:
            dims.append((h, w))
            h, w = -(-h // layer.s), -(-w // layer.s)
        dims.append((h, w))
        return dims


def validate_manifest(m: ModelManifest) -> None:
    c, h, w = m.input_shape
    if min(c, h, w) < 1:
        raise ManifestError("input_shape entries must be positive")
    if m.reshape_factor not in RESHAPE_FACTORS:
        raise ManifestError(f"reshape_factor must be one of {RESHAPE_FACTORS}")
    if h % m.reshape_factor or w % m.reshape_factor:
        raise ManifestError("input height and width must be divisible by reshape_factor")
    if not (m.clock_mhz > 0 and math.isfinite(m.clock_mhz)):
        raise ManifestError("clock_mhz must be positive")
    channels = m.network_input_shape()[0]
    for i, layer in enumerate(m.layers):
        if layer.c != channels:
            raise ManifestError(f"layers[{i}].c = {layer.c} but its input has {channels} channels")
        if i == 0 and layer.has_shift:
            raise ManifestError("layers[0].shift_dirs: the first layer has no shift")
        channels = layer.f
    if m.fc.c != channels:
        raise ManifestError(f"fc.c = {m.fc.c} but its input has {channels} channels")
    if m.fc.bn is not None or m.fc.has_shift or m.fc.s != 1:
        raise ManifestError("fc has no bn, no shift and stride 1")


# ---------------------------------------------------------------------------
# Data tensors
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """Unsigned 8-bit activations of shape (channels, height, width)."""

    values: np.ndarray
    lsb_exp: int = 0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"expected (channels, height, width), got shape {v.shape}")
        if v.dtype != np.uint8:
            if v.size and (v.min() < 0 or v.max() > DATA_MAX):
                raise ValueError("tensor values must lie in [0, 255]")
            v = v.astype(np.uint8)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return self.lsb_exp == other.lsb_exp and np.array_equal(self.values, other.values)


def _as_array(t):
    return t.values if isinstance(t, QuantTensor) else np.asarray(t)


def reshape_input(img, r: int) -> QuantTensor:
    """Space-to-depth: each r x r pixel block is spread over r*r groups of channels.

    Input pixel (ch, y, x) lands on channel ``c * ((y % r) * r + x % r) + ch``
    at position ``(y // r, x // r)``.
    """
    v = _as_array(img)
    lsb = img.lsb_exp if isinstance(img, QuantTensor) else 0
    if r not in RESHAPE_FACTORS:
        raise ValueError(f"reshape factor must be one of {RESHAPE_FACTORS}")
    c, h, w = v.shape
    if h % r or w % r:
        raise ValueError(f"({h}, {w}) is not divisible by reshape factor {r}")
    out = v.reshape(c, h // r, r, w // r, r).transpose(2, 4, 0, 1, 3)
    return QuantTensor(out.reshape(c * r * r, h // r, w // r).copy(), lsb)


def reshape_inverse(t, r: int, channels: int = 3) -> QuantTensor:
    v = _as_array(t)
    lsb = t.lsb_exp if isinstance(t, QuantTensor) else 0
    _, h, w = v.shape
    out = v.reshape(r, r, channels, h, w).transpose(2, 3, 0, 4, 1)
    return QuantTensor(out.reshape(channels, h * r, w * r).copy(), lsb)


def channel_shift(t, dirs: Sequence[Tuple[int, int]]) -> QuantTensor:
    """Translate each channel by its (dy, dx) offset, zero-filling vacated pixels.

    ``out[y, x] = in[y - dy, x - dx]``.
    """
    v = _as_array(t)
    lsb = t.lsb_exp if isinstance(t, QuantTensor) else 0
    if len(dirs) != v.shape[0]:
        raise ValueError(f"{len(dirs)} shift directions for {v.shape[0]} channels")
    out = np.zeros_like(v)
    _, h, w = v.shape
    for ch, (dy, dx) in enumerate(dirs):
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        out[ch, yd, xd] = v[ch, ys, xs]
    return QuantTensor(out, lsb)


# ---------------------------------------------------------------------------
# Manifest documents (JSON)
# ---------------------------------------------------------------------------

_TOP_KEYS = {"input_shape", "reshape_factor", "clock_mhz", "layers", "fc"}
_TOP_OPTIONAL = {"lsb_exp"}
_LAYER_KEYS = {"f", "c", "s", "g", "weights"}
_LAYER_OPTIONAL = {"bn", "shift_dirs"}
_FC_KEYS = {"classes", "c", "g", "weights"}
_FC_OPTIONAL = {"f", "s"}


def _check_keys(obj, required, optional, where):
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object")
    unknown = set(obj) - required - optional
    if unknown:
        raise ManifestError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ManifestError(f"{where}: missing field(s) {sorted(missing)}")


def _int_field(obj, key, where):
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ManifestError(f"{where}.{key} must be an integer")
    return v


def _per_filter(value, f, where):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(f, float(arr))
    if arr.shape != (f,):
        raise ManifestError(f"{where} must be a number or a list of length {f}")
    return arr


def _parse_weights(raw, f, c, where):
    signs = np.zeros((f, c), dtype=np.int8)
    exps = np.zeros((f, c), dtype=np.int8)
    if not isinstance(raw, list):
        raise ManifestError(f"{where}: expected a list")
    if raw and all(isinstance(e, list) for e in raw):
        try:
            dense = np.asarray(raw, dtype=np.float64)
        except ValueError as exc:
            raise ManifestError(f"{where}: ragged dense weight array") from exc
        if dense.shape != (f, c):
            raise ManifestError(f"{where}: dense weights must be {f}x{c}, got {dense.shape}")
        try:
            return log_quantize_array(dense)
        except ValueError as exc:
            raise ManifestError(f"{where}: {exc}") from exc
    seen = set()
    for k, e in enumerate(raw):
        at = f"{where}[{k}]"
        _check_keys(e, {"row", "col", "sign", "exp"}, set(), at)
        row, col = _int_field(e, "row", at), _int_field(e, "col", at)
        sign, exp = _int_field(e, "sign", at), _int_field(e, "exp", at)
        if not (0 <= row < f and 0 <= col < c):
            raise ManifestError(f"{at}: (row, col) = ({row}, {col}) outside {f}x{c}")
        if sign not in (-1, 1):
            raise ManifestError(f"{at}.sign must be +1 or -1")
        if not MIN_EXP <= exp <= MAX_EXP:
            raise ManifestError(f"{at}.exp must lie in [{MIN_EXP}, {MAX_EXP}]")
        if (row, col) in seen:
            raise ManifestError(f"{at}: duplicate entry for ({row}, {col})")
        seen.add((row, col))
        signs[row, col] = sign
        exps[row, col] = exp
    return signs, exps


def _parse_bn(raw, f, where):
    if not isinstance(raw, dict):
        raise ManifestError(f"{where}: expected an object")
    if "scale_exp" in raw or "bias_fx" in raw:
        _check_keys(raw, {"scale_exp", "bias_fx"}, set(), where)
        s = _per_filter(raw["scale_exp"], f, f"{where}.scale_exp")
        b = _per_filter(raw["bias_fx"], f, f"{where}.bias_fx")
        return FoldedAffine(s, b)
    _check_keys(raw, {"mu", "sigma", "beta"}, {"gamma"}, where)
    if "gamma" in raw and np.any(np.asarray(raw["gamma"], dtype=np.float64) != 1.0):
        raise ManifestError(f"{where}.gamma must be 1")
    return BnParams(
        _per_filter(raw["mu"], f, f"{where}.mu"),
        _per_filter(raw["sigma"], f, f"{where}.sigma"),
        _per_filter(raw["beta"], f, f"{where}.beta"),
    )


def _parse_layer(raw, where, first):
    _check_keys(raw, _LAYER_KEYS, _LAYER_OPTIONAL, where)
    f, c = _int_field(raw, "f", where), _int_field(raw, "c", where)
    s, g = _int_field(raw, "s", where), _int_field(raw, "g", where)
    if f < 1 or c < 1:
        raise ManifestError(f"{where}: f and c must be positive")
    signs, exps = _parse_weights(raw["weights"], f, c, f"{where}.weights")
    bn = _parse_bn(raw["bn"], f, f"{where}.bn") if raw.get("bn") is not None else None
    dirs = raw.get("shift_dirs")
    if dirs is None and not first:
        dirs = round_robin_shifts(c)
    if dirs is not None and first:
        raise ManifestError(f"{where}.shift_dirs: the first layer has no shift")
    return LayerSpec(f, c, s, g, signs, exps, bn, dirs)


def _with_context(where, fn, *args):
    try:
        return fn(*args)
    except ManifestError as exc:
        msg = str(exc)
        raise ManifestError(msg if msg.startswith(where) else f"{where}: {msg}") from None


def load_manifest(data: Union[bytes, str]) -> ModelManifest:
    """Parse and validate a JSON manifest document."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ManifestError(f"manifest is not UTF-8: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    _check_keys(doc, _TOP_KEYS, _TOP_OPTIONAL, "manifest")
    shape = doc["input_shape"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(v, int) for v in shape)):
        raise ManifestError("input_shape must be [channels, height, width]")
    r = _int_field(doc, "reshape_factor", "manifest")
    clock = doc["clock_mhz"]
    if isinstance(clock, bool) or not isinstance(clock, (int, float)):
        raise ManifestError("clock_mhz must be a number")
    lsb = _int_field(doc, "lsb_exp", "manifest") if "lsb_exp" in doc else 0
    if not isinstance(doc["layers"], list):
        raise ManifestError("layers must be a list")
    layers = [
        _with_context(f"layers[{i}]", _parse_layer, raw, f"layers[{i}]", i == 0)
        for i, raw in enumerate(doc["layers"])
    ]
    fc = _with_context("fc", _parse_fc, doc["fc"])
    return ModelManifest(tuple(layers), fc, tuple(shape), r, float(clock), lsb)


def _parse_fc(raw):
    _check_keys(raw, _FC_KEYS, _FC_OPTIONAL, "fc")
    classes = _int_field(raw, "classes", "fc")
    if "f" in raw and raw["f"] != classes:
        raise ManifestError("fc.f must equal fc.classes")
    if raw.get("s", 1) != 1:
        raise ManifestError("fc.s must be 1")
    c, g = _int_field(raw, "c", "fc"), _int_field(raw, "g", "fc")
    if classes < 1 or c < 1:
        raise ManifestError("fc: classes and c must be positive")
    signs, exps = _parse_weights(raw["weights"], classes, c, "fc.weights")
    return LayerSpec(classes, c, 1, g, signs, exps)


def _weights_doc(layer: LayerSpec):
    rows, cols = np.nonzero(layer.signs)
    return [
        {"row": int(r), "col": int(c), "sign": int(layer.signs[r, c]), "exp": int(layer.exps[r, c])}
        for r, c in zip(rows, cols)
    ]


def _bn_doc(bn):
    if isinstance(bn, FoldedAffine):
        return {"scale_exp": [int(v) for v in bn.scale_exp], "bias_fx": [int(v) for v in bn.bias_fx]}
    return {
        "mu": [float(v) for v in bn.mu],
        "sigma": [float(v) for v in bn.sigma],
        "beta": [float(v) for v in bn.beta],
    }


def manifest_to_dict(m: ModelManifest) -> dict:
    layers = []
    for layer in m.layers:
        d = {"f": layer.f, "c": layer.c, "s": layer.s, "g": layer.g, "weights": _weights_doc(layer)}
        if layer.bn is not None:
            d["bn"] = _bn_doc(layer.bn)
        if layer.has_shift:
            d["shift_dirs"] = [list(v) for v in layer.shift_dirs]
        layers.append(d)
    doc = {
        "input_shape": list(m.input_shape),
        "reshape_factor": m.reshape_factor,
        "clock_mhz": m.clock_mhz,
        "lsb_exp": m.lsb_exp,
        "layers": layers,
        "fc": {"classes": m.fc.f, "c": m.fc.c, "g": m.fc.g, "weights": _weights_doc(m.fc)},
    }
    return doc


def dump_manifest(m: ModelManifest) -> bytes:
    """Serialise a manifest to canonical JSON bytes."""
    return (json.dumps(manifest_to_dict(m), indent=1) + "\n").encode("utf-8")
