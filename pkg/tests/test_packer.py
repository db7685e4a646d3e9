from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacarray import ir, oracle
from sacarray.ir import FoldedAffine, LayerSpec, PowTwoWeight
from sacarray.packer import (
    MalformedCellError,
    PackedLayer,
    combine_columns,
    decode_cell,
    encode_cell,
    pack_model_bytes,
    read_packed_model,
)
from sacarray.scheduler import pack_manifest

DATA = Path(__file__).parent / "data"


def _all_weights():
    yield PowTwoWeight.zero()
    for e in range(-6, 1):
        for s in (1, -1):
            yield PowTwoWeight(s, e)


def test_encode_examples():
    code = encode_cell(1, PowTwoWeight(-1, -1))
    assert code >> 5 == 0b001 and (code >> 4) & 1 == 1 and code & 0xF == 0b0110
    assert code == 0x36
    assert encode_cell(0, PowTwoWeight.zero()) == 0x00
    assert encode_cell(7, PowTwoWeight(1, 0)) == 0b111_0_0111


def test_power_code_ladder():
    for e in range(-6, 1):
        assert encode_cell(0, PowTwoWeight(1, e)) == e + 7


def test_round_trip_exhaustive():
    seen = set()
    for index in range(8):
        for w in _all_weights():
            code = encode_cell(index, w)
            i, back = decode_cell(code)
            assert back == w
            if not w.is_zero:
                assert i == index
            seen.add(code)
    # 8 indices x 14 values plus the one canonical zero
    assert len(seen) == 8 * 14 + 1


def test_decode_errors():
    assert decode_cell(0x00) == (0, PowTwoWeight.zero())
    with pytest.raises(MalformedCellError):
        decode_cell(0b0000_1010)
    for power in range(8, 16):
        with pytest.raises(MalformedCellError):
            decode_cell(power)
    with pytest.raises(MalformedCellError):
        decode_cell(0x10)  # sign bit on a zero weight


def test_encode_index_out_of_range():
    with pytest.raises(ValueError):
        encode_cell(4, PowTwoWeight(1, 0), group_size=4)
    with pytest.raises(ValueError):
        encode_cell(8, PowTwoWeight(1, 0))


def _spec(signs, exps, g, bias=None):
    signs, exps = np.asarray(signs), np.asarray(exps)
    f, c = signs.shape
    bn = None if bias is None else FoldedAffine(np.zeros(f, dtype=int), bias)
    return LayerSpec(f, c, 1, g, signs, exps, bn)


def test_width_reduction_eight_to_two():
    rng = np.random.default_rng(0)
    signs = rng.choice([-1, 0, 1], size=(6, 8))
    exps = rng.integers(-6, 1, size=(6, 8))
    packed = combine_columns(_spec(signs, exps, 4))
    assert packed.cols == 2
    assert packed.cols * packed.group_size == 8


def test_combine_keeps_largest_lowest_index():
    signs = [[1, -1, 1, 1]]
    exps = [[-3, -1, -1, -5]]
    packed = combine_columns(_spec(signs, exps, 4))
    assert packed.decode(0, 0) == (1, PowTwoWeight(-1, -1))
    assert packed.dropped == 3
    assert packed.provenance[0, 0] == 1


def test_pre_pruned_round_trip():
    m = oracle.gen_synthetic(7, layers=((16, 1, 4),), input_shape=(3, 8, 8), reshape_factor=2)
    layer = m.layers[0]
    packed = combine_columns(ir.fold_bn_into_weights(ir.LayerSpec(
        layer.f, layer.c, layer.s, layer.g, layer.signs, layer.exps)))
    signs, exps = packed.unpack()
    assert packed.dropped == 0
    assert np.array_equal(signs, layer.signs)
    assert np.array_equal(exps, layer.exps)


def test_dense_matches_brute_force():
    rng = np.random.default_rng(11)
    signs = rng.choice([-1, 1], size=(16, 16))
    exps = rng.integers(-6, 1, size=(16, 16))
    layer = _spec(signs, exps, 8)
    packed = combine_columns(layer)
    want = oracle.brute_force_prune(layer)
    got_s, got_e = packed.unpack()
    assert np.array_equal(got_s, want.signs)
    assert np.array_equal(got_e, want.exps)
    assert packed.dropped == 16 * 16 - 16 * 2


def test_padding_when_group_does_not_divide():
    signs = np.ones((2, 6), dtype=int)
    exps = np.full((2, 6), -2)
    packed = combine_columns(_spec(signs, exps, 4))
    assert packed.cols == 2
    s, _ = packed.unpack()
    assert s.shape == (2, 6)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 16),
    st.integers(1, 16),
    st.sampled_from([1, 2, 4, 8]),
    st.integers(0, 2**32 - 1),
)
def test_kept_weights_existed_and_never_grow(f, c, g, seed):
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1, 0, 1], size=(f, c))
    exps = rng.integers(-6, 1, size=(f, c))
    layer = _spec(signs, exps, g)
    packed = combine_columns(layer)
    s, e = packed.unpack()
    nz = s != 0
    assert np.array_equal(s[nz], layer.signs[nz])
    assert np.array_equal(e[nz], layer.exps[nz])
    for r, col in zip(*np.nonzero(packed.provenance >= 0)):
        assert packed.provenance[r, col] // g == col


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**32 - 1))
def test_packed_matmul_equals_sparse(f, g, seed):
    rng = np.random.default_rng(seed)
    cols = int(rng.integers(1, 5))
    layer = oracle.gen_synthetic(seed, layers=(), input_shape=(cols * g, 1, 1), reshape_factor=1,
                                 classes=f, fc_g=g).fc
    packed = combine_columns(layer)
    x = rng.integers(0, 256, size=(cols * g, 5))
    assert packed.dropped == 0
    assert np.array_equal(oracle.ref_matmul(packed, x), oracle.ref_matmul(layer, x))


def test_binary_round_trip():
    rng = np.random.default_rng(4)
    layer = _spec(rng.choice([-1, 0, 1], size=(5, 16)), rng.integers(-6, 1, size=(5, 16)), 4,
                  bias=rng.integers(-1000, 1000, size=5))
    packed = combine_columns(layer)
    data = packed.to_bytes()
    assert len(data) == PackedLayer.byte_size(5, 4)
    back, reserved = PackedLayer.from_bytes(data)
    assert back == packed and reserved == b"\0\0\0"


def test_binary_rejects_bad_cell():
    packed = combine_columns(_spec([[1, 0]], [[0, 0]], 2))
    data = bytearray(packed.to_bytes())
    data[8] = 0x0C
    with pytest.raises(MalformedCellError):
        PackedLayer.from_bytes(bytes(data))
    with pytest.raises(MalformedCellError):
        PackedLayer.from_bytes(bytes(data[:5]))


def test_golden_packed_file():
    m = ir.load_manifest((DATA / "golden_manifest.json").read_bytes())
    data = pack_model_bytes(pack_manifest(m))
    assert data == (DATA / "golden_packed.bin").read_bytes()
    layers = read_packed_model(data)
    assert [(l.rows, l.cols, l.group_size) for l in layers] == [(4, 2, 4), (2, 4, 1)]


def test_golden_basis_vector_selects_kept_weight():
    layer = read_packed_model((DATA / "golden_packed.bin").read_bytes())[0]
    x = np.zeros((8, 1), dtype=np.int64)
    x[1] = 1
    out = oracle.ref_matmul(layer, x)[:, 0]
    # only row 0 keeps channel 1, weight -2**-1 in units of 2**-6
    assert out.tolist() == [-32, 0, 0, 0]


def test_unfolded_scale_rejected():
    layer = _spec([[1]], [[0]], 1)
    layer = LayerSpec(1, 1, 1, 1, layer.signs, layer.exps, FoldedAffine([-1], [0]))
    with pytest.raises(ValueError):
        combine_columns(layer)
