import ast
from pathlib import Path

import numpy as np
import pytest

import sacarray.oracle as oracle_mod
from sacarray import ir, oracle
from sacarray.ir import LayerSpec
from sacarray.scheduler import pack_manifest


def test_identity_weights_scale_input():
    eye = np.eye(5, dtype=np.int8)
    layer = LayerSpec(5, 5, 1, 1, eye, np.zeros((5, 5), dtype=np.int8))
    x = np.random.default_rng(0).integers(0, 256, size=(5, 7))
    assert np.array_equal(oracle.ref_matmul(layer, x), x * 64)


@pytest.mark.parametrize("seed", range(30))
def test_integer_and_real_formulations_agree(seed):
    rng = np.random.default_rng(seed)
    f, c = rng.integers(1, 20, size=2)
    signs = rng.choice([-1, 0, 1], size=(f, c))
    exps = rng.integers(-6, 1, size=(f, c))
    layer = LayerSpec(int(f), int(c), 1, 1, signs, exps)
    x = rng.integers(0, 256, size=(c, 6))
    exact = oracle.ref_matmul(layer, x)
    real = oracle.ref_matmul_real(layer, x)
    assert np.array_equal(exact, real.astype(np.int64))
    assert np.all(real == np.round(real))


def test_oracle_shares_no_matmul_code_with_sim():
    tree = ast.parse(Path(oracle_mod.__file__).read_text())
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module or "")
    assert not any(m and m.startswith("sim") for m in imported)
    assert "sacarray.sim" not in imported


def test_gen_synthetic_deterministic():
    a = ir.dump_manifest(oracle.gen_synthetic(42, layers=((16, 1, 8), (24, 2, 4))))
    b = ir.dump_manifest(oracle.gen_synthetic(42, layers=((16, 1, 8), (24, 2, 4))))
    c = ir.dump_manifest(oracle.gen_synthetic(43, layers=((16, 1, 8), (24, 2, 4))))
    assert a == b and a != c


@pytest.mark.parametrize("seed", range(10))
def test_synthetic_packs_without_drops(seed):
    m = oracle.gen_synthetic(seed, layers=((32, 1, 8), (16, 2, 4), (16, 1, 2)), fc_g=4)
    assert sum(p.dropped for p in pack_manifest(m)) == 0


def test_group_eight_sparsity():
    m = oracle.gen_synthetic(1, layers=((64, 1, 8), (64, 1, 8)), input_shape=(3, 16, 16), reshape_factor=4)
    for layer in m.layers:
        assert 1 - layer.nonzeros / (layer.f * layer.c) >= 0.87


def test_brute_force_prune_tie_break():
    layer = LayerSpec(1, 4, 1, 4, [[1, -1, 0, 1]], [[-2, -2, 0, -2]])
    pruned = oracle.brute_force_prune(layer)
    assert pruned.signs.tolist() == [[1, 0, 0, 0]]


@pytest.mark.parametrize("seed", range(10))
def test_fold_and_unfolded_forward_agree(seed):
    m = oracle.gen_synthetic(seed, layers=((16, 1, 2), (16, 2, 4), (8, 1, 1)))
    img = oracle.random_image(seed, m.input_shape)
    a, ta = oracle.ref_forward(m, img, fold=True, trace=True)
    b, tb = oracle.ref_forward(m, img, fold=False, trace=True)
    assert np.array_equal(a, b)
    for x, y in zip(ta, tb):
        assert np.array_equal(x, y)


def test_count_active_brute_force():
    cells = np.array([[0x07, 0x00], [0x27, 0x16]], dtype=np.uint8)
    x = np.array([[1, 0], [0, 0], [5, 5], [0, 0]], dtype=np.uint8)
    # row 0: cell selects ch0 (one nonzero); row 1: ch1 (none) and ch2 (two)
    assert oracle.count_active(cells, 2, x) == 3


def test_random_image_zero_fraction():
    img = oracle.random_image(0, (3, 64, 64), 0.5)
    frac = 1 - np.count_nonzero(img.values) / img.values.size
    assert 0.45 < frac < 0.55
    assert np.count_nonzero(oracle.random_image(0, (3, 8, 8)).values) == 3 * 64
