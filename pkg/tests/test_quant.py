import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesched.hessian import layer_hessian
from sparsesched.pipeline import layer_mse
from sparsesched.pruning import PruneConfig, sparsegpt_prune_layer
from sparsesched.quant import (
    fit_grid,
    fit_grids,
    gptq_quantize_layer,
    joint_compress_layer,
    quantize_pruned_layer,
    rtn_quantize,
)


def _layer(seed, d_row=8, d_col=16, n=64):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((d_col, n))
    return rng.standard_normal((d_row, d_col)), x, layer_hessian(x)


def _on_grid(values, grid):
    return np.allclose(grid.quantize(values), values, rtol=0, atol=1e-12)


def test_integer_row_is_lossless():
    row = np.arange(16.0)
    g = fit_grid(row, 4)
    assert g.scale == 1.0 and g.zero_point == 0.0
    assert np.array_equal(g.quantize(row), row)


def test_constant_row():
    g = fit_grid(np.full(5, 3.7), 4)
    assert np.allclose(g.quantize(np.full(5, 3.7)), 3.7, atol=1e-9)


def test_bits_range():
    with pytest.raises(ValueError):
        fit_grid(np.ones(3), 1)
    with pytest.raises(ValueError):
        fit_grid(np.ones(3), 9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_round_trip_within_half_step(seed, bits):
    row = np.random.default_rng(seed).standard_normal(20) * 5
    g = fit_grid(row, bits)
    assert np.max(np.abs(g.quantize(row) - row)) <= g.scale / 2 + 1e-12
    assert np.all((g.levels(row) >= 0) & (g.levels(row) <= g.maxq))
    # grids are idempotent on their own output
    assert np.array_equal(g.quantize(g.quantize(row)), g.quantize(row))


def test_rtn_values_lie_on_row_grids():
    w, _, _ = _layer(0)
    q = rtn_quantize(w, 3)
    grid = fit_grids(w, 3)
    for i in range(w.shape[0]):
        assert _on_grid(q[i], grid.row(i))


def test_gptq_exact_grid_is_identity():
    rng = np.random.default_rng(1)
    w = rng.integers(0, 16, size=(4, 10)).astype(float)
    w[:, 0], w[:, 1] = 0.0, 15.0
    st_ = layer_hessian(rng.standard_normal((10, 40)))
    assert np.array_equal(gptq_quantize_layer(w, st_, 4), w)


def test_gptq_identity_hessian_equals_rtn():
    w, _, _ = _layer(2)
    st_ = layer_hessian(np.eye(16))
    assert np.allclose(gptq_quantize_layer(w, st_, 4), rtn_quantize(w, 4), rtol=0, atol=1e-12)


def test_gptq_without_propagation_is_rtn_bitwise():
    w, _, st_ = _layer(3)
    assert np.array_equal(gptq_quantize_layer(w, st_, 4, propagate=False), rtn_quantize(w, 4))


def test_gptq_outputs_on_grid():
    w, _, st_ = _layer(4)
    q = gptq_quantize_layer(w, st_, 4)
    grid = fit_grids(w, 4)
    for i in range(w.shape[0]):
        assert _on_grid(q[i], grid.row(i))


def test_joint_zero_sparsity_equals_gptq():
    w, _, st_ = _layer(5)
    got, mask, _ = joint_compress_layer(w, st_, 0.0, 4)
    assert np.array_equal(got, gptq_quantize_layer(w, st_, 4))
    assert mask.density == 1.0


def test_joint_full_sparsity_is_zero():
    w, _, st_ = _layer(6)
    got, mask, _ = joint_compress_layer(w, st_, 1.0, 4)
    assert not np.any(got) and mask.density == 0.0


def test_joint_values_on_grid_and_masked_zeros():
    w, _, st_ = _layer(7)
    got, mask, grid = joint_compress_layer(w, st_, 0.5, 4, PruneConfig(block_size=4))
    assert np.all(got[~mask.kept] == 0.0)
    assert np.all(mask.row_density() == 0.5)
    for i in range(w.shape[0]):
        assert _on_grid(got[i][mask.kept[i]], grid.row(i))


def test_sequential_composition():
    w, x, st_ = _layer(8)
    pruned, mask, _ = sparsegpt_prune_layer(w, st_, 0.5)
    got, grid = quantize_pruned_layer(pruned, mask, st_, 4)
    assert np.all(got[~mask.kept] == 0.0)
    for i in range(w.shape[0]):
        assert _on_grid(got[i][mask.kept[i]], grid.row(i))
        kept = pruned[i][mask.kept[i]]
        assert grid.row(i).scale == pytest.approx((kept.max() - kept.min()) / 15)


def test_joint_error_dominates_each_part_on_average():
    joint, prune_only, quant_only = [], [], []
    for seed in range(50):
        w, x, st_ = _layer(seed)
        joint.append(layer_mse(w, joint_compress_layer(w, st_, 0.5, 4)[0], x))
        prune_only.append(layer_mse(w, sparsegpt_prune_layer(w, st_, 0.5)[0], x))
        quant_only.append(layer_mse(w, gptq_quantize_layer(w, st_, 4), x))
    assert np.mean(joint) >= np.mean(prune_only)
    assert np.mean(joint) >= np.mean(quant_only)


def test_grid_serialization():
    w, _, _ = _layer(9, d_row=2)
    d = fit_grids(w, 4).to_dict()
    assert d["bits"] == 4 and len(d["scale"]) == 2 and all(isinstance(z, int) for z in d["zero_point"])


def test_grids_ignore_masked_positions():
    w = np.array([[100.0, 1.0, 2.0, 3.0]])
    kept = np.array([[False, True, True, True]])
    g = fit_grids(w, 2, kept)
    assert g.scale[0] == pytest.approx(2 / 3)
    empty = fit_grids(w, 2, np.zeros_like(kept))
    assert empty.scale[0] == pytest.approx(1e-12)
