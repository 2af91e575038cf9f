import numpy as np
import pytest

from sparsesched.errors import DimensionError, InfeasibleTargetError
from sparsesched.pipeline import (
    CompressConfig,
    build_plan,
    compare_schedulers,
    compress_model,
    layer_mse,
    model_output_error,
    sparsity_sweep,
    synthetic_cases,
)
from sparsesched.scheduler import uniform_plan
from sparsesched.tensor import gen_synthetic_model


@pytest.fixture(scope="module")
def small():
    return gen_synthetic_model(4, [12, 10, 12, 8, 6], 1.0, 0, n_samples=80)


def test_layer_mse_basics(rng):
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal((4, 5))
    assert layer_mse(w, w, x) == 0.0
    assert layer_mse(w, rng.standard_normal((3, 4)), np.zeros((4, 5))) == 0.0
    w_hat = rng.standard_normal((3, 4))
    ref = 0.0
    for i in range(3):
        for n in range(5):
            diff = sum((w[i, p] - w_hat[i, p]) * x[p, n] for p in range(4))
            ref += diff * diff
    assert layer_mse(w, w_hat, x) == pytest.approx(ref / 15, rel=1e-12)
    with pytest.raises(DimensionError):
        layer_mse(w, w[:, :3], x)


def test_zero_plan_is_identity(small):
    model, calib = small
    out, rep = compress_model(model, calib, uniform_plan(model.names, 0.0))
    for a, b in zip(model.layers, out.layers):
        assert np.array_equal(a.weight, b.weight)
    assert rep.output_rel_error == 0.0
    assert rep.weighted_sparsity == 0.0


def test_full_plan_zeroes_everything(small):
    model, calib = small
    out, rep = compress_model(model, calib, uniform_plan(model.names, 1.0))
    assert all(not np.any(l.weight) for l in out.layers)
    assert rep.output_rel_error == 1.0


def test_report_consistency(small):
    model, calib = small
    cfg = CompressConfig(block_size=4)
    out, rep = compress_model(model, calib, uniform_plan(model.names, 0.5), cfg, seed=3)
    pruned = total = 0
    for layer, lr in zip(out.layers, rep.layers):
        mask = rep.masks[layer.name]
        zeros = int(np.count_nonzero(~mask.kept))
        assert lr.pruned == zeros
        assert np.all(layer.weight[~mask.kept] == 0)
        assert abs(lr.achieved_density - 0.5) <= 1 / min(4, layer.shape[1])
        assert lr.layer_mse >= 0
        pruned += zeros
        total += layer.n_params
    assert rep.weighted_sparsity == pruned / total
    assert rep.seed == 3
    d = rep.to_dict()
    assert "time_ms" not in d["layers"][0]
    assert "time_ms" in rep.to_dict(timing=True)["layers"][0]
    assert "output_rel_error" in d["metric_note"]
    assert out.metadata["compression"]["plan"] == dict(uniform_plan(model.names, 0.5).per_layer)


def test_calibration_propagates_through_compressed_layers(small):
    model, calib = small
    out, rep = compress_model(model, calib, uniform_plan(model.names, 0.6))
    # layer 1's mse is measured on inputs from the compressed layer 0
    x1 = out.layers[0].weight @ calib.x0
    assert rep.layers[1].layer_mse == pytest.approx(layer_mse(model.layers[1].weight, out.layers[1].weight, x1))


def test_quantized_compression(small):
    model, calib = small
    for mode in ("joint", "sequential"):
        out, rep = compress_model(model, calib, uniform_plan(model.names, 0.5), CompressConfig(bits=4, quant_mode=mode))
        assert set(rep.grids) == set(model.names)
        assert 0 < rep.output_rel_error < 1
    with pytest.raises(ValueError):
        CompressConfig(quant_mode="other")


def test_plan_must_cover_all_layers(small):
    model, calib = small
    with pytest.raises(KeyError):
        compress_model(model, calib, {"layer00": 0.5})


def test_output_error_edge_cases(small):
    model, calib = small
    assert model_output_error(model, model, calib.x0) == 0.0
    zero_in = np.zeros_like(calib.x0)
    assert model_output_error(model, model, zero_in) == 0.0


def test_sweep(small):
    model, calib = small
    assert sparsity_sweep(model, calib, [0.0]) == [(0.0, 0.0)]
    curve = sparsity_sweep(model, calib, [0.0, 1.0])
    assert [e for _, e in curve] == [0.0, 1.0]


def test_build_plan_kinds(small):
    model, calib = small
    for kind in ("uniform", "layer_order", "layer-order", "score_based", "score"):
        plan = build_plan(kind, model, calib, 0.7)
        assert plan.weighted_total >= 0.7 - 1e-12
    with pytest.raises(InfeasibleTargetError):
        build_plan("uniform", model, calib, 0.9)
    with pytest.raises(ValueError):
        build_plan("random", model, calib)
    comp = build_plan("score", model, calib, 0.7, score_inputs="compressed")
    assert comp.weighted_total >= 0.7 - 1e-12


def test_compare_rows_and_summary():
    res = compare_schedulers(synthetic_cases([0, 1], n_layers=4, width=16), target=0.7)
    assert len(res.rows) == 6
    assert all(r[3] >= 0.7 - 1e-12 for r in res.rows)
    assert [s[0] for s in res.summary] == ["uniform", "layer_order", "score_based"]
    assert res.summary[0][3] == 0
    assert res.mean_error("uniform") == pytest.approx(res.summary[0][2])


def test_homogeneous_models_show_no_scheduler_advantage():
    res = compare_schedulers(synthetic_cases(range(3), heterogeneity=0.0), target=0.7)
    means = [res.mean_error(k) for k in ("uniform", "layer_order", "score_based")]
    assert max(means) <= 2 * min(means)
