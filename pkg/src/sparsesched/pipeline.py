"""End-to-end compression of a layer stack and the desk-scale experiments."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, InfeasibleTargetError
from .hessian import DEFAULT_DAMPING, propagated_hessian
from .pruning import DEFAULT_BLOCK_SIZE, PruneConfig, PruneMask, sparsegpt_prune_layer
from .quant import QuantGrid, joint_compress_layer, quantize_pruned_layer
from .scheduler import (
    DEFAULT_S_MAX,
    DEFAULT_S_MIN,
    DEFAULT_TARGET,
    SparsityPlan,
    layer_order_plan,
    layer_score,
    score_model,
    score_plan,
    uniform_plan,
)
from .tensor import CalibrationSet, LinearModel, apply_activation, as_matrix, gen_synthetic_model


@dataclass(frozen=True)
class CompressConfig:
    block_size: int = DEFAULT_BLOCK_SIZE
    damping_frac: float = DEFAULT_DAMPING
    bits: int | None = None
    # "joint": quantize inside the pruning pass; "sequential": prune, then quantize
    quant_mode: str = "joint"

    def __post_init__(self):
        if self.quant_mode not in ("joint", "sequential"):
            raise ValueError(f"unknown quant_mode {self.quant_mode!r}")

    @property
    def prune(self) -> PruneConfig:
        return PruneConfig(self.block_size, self.damping_frac)

    def to_dict(self) -> dict:
        return asdict(self)


def layer_mse(w: np.ndarray, w_hat: np.ndarray, x: np.ndarray) -> float:
    """``||W X - W_hat X||_F^2 / (d_row * N)``."""
    w = as_matrix(w, "w")
    w_hat = as_matrix(w_hat, "w_hat")
    x = as_matrix(x, "x")
    if w.shape != w_hat.shape or w.shape[1] != x.shape[0]:
        raise DimensionError(f"shape mismatch: w {w.shape}, w_hat {w_hat.shape}, x {x.shape}")
    diff = w @ x - w_hat @ x
    return float(np.sum(diff * diff) / (w.shape[0] * x.shape[1]))


def model_output_error(reference: LinearModel, compressed: LinearModel, x0: np.ndarray) -> float:
    """Relative Frobenius error of the compressed model's output on `x0`."""
    ref = reference.forward(x0)
    out = compressed.forward(x0)
    num = float(np.linalg.norm(ref - out))
    den = float(np.linalg.norm(ref))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


@dataclass
class LayerReport:
    name: str
    params: int
    score: float
    assigned_sparsity: float
    pruned: int
    achieved_density: float
    layer_mse: float
    time_ms: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("time_ms")
        return d


@dataclass
class CompressionReport:
    layers: list[LayerReport]
    weighted_sparsity: float
    output_rel_error: float
    config: dict
    seed: int | None = None
    masks: dict[str, PruneMask] = field(default_factory=dict, repr=False)
    grids: dict[str, QuantGrid] = field(default_factory=dict, repr=False)

    HEADER = ["layer", "params", "score", "assigned_sparsity", "pruned", "achieved_density", "layer_mse"]

    def rows(self, timing: bool = False) -> list[list]:
        out = []
        for l in self.layers:
            row = [l.name, l.params, l.score, l.assigned_sparsity, l.pruned, l.achieved_density, l.layer_mse]
            if timing:
                row.append(l.time_ms)
            out.append(row)
        return out

    def to_dict(self, timing: bool = False) -> dict:
        return {
            "metric_note": "output_rel_error is the relative Frobenius error of the model output on the "
            "calibration inputs (desk-scale stand-in for perplexity)",
            "weighted_sparsity": self.weighted_sparsity,
            "output_rel_error": self.output_rel_error,
            "seed": self.seed,
            "config": self.config,
            "layers": [l.to_dict(timing) for l in self.layers],
        }


def compress_model(
    model: LinearModel,
    calib: CalibrationSet,
    plan: SparsityPlan | dict,
    cfg: CompressConfig | None = None,
    seed: int | None = None,
) -> tuple[LinearModel, CompressionReport]:
    """Compress layers in order under `plan`.

    Layer ``l``'s Hessian comes from activations propagated through the
    already-compressed layers ``0..l-1``.
    """
    cfg = cfg or CompressConfig()
    per_layer = plan.per_layer if isinstance(plan, SparsityPlan) else dict(plan)
    missing = [n for n in model.names if n not in per_layer]
    if missing:
        raise KeyError(f"plan has no sparsity for layers {missing}")
    x = calib.x0
    if x.shape[0] != model.input_dim:
        raise DimensionError(f"calibration has {x.shape[0]} rows, model expects {model.input_dim}")

    weights, reports, masks, grids = [], [], {}, {}
    total_pruned = 0
    total_params = 0
    for layer in model.layers:
        s = float(per_layer[layer.name])
        t0 = time.perf_counter()
        st = propagated_hessian(x, cfg.damping_frac)
        score = layer_score(layer.weight, st.hc)
        if cfg.bits is None:
            w_hat, mask, _ = sparsegpt_prune_layer(layer.weight, st, s, cfg.prune)
        elif cfg.quant_mode == "joint":
            w_hat, mask, grids[layer.name] = joint_compress_layer(layer.weight, st, s, cfg.bits, cfg.prune)
        else:
            w_pruned, mask, _ = sparsegpt_prune_layer(layer.weight, st, s, cfg.prune)
            w_hat, grids[layer.name] = quantize_pruned_layer(w_pruned, mask, st, cfg.bits, cfg.prune)
        elapsed = (time.perf_counter() - t0) * 1e3
        pruned = layer.n_params - mask.kept_count
        reports.append(
            LayerReport(
                name=layer.name,
                params=layer.n_params,
                score=score,
                assigned_sparsity=s,
                pruned=pruned,
                achieved_density=mask.density,
                layer_mse=layer_mse(layer.weight, w_hat, x),
                time_ms=elapsed,
            )
        )
        masks[layer.name] = mask
        weights.append(w_hat)
        total_pruned += pruned
        total_params += layer.n_params
        x = apply_activation(w_hat @ x, layer.activation)

    meta = dict(model.metadata)
    meta["compression"] = {"config": cfg.to_dict(), "plan": dict(per_layer)}
    compressed = model.with_weights(weights, metadata=meta)
    report = CompressionReport(
        layers=reports,
        weighted_sparsity=total_pruned / total_params,
        output_rel_error=model_output_error(model, compressed, calib.x0),
        config=cfg.to_dict(),
        seed=seed,
        masks=masks,
        grids=grids,
    )
    return compressed, report


def sparsity_sweep(
    model: LinearModel,
    calib: CalibrationSet,
    sparsities: Sequence[float],
    cfg: CompressConfig | None = None,
) -> list[tuple[float, float]]:
    """``(S, output_rel_error)`` for uniform plans at each `S`."""
    curve = []
    for s in sparsities:
        _, rep = compress_model(model, calib, uniform_plan(model.names, s), cfg)
        curve.append((float(s), rep.output_rel_error))
    return curve


@dataclass(frozen=True)
class Case:
    seed: int
    model: LinearModel
    calib: CalibrationSet


def synthetic_cases(
    seeds: Iterable[int],
    n_layers: int = 12,
    width: int = 40,
    heterogeneity: float = 1.0,
    n_samples: int = 256,
) -> list[Case]:
    dims = [width] * (n_layers + 1)
    out = []
    for seed in seeds:
        model, calib = gen_synthetic_model(n_layers, dims, heterogeneity, seed, n_samples)
        out.append(Case(int(seed), model, calib))
    return out


SCHEDULERS = ("uniform", "layer_order", "score_based")
COMPARE_HEADER = ["seed", "scheduler", "weighted_sparsity", "plan_total", "output_rel_error"]
SUMMARY_HEADER = ["scheduler", "mean_weighted_sparsity", "mean_output_rel_error", "wins_vs_uniform", "n_seeds"]


def build_plan(
    kind: str,
    model: LinearModel,
    calib: CalibrationSet,
    target: float = DEFAULT_TARGET,
    s_min: float = DEFAULT_S_MIN,
    s_max: float = DEFAULT_S_MAX,
    k: int | None = None,
    seed: int = 0,
    damping_frac: float = DEFAULT_DAMPING,
    score_inputs: str = "dense",
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> SparsityPlan:
    """Plan of the given kind.

    With ``score_inputs="compressed"`` the score-based plan scores each layer
    on inputs from earlier layers pruned uniformly at `target`.
    """
    counts = [l.n_params for l in model.layers]
    if kind == "uniform":
        if target > s_max:
            raise InfeasibleTargetError(f"infeasible target: {target} > s_max = {s_max}")
        return uniform_plan(model.names, target, counts)
    if kind in ("layer_order", "layer-order"):
        return layer_order_plan(model.names, s_min, s_max, counts, target)
    if kind in ("score_based", "score"):
        if score_inputs not in ("dense", "compressed"):
            raise ValueError(f"unknown score_inputs {score_inputs!r}")
        compressed = target if score_inputs == "compressed" else None
        report = score_model(model, calib, damping_frac, compressed, block_size)
        plan, _ = score_plan(report, k, s_min, s_max, target, seed)
        return plan
    raise ValueError(f"unknown scheduler {kind!r}")


@dataclass
class ComparisonResult:
    rows: list[list]
    summary: list[list]

    def mean_error(self, scheduler: str) -> float:
        return float(np.mean([r[4] for r in self.rows if r[1] == scheduler]))

    def errors(self, scheduler: str) -> np.ndarray:
        return np.array([r[4] for r in self.rows if r[1] == scheduler])


def compare_schedulers(
    cases: Sequence[Case],
    target: float = DEFAULT_TARGET,
    s_min: float = DEFAULT_S_MIN,
    s_max: float = DEFAULT_S_MAX,
    k: int | None = None,
    cfg: CompressConfig | None = None,
) -> ComparisonResult:
    """Uniform vs layer-order vs score-based plans on every case."""
    cfg = cfg or CompressConfig()
    rows = []
    for case in cases:
        for kind in SCHEDULERS:
            plan = build_plan(kind, case.model, case.calib, target, s_min, s_max, k, case.seed, cfg.damping_frac)
            _, rep = compress_model(case.model, case.calib, plan, cfg, seed=case.seed)
            rows.append([case.seed, kind, rep.weighted_sparsity, plan.weighted_total, rep.output_rel_error])
    summary = []
    uni = {r[0]: r[4] for r in rows if r[1] == "uniform"}
    for kind in SCHEDULERS:
        sel = [r for r in rows if r[1] == kind]
        wins = sum(1 for r in sel if r[4] < uni[r[0]])
        summary.append(
            [kind, float(np.mean([r[2] for r in sel])), float(np.mean([r[4] for r in sel])), wins, len(sel)]
        )
    return ComparisonResult(rows, summary)
