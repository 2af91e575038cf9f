"""Hessian-based one-shot pruning and quantization with layer-wise sparsity schedules."""

from .errors import (
    ChecksumError,
    CompressionError,
    ContainerError,
    DimensionError,
    InfeasibleTargetError,
    MissingTensorError,
    NotPositiveDefiniteError,
    PivotError,
    SingularHessianError,
)
from .expectation import ExpectationReport, expectation_experiment
from .hessian import HessianState, build_hessian, cholesky_rows, layer_hessian, remove_row_col
from .pipeline import CompressConfig, CompressionReport, compare_schedulers, compress_model, sparsity_sweep
from .pruning import PruneConfig, PruneMask, magnitude_prune_layer, obc_prune_row, sparsegpt_prune_layer
from .quant import QuantGrid, gptq_quantize_layer, joint_compress_layer, quantize_pruned_layer, rtn_quantize
from .scheduler import (
    SparsityPlan,
    assign_sparsities,
    kmeans_1d_exact,
    kmeans_log,
    layer_order_plan,
    layer_score,
    score_model,
    score_plan,
    uniform_plan,
)
from .tensor import (
    CalibrationSet,
    Layer,
    LinearModel,
    gen_synthetic_model,
    load_calibration,
    load_model,
    save_calibration,
    save_model,
)

__version__ = "0.1.0"
