"""Per-row uniform quantization, plain and Hessian-compensated."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hessian import HessianState
from .pruning import PruneConfig, PruneMask, _check_layer, sequential_compress
from .tensor import as_matrix

SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class QuantGrid:
    """Asymmetric uniform grid ``scale * (q - zero_point)``, ``q in [0, 2^bits - 1]``.

    `scale` and `zero_point` may be scalars (one row) or per-row vectors.
    """

    bits: int
    scale: np.ndarray
    zero_point: np.ndarray

    @property
    def maxq(self) -> int:
        return 2**self.bits - 1

    def levels(self, w: np.ndarray) -> np.ndarray:
        return np.clip(np.round(w / self.scale) + self.zero_point, 0, self.maxq)

    def quantize(self, w: np.ndarray) -> np.ndarray:
        """Round `w` to the nearest representable value (dequantized)."""
        return self.scale * (self.levels(w) - self.zero_point)

    def row(self, i: int) -> "QuantGrid":
        return QuantGrid(self.bits, np.asarray(self.scale)[i], np.asarray(self.zero_point)[i])

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "scale": np.atleast_1d(self.scale).tolist(),
            "zero_point": np.atleast_1d(self.zero_point).astype(int).tolist(),
        }


def _check_bits(bits: int) -> int:
    bits = int(bits)
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must lie in [2, 8], got {bits}")
    return bits


def fit_grid(w_row, bits: int = 4) -> QuantGrid:
    """Min-max grid for one row (or per row of a 2-D array)."""
    bits = _check_bits(bits)
    w = np.asarray(w_row, dtype=np.float64)
    lo = np.min(w, axis=-1)
    hi = np.max(w, axis=-1)
    scale = np.maximum((hi - lo) / (2**bits - 1), SCALE_FLOOR)
    zero = np.round(-lo / scale)
    return QuantGrid(bits, scale, zero)


def fit_grids(w: np.ndarray, bits: int = 4, kept: np.ndarray | None = None) -> QuantGrid:
    """Per-row grids; positions with ``kept == False`` are ignored when fitting."""
    w = as_matrix(w, "w")
    if kept is None:
        return fit_grid(w, bits)
    lo = np.min(np.where(kept, w, np.inf), axis=1)
    hi = np.max(np.where(kept, w, -np.inf), axis=1)
    empty = ~kept.any(axis=1)
    lo[empty] = 0.0
    hi[empty] = 0.0
    bits = _check_bits(bits)
    scale = np.maximum((hi - lo) / (2**bits - 1), SCALE_FLOOR)
    return QuantGrid(bits, scale, np.round(-lo / scale))


def _column_quantizer(grid: QuantGrid):
    scale = np.asarray(grid.scale, dtype=np.float64)
    zero = np.asarray(grid.zero_point, dtype=np.float64)
    maxq = grid.maxq

    def quantize(col, _j):
        return scale * (np.clip(np.round(col / scale) + zero, 0, maxq) - zero)

    return quantize


def rtn_quantize(w: np.ndarray, bits: int = 4) -> np.ndarray:
    """Round-to-nearest on per-row min-max grids."""
    w = as_matrix(w, "w")
    grid = fit_grids(w, bits)
    return grid.scale[:, None] * (
        np.clip(np.round(w / grid.scale[:, None]) + grid.zero_point[:, None], 0, grid.maxq)
        - grid.zero_point[:, None]
    )


def gptq_quantize_layer(
    w: np.ndarray,
    hessian: HessianState,
    bits: int = 4,
    cfg: PruneConfig | None = None,
    propagate: bool = True,
) -> np.ndarray:
    """Quantize columns in order, pushing each rounding residual onto later columns.

    Grids are fit once on the original rows.  With ``propagate=False`` this
    reduces to `rtn_quantize`.
    """
    cfg = cfg or PruneConfig()
    w = as_matrix(w, "w")
    st = _check_layer(w, hessian)
    grid = fit_grids(w, bits)
    w_hat, _, _ = sequential_compress(
        w, st.hc, 0.0, cfg.block_for(w.shape[1]), quantize=_column_quantizer(grid), propagate=propagate
    )
    return w_hat


def joint_compress_layer(
    w: np.ndarray,
    hessian: HessianState,
    sparsity: float,
    bits: int = 4,
    cfg: PruneConfig | None = None,
) -> tuple[np.ndarray, PruneMask, QuantGrid]:
    """Prune and quantize in a single pass.

    Inside each block the pruning selection is made first; surviving weights
    are then quantized column by column with residual propagation, and
    pruned weights become exact zeros.  Grids are fit on the original rows.
    """
    cfg = cfg or PruneConfig()
    w = as_matrix(w, "w")
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity!r}")
    st = _check_layer(w, hessian)
    grid = fit_grids(w, bits)
    w_hat, kept, _ = sequential_compress(
        w,
        st.hc,
        sparsity,
        cfg.block_for(w.shape[1]),
        quantize=_column_quantizer(grid),
        dead=st.dead,
    )
    return w_hat, PruneMask(kept), grid


def quantize_pruned_layer(
    w_pruned: np.ndarray,
    mask: PruneMask,
    hessian: HessianState,
    bits: int = 4,
    cfg: PruneConfig | None = None,
) -> tuple[np.ndarray, QuantGrid]:
    """Second-pass quantization of an already pruned layer.

    Grids are fit on surviving weights only.  Pruned positions are forced
    back to exact zero; drift they pick up from earlier columns is
    propagated like any other residual.
    """
    cfg = cfg or PruneConfig()
    w = as_matrix(w_pruned, "w")
    st = _check_layer(w, hessian)
    grid = fit_grids(w, bits, kept=mask.kept)
    base = _column_quantizer(grid)
    kept = mask.kept

    def quantize(col, j):
        return np.where(kept[:, j], base(col, j), 0.0)

    w_hat, _, _ = sequential_compress(w, st.hc, 0.0, cfg.block_for(w.shape[1]), quantize=quantize)
    return w_hat, grid
