"""Second-order weight pruning: single-weight OBS steps, exact greedy OBC,
and the column-blocked selective pruner driven by precomputed inverse rows.

All routines work row-wise on ``w`` (one output neuron) against the shared
Hessian of the layer inputs; a layer is just ``d_row`` independent rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, PivotError
from .hessian import HessianState, eliminate, invert_spd
from .tensor import as_matrix

DEFAULT_BLOCK_SIZE = 128


@dataclass(frozen=True)
class PruneConfig:
    block_size: int = DEFAULT_BLOCK_SIZE
    damping_frac: float = 0.01

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.damping_frac < 0:
            raise ValueError("damping_frac must be >= 0")

    def block_for(self, d_col: int) -> int:
        return max(1, min(self.block_size, d_col))


@dataclass(frozen=True)
class PruneMask:
    """Boolean keep-mask; True marks a surviving weight."""

    kept: np.ndarray

    @property
    def rows(self) -> int:
        return self.kept.shape[0]

    @property
    def cols(self) -> int:
        return self.kept.shape[1]

    @property
    def kept_count(self) -> int:
        return int(np.count_nonzero(self.kept))

    @property
    def density(self) -> float:
        return self.kept_count / self.kept.size if self.kept.size else 1.0

    @property
    def sparsity(self) -> float:
        return 1.0 - self.density

    def row_density(self) -> np.ndarray:
        return self.kept.mean(axis=1)

    @classmethod
    def full(cls, rows: int, cols: int) -> "PruneMask":
        return cls(np.ones((rows, cols), dtype=bool))


# --------------------------------------------------------------------------
# single-weight OBS


def prune_loss(w_p: float, hc_pp: float) -> float:
    """Increase of the row reconstruction error when `w_p` is removed optimally."""
    if not hc_pp > 0:
        raise PivotError(f"pivot must be positive, got {hc_pp!r}")
    return w_p * w_p / (2.0 * hc_pp)


def compensation(w_p: float, p: int, hinv_row: np.ndarray, hinv_pp: float) -> np.ndarray:
    """Optimal update of the whole row when weight `p` is forced to zero.

    Computed in ratio form ``-w_p * (row / pivot)``, so a common rescaling of
    `hinv_row` and `hinv_pp` leaves the result unchanged up to rounding.
    """
    if not hinv_pp > 0:
        raise PivotError(f"pivot must be positive, got {hinv_pp!r}")
    dw = -w_p * (np.asarray(hinv_row, dtype=np.float64) / hinv_pp)
    dw[p] = -w_p
    return dw


def ls_optimal_compensation(w: np.ndarray, mask, h: np.ndarray) -> np.ndarray:
    """Minimize ``(v - w) H (v - w)^T`` subject to ``v[mask] = 0``.

    `mask` is an index collection (or boolean vector) of positions to zero.
    """
    w = np.asarray(w, dtype=np.float64)
    d = w.shape[0]
    m = np.asarray(mask)
    if m.dtype == bool:
        pruned = m.copy()
    else:
        pruned = np.zeros(d, dtype=bool)
        pruned[m.astype(int)] = True
    kept = ~pruned
    out = np.zeros(d)
    if not kept.any():
        return out
    h_kk = h[np.ix_(kept, kept)]
    h_kp = h[np.ix_(kept, pruned)]
    rhs = h_kk @ w[kept] + h_kp @ w[pruned]
    try:
        out[kept] = np.linalg.solve(h_kk, rhs)
    except np.linalg.LinAlgError as exc:
        raise PivotError(f"singular kept-submatrix ({exc})") from None
    return out


def obc_prune_row(w: np.ndarray, h: np.ndarray, k_prune: int):
    """Exact greedy OBS pruning of one row.

    Each step picks the remaining weight with the lowest loss under the
    current (downdated) inverse, applies its compensation and removes it
    from the inverse.  Ties go to the lower index.

    Returns ``(w_hat, pruned_indices, step_losses)``.
    """
    w_hat = np.array(w, dtype=np.float64)
    d = w_hat.shape[0]
    if not 0 <= k_prune <= d:
        raise ValueError(f"k_prune must lie in [0, {d}]")
    h_inv = invert_spd(h)
    alive = np.ones(d, dtype=bool)
    pruned, losses = [], []
    for step in range(k_prune):
        diag = np.diag(h_inv)
        if np.any(diag[alive] <= 0):
            raise PivotError(f"pivot collapse at step {step}", step=step)
        cand = np.flatnonzero(alive)
        step_loss = w_hat[cand] ** 2 / (2.0 * diag[cand])
        j = int(np.argmin(step_loss))
        p = int(cand[j])
        w_hat += compensation(w_hat[p], p, h_inv[p], h_inv[p, p])
        w_hat[p] = 0.0
        w_hat[~alive] = 0.0
        h_inv = eliminate(h_inv, p)
        alive[p] = False
        pruned.append(p)
        losses.append(float(step_loss[j]))
    return w_hat, np.array(pruned, dtype=int), np.array(losses)


# --------------------------------------------------------------------------
# blocked selective pruning


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def block_budgets(d_col: int, sparsity: float, block_size: int) -> list[tuple[int, int, int]]:
    """``(start, end, n_prune)`` per column block.

    Per-block counts carry the rounding remainder forward so a row always
    ends with exactly ``round(sparsity * d_col)`` pruned weights.
    """
    out = []
    for start in range(0, d_col, block_size):
        end = min(start + block_size, d_col)
        n = _round_half_up(sparsity * end) - _round_half_up(sparsity * start)
        out.append((start, end, max(0, min(n, end - start))))
    return out


Quantizer = Callable[[np.ndarray, int], np.ndarray]


def sequential_compress(
    w: np.ndarray,
    hc: np.ndarray,
    sparsity: float = 0.0,
    block_size: int = DEFAULT_BLOCK_SIZE,
    quantize: Quantizer | None = None,
    dead: np.ndarray | None = None,
    propagate: bool = True,
):
    """Column-sequential compression of a weight matrix against ``hc``.

    Columns are visited left to right in blocks.  At the start of a block the
    lowest-loss weights of every row are marked for pruning (loss uses the
    current weights and the block's ``hc`` diagonal).  Each column is then
    replaced by its compressed value (zero if pruned, ``quantize(col, j)``
    otherwise) and the residual is pushed onto later columns through the
    normalized ``hc`` row.  Inside a block the update is immediate; columns
    past the block receive the accumulated update when the block ends.

    Returns ``(w_hat, kept_mask, pruned_loss_sum)``.
    """
    w = np.array(w, dtype=np.float64)
    d_row, d_col = w.shape
    diag = np.diag(hc).copy()
    if np.any(diag <= 0):
        raise PivotError("hc diagonal must be strictly positive")
    # ratio form: unit-diagonal rows, invariant to a common scale of hc
    ratio = hc / diag[:, None]
    dead = np.zeros(d_col, dtype=bool) if dead is None else np.asarray(dead, dtype=bool)
    kept = np.ones((d_row, d_col), dtype=bool)
    loss_sum = 0.0
    rows = np.arange(d_row)[:, None]

    for start, end, n_prune in block_budgets(d_col, sparsity, block_size):
        blk = w[:, start:end].copy()
        width = end - start
        resid = np.zeros((d_row, width))
        if n_prune > 0:
            loss = blk**2 / (2.0 * diag[start:end])
            key = np.where(dead[start:end], -np.inf, loss)
            order = np.argsort(key, axis=1, kind="stable")[:, :n_prune]
            kept[rows, start + order] = False
        for j in range(width):
            col = start + j
            cur = blk[:, j]
            q = quantize(cur, col) if quantize is not None else cur.copy()
            pruned = ~kept[:, col]
            q[pruned] = 0.0
            if pruned.any():
                live = pruned & ~dead[col]
                loss_sum += float(np.sum(cur[live] ** 2) / (2.0 * diag[col]))
            err = cur - q
            if propagate and j + 1 < width:
                blk[:, j + 1 :] -= np.outer(err, ratio[col, col + 1 : end])
            blk[:, j] = q
            resid[:, j] = err
        w[:, start:end] = blk
        if propagate and end < d_col:
            w[:, end:] -= resid @ ratio[start:end, end:]
    return w, kept, loss_sum


def _check_layer(w: np.ndarray, hessian: HessianState) -> HessianState:
    if w.shape[1] != hessian.dim:
        raise DimensionError(f"weight has {w.shape[1]} columns, Hessian is {hessian.dim}x{hessian.dim}")
    return hessian.factorize()


def sparsegpt_prune_layer(
    w: np.ndarray,
    hessian: HessianState,
    sparsity: float,
    cfg: PruneConfig | None = None,
):
    """Prune `sparsity` of every row of `w` with Hessian-compensated updates.

    Returns ``(w_hat, mask, layer_loss_sum)``.
    """
    cfg = cfg or PruneConfig()
    w = as_matrix(w, "w")
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity!r}")
    st = _check_layer(w, hessian)
    w_hat, kept, loss = sequential_compress(
        w, st.hc, sparsity, cfg.block_for(w.shape[1]), dead=st.dead
    )
    return w_hat, PruneMask(kept), loss


def magnitude_prune_layer(w: np.ndarray, sparsity: float) -> tuple[np.ndarray, PruneMask]:
    """Per-row magnitude pruning without compensation (baseline)."""
    w = as_matrix(w, "w")
    d_row, d_col = w.shape
    n = _round_half_up(sparsity * d_col)
    order = np.argsort(np.abs(w), axis=1, kind="stable")[:, :n]
    kept = np.ones_like(w, dtype=bool)
    kept[np.arange(d_row)[:, None], order] = False
    return np.where(kept, w, 0.0), PruneMask(kept)
