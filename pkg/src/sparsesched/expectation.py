"""Monte-Carlo check of the sequentially-pruning-all approximation.

When column ``i`` is updated during selective pruning, the exact update term
is a sum over previously pruned columns ``j`` of ``H^{-1}[j, i]`` taken from
the inverse in which only the *actually pruned* columns before ``j`` have
been removed.  The precomputed rows ``hc`` instead assume every earlier
column was removed.  This module samples random masks (each column pruned
independently with probability ``S``), evaluates the exact terms by repeated
rank-one removal, and compares their mean against ``S * hc`` (and
``(1 - S) * hc``) on the strict upper triangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .hessian import cholesky_rows, invert_spd

MAX_DIM = 64


@dataclass(frozen=True)
class ExpectationReport:
    sparsity: float
    n_samples: int
    sampled_mean: np.ndarray
    approximation: np.ndarray
    complement_approximation: np.ndarray
    budgets: np.ndarray
    rel_deviation: np.ndarray
    rel_deviation_complement: np.ndarray

    def to_dict(self) -> dict:
        return {
            "sparsity": self.sparsity,
            "n_samples": self.n_samples,
            "budgets": self.budgets.tolist(),
            "rel_deviation": self.rel_deviation.tolist(),
            "rel_deviation_complement": self.rel_deviation_complement.tolist(),
        }


def masked_update_terms(h_inv: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Exact update terms for a batch of masks.

    ``masks`` is ``(n, d)`` boolean (True = pruned).  Returns ``(n, d, d)``
    where ``[s, j, i]`` (``j < i``) is ``H^{-1}[j, i]`` with the pruned columns
    of mask ``s`` before ``j`` removed, or zero when ``j`` is not pruned.
    """
    n, d = masks.shape
    cur = np.broadcast_to(h_inv, (n, d, d)).copy()
    terms = np.zeros((n, d, d))
    for j in range(d - 1):
        m = masks[:, j]
        if not m.any():
            continue
        row = cur[m, j, :]
        terms[m, j, j + 1 :] = row[:, j + 1 :]
        piv = row[:, j]
        cur[m] -= cur[m][:, :, j][:, :, None] * row[:, None, :] / piv[:, None, None]
        cur[m, j, :] = 0.0
        cur[m, :, j] = 0.0
    return terms


def exact_expectation(h: np.ndarray, sparsity: float) -> np.ndarray:
    """Expected update terms by enumerating all ``2^(d-1)`` masks (small d only)."""
    h_inv = invert_spd(h)
    d = h_inv.shape[0]
    if d > 16:
        raise DimensionError("exact enumeration limited to d <= 16")
    m = d - 1
    codes = np.arange(2**m)
    masks = np.zeros((codes.size, d), dtype=bool)
    masks[:, :m] = (codes[:, None] >> np.arange(m)) & 1 == 1
    k = masks[:, :m].sum(axis=1)
    prob = sparsity**k * (1.0 - sparsity) ** (m - k)
    return np.tensordot(prob, masked_update_terms(h_inv, masks), axes=1)


def _rel_dev(a: np.ndarray, b: np.ndarray, sel) -> float:
    denom = np.linalg.norm(b[sel])
    if denom == 0:
        return float(np.linalg.norm(a[sel]))
    return float(np.linalg.norm(a[sel] - b[sel]) / denom)


def expectation_experiment(
    h: np.ndarray,
    sparsity: float,
    n_samples: int,
    seed: int,
    chunk: int = 2000,
) -> ExpectationReport:
    if not 0.0 < sparsity < 1.0:
        raise ValueError("sparsity must lie in (0, 1)")
    d = h.shape[0]
    if d > MAX_DIM:
        raise DimensionError(f"expectation experiment limited to d <= {MAX_DIM}, got {d}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    h_inv = invert_spd(h)
    hc = cholesky_rows(h)
    upper = np.triu(np.ones((d, d), dtype=bool), k=1)
    approx = np.where(upper, sparsity * hc, 0.0)
    approx_c = np.where(upper, (1.0 - sparsity) * hc, 0.0)

    budgets = [b for b in (10**e for e in range(1, 9)) if b < n_samples] + [n_samples]
    rng = np.random.default_rng(seed)
    total = np.zeros((d, d))
    done = 0
    devs, devs_c = [], []
    for b in budgets:
        while done < b:
            size = min(chunk, b - done)
            masks = rng.random((size, d)) < sparsity
            total += masked_update_terms(h_inv, masks).sum(axis=0)
            done += size
        mean = total / done
        devs.append(_rel_dev(mean, approx, upper))
        devs_c.append(_rel_dev(mean, approx_c, upper))
    return ExpectationReport(
        sparsity=float(sparsity),
        n_samples=int(n_samples),
        sampled_mean=total / done,
        approximation=approx,
        complement_approximation=approx_c,
        budgets=np.array(budgets),
        rel_deviation=np.array(devs),
        rel_deviation_complement=np.array(devs_c),
    )
