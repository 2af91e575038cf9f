"""Layer Hessians, their inverses, and the precomputed sequential inverse rows.

For a layer with inputs ``X`` (d_col x N) the Hessian of the row-wise
reconstruction error is ``H = 2 X X^T``.  Removing input column ``p`` from the
problem changes the inverse by a rank-one downdate (`remove_row_col`).
`cholesky_rows` returns, for every ``p``, row ``p`` of the inverse after
columns ``0..p-1`` have been removed, computed in O(d^3) total from a single
Cholesky factorization of ``H^-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionError, NotPositiveDefiniteError, PivotError, SingularHessianError
from .tensor import as_matrix

DEFAULT_DAMPING = 0.01
PIVOT_RTOL = 1e-12


def _check_square(h: np.ndarray, name: str = "h") -> np.ndarray:
    h = as_matrix(h, name)
    if h.shape[0] != h.shape[1]:
        raise DimensionError(f"{name} must be square, got {h.shape}")
    return h


def cholesky_lower(h: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of `h`, rejecting pivots <= PIVOT_RTOL * max(diag)."""
    h = _check_square(h)
    scale = float(np.max(np.abs(np.diag(h)))) if h.size else 0.0
    if scale <= 0.0:
        raise NotPositiveDefiniteError("matrix is not positive definite (zero diagonal)")
    try:
        low = np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite ({exc})") from None
    pivots = np.diag(low) ** 2
    bad = np.flatnonzero(~(pivots > PIVOT_RTOL * scale))
    if bad.size:
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite (pivot {bad[0]} = {pivots[bad[0]]:.3e})"
        )
    return low


def invert_spd(h: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor."""
    low = cholesky_lower(h)
    low_inv = solve_triangular(low, np.eye(low.shape[0]), lower=True)
    inv = low_inv.T @ low_inv
    return (inv + inv.T) / 2


def eliminate(h_inv: np.ndarray, p: int) -> np.ndarray:
    """Rank-one removal of index `p`, keeping the full size.

    Row and column `p` of the result are zero; the remaining block equals
    the inverse of ``H`` with row/column `p` deleted.
    """
    pivot = h_inv[p, p]
    if not pivot > 0.0:
        raise PivotError(f"non-positive pivot {pivot!r} at index {p}", step=p)
    out = h_inv - np.outer(h_inv[:, p], h_inv[p, :]) / pivot
    out[p, :] = 0.0
    out[:, p] = 0.0
    return out


def remove_row_col(h_inv: np.ndarray, p: int) -> np.ndarray:
    """Inverse of ``H`` with row/column `p` deleted, given ``H^-1``."""
    h_inv = _check_square(h_inv, "h_inv")
    d = h_inv.shape[0]
    if not 0 <= p < d:
        raise IndexError(f"index {p} out of range for dimension {d}")
    if h_inv[p, p] == 0.0:
        raise PivotError(f"zero pivot at index {p}", step=p)
    out = h_inv - np.outer(h_inv[:, p], h_inv[p, :]) / h_inv[p, p]
    keep = np.arange(d) != p
    return out[np.ix_(keep, keep)]


def cholesky_rows(h: np.ndarray) -> np.ndarray:
    """Upper-triangular matrix of sequentially-removed inverse rows.

    With ``H^-1 = U^T U`` (``U`` upper triangular), row ``p`` of the inverse
    after removing indices ``0..p-1`` is ``U[p, p] * U[p, p:]``.
    """
    h_inv = invert_spd(h)
    upper = cholesky_lower(h_inv).T
    return upper * np.diag(upper)[:, None]


def sequential_inverse_rows(h: np.ndarray) -> np.ndarray:
    """Same matrix as `cholesky_rows`, built by repeated `eliminate` (O(d^4)).

    Slow reference route used for cross-checking.
    """
    cur = invert_spd(h)
    d = cur.shape[0]
    rows = np.zeros_like(cur)
    for p in range(d):
        rows[p, p:] = cur[p, p:]
        if p < d - 1:
            cur = eliminate(cur, p)
    return rows


@dataclass(frozen=True)
class HessianState:
    """Damped Hessian of one layer plus (optionally) its factorized forms.

    `dead` flags input columns whose undamped diagonal is exactly zero; those
    inputs never fire on the calibration data.
    """

    h: np.ndarray
    damping_frac: float
    damping_applied: float
    dead: np.ndarray = field(default=None)
    h_inv: np.ndarray | None = None
    hc: np.ndarray | None = None

    def __post_init__(self):
        if self.dead is None:
            object.__setattr__(self, "dead", np.zeros(self.h.shape[0], dtype=bool))

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    @property
    def factorized(self) -> bool:
        return self.h_inv is not None and self.hc is not None

    def factorize(self) -> "HessianState":
        if self.factorized:
            return self
        return replace(self, h_inv=invert_spd(self.h), hc=cholesky_rows(self.h))

    def scaled_hc(self, c: float) -> "HessianState":
        """Copy with ``hc`` multiplied by `c` (scale-invariance experiments)."""
        st = self.factorize()
        return replace(st, hc=st.hc * c)


def build_hessian(x: np.ndarray, damping_frac: float = DEFAULT_DAMPING) -> HessianState:
    """``H = 2 X X^T + lambda I`` with ``lambda = damping_frac * mean(diag(2 X X^T))``."""
    x = as_matrix(x, "x")
    if x.shape[0] < 1:
        raise DimensionError("x must have at least one row")
    if damping_frac < 0:
        raise ValueError("damping_frac must be >= 0")
    h = 2.0 * (x @ x.T)
    h = (h + h.T) / 2
    diag = np.diag(h).copy()
    dead = diag == 0.0
    lam = float(damping_frac) * float(np.mean(diag))
    if lam == 0.0 and np.any(dead):
        raise SingularHessianError("singular Hessian: input has all-zero rows and no damping")
    h[np.diag_indices_from(h)] += lam
    return HessianState(h=h, damping_frac=float(damping_frac), damping_applied=lam, dead=dead)


def layer_hessian(x: np.ndarray, damping_frac: float = DEFAULT_DAMPING) -> HessianState:
    """`build_hessian` followed by factorization."""
    return build_hessian(x, damping_frac).factorize()


def propagated_hessian(x: np.ndarray, damping_frac: float = DEFAULT_DAMPING) -> HessianState:
    """`layer_hessian` for activations flowing through a compressed stack.

    When every upstream weight has been pruned the input is identically zero
    and carries no curvature information.  The identity is used instead, so
    selection falls back to magnitude and no compensation is applied.
    """
    x = as_matrix(x, "x")
    if np.any(x):
        return layer_hessian(x, damping_frac)
    d = x.shape[0]
    return HessianState(h=np.eye(d), damping_frac=float(damping_frac), damping_applied=0.0).factorize()
