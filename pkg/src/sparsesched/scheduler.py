"""Layer-wise sparsity scheduling from estimated pruning errors.

Each layer is scored by the mean single-weight pruning loss under its
precomputed inverse rows.  Scores are clustered in log10 space; clusters
are ranked by centroid and receive sparsities spaced linearly between
``s_max`` (lowest loss) and ``s_min`` (highest loss).  A uniform clamped
shift then lifts the plan until the parameter-weighted total reaches the
target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, InfeasibleTargetError
from .hessian import DEFAULT_DAMPING, propagated_hessian
from .pruning import PruneConfig, sparsegpt_prune_layer
from .tensor import CalibrationSet, LinearModel, apply_activation, as_matrix

DEFAULT_S_MIN = 0.6
DEFAULT_S_MAX = 0.8
DEFAULT_TARGET = 0.7
DEFAULT_MAX_K = 8
SHIFT_TOL = 1e-6


def default_k(n_layers: int) -> int:
    return min(DEFAULT_MAX_K, n_layers)


# --------------------------------------------------------------------------
# scores


def layer_score(w: np.ndarray, hc: np.ndarray) -> float:
    """Mean over all weights of ``w^2 / (2 hc_pp)``."""
    w = as_matrix(w, "w")
    if hc.shape != (w.shape[1], w.shape[1]):
        raise DimensionError(f"hc shape {hc.shape} does not match weight columns {w.shape[1]}")
    diag = np.diag(hc)
    if np.any(diag <= 0):
        raise ValueError("hc diagonal must be strictly positive")
    return float(np.sum(w**2 / (2.0 * diag)) / w.size)


@dataclass(frozen=True)
class ScoreEntry:
    layer: str
    params: int
    score: float


@dataclass(frozen=True)
class ScoreReport:
    entries: tuple[ScoreEntry, ...]

    @property
    def names(self) -> list[str]:
        return [e.layer for e in self.entries]

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries])

    @property
    def param_counts(self) -> np.ndarray:
        return np.array([e.params for e in self.entries])

    def to_dict(self) -> dict:
        return {"entries": [{"layer": e.layer, "params": e.params, "score": e.score} for e in self.entries]}


def score_model(
    model: LinearModel,
    calib: CalibrationSet,
    damping_frac: float = DEFAULT_DAMPING,
    compressed_sparsity: float | None = None,
    block_size: int = 128,
) -> ScoreReport:
    """Score every layer of `model` on activations from `calib`.

    By default activations come from the dense model.  With
    `compressed_sparsity` set, each layer instead sees inputs produced by
    earlier layers already pruned at that uniform sparsity.
    """
    x = calib.x0
    if x.shape[0] != model.input_dim:
        raise DimensionError(f"calibration has {x.shape[0]} rows, model expects {model.input_dim}")
    entries = []
    for layer in model.layers:
        st = propagated_hessian(x, damping_frac)
        score = layer_score(layer.weight, st.hc)
        if score <= 0:
            # all-zero layer: keep scores strictly positive for the log domain
            score = np.finfo(float).tiny
        entries.append(ScoreEntry(layer.name, layer.n_params, score))
        w = layer.weight
        if compressed_sparsity is not None:
            w, _, _ = sparsegpt_prune_layer(w, st, compressed_sparsity, PruneConfig(block_size, damping_frac))
        x = apply_activation(w @ x, layer.activation)
    return ScoreReport(tuple(entries))


# --------------------------------------------------------------------------
# clustering


@dataclass(frozen=True)
class Clustering:
    """Clusters of log10 scores; cluster ids are ordered by ascending centroid."""

    k: int
    centroids: np.ndarray
    assignment: np.ndarray
    objective: float
    history: tuple[float, ...] = ()


def _log_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("no scores given")
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise ValueError("scores must be finite and strictly positive")
    return np.log10(s)


def kmeans_objective(values: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    return float(np.sum((values - centroids[assignment]) ** 2))


def _nearest(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.argmin((values[:, None] - centroids[None, :]) ** 2, axis=1)


def _finalize(values: np.ndarray, centroids: np.ndarray, assignment: np.ndarray, history) -> Clustering:
    used = np.unique(assignment)
    order = used[np.argsort(centroids[used], kind="stable")]
    relabel = np.empty(centroids.size, dtype=int)
    relabel[order] = np.arange(order.size)
    cents = centroids[order]
    assign = relabel[assignment]
    return Clustering(order.size, cents, assign, kmeans_objective(values, cents, assign), tuple(history))


def _kmeanspp(values: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = values.size
    idx = [int(rng.integers(n))]
    d2 = (values - values[idx[0]]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, (values - values[nxt]) ** 2)
    return values[idx].copy()


def _lloyd(values: np.ndarray, centroids: np.ndarray, max_iter: int):
    assignment = _nearest(values, centroids)
    history = [kmeans_objective(values, centroids, assignment)]
    for _ in range(max_iter):
        for c in range(centroids.size):
            members = values[assignment == c]
            if members.size:
                centroids[c] = members.mean()
        history.append(kmeans_objective(values, centroids, assignment))
        new = _nearest(values, centroids)
        if np.array_equal(new, assignment):
            break
        assignment = new
    return centroids, assignment, history


def kmeans_log(scores, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 10) -> Clustering:
    """Lloyd's k-means on log10 scores with k-means++ seeding.

    `n_init` independent seedings are run and the lowest objective kept.
    """
    values = _log_scores(scores)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > values.size:
        raise ValueError(f"k = {k} exceeds the number of scores ({values.size})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        cents, assign, hist = _lloyd(values, _kmeanspp(values, k, rng), max_iter)
        obj = kmeans_objective(values, cents, assign)
        if best is None or obj < best[0]:
            best = (obj, cents, assign, hist)
    return _finalize(values, best[1], best[2], best[3])


def kmeans_1d_exact(scores, k: int) -> Clustering:
    """Globally optimal 1-D k-means on log10 scores by dynamic programming.

    Optimal 1-D clusters are contiguous in sorted order, so the problem
    reduces to choosing ``k - 1`` split points.
    """
    values = _log_scores(scores)
    n = values.size
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    order = np.argsort(values, kind="stable")
    v = values[order]
    s1 = np.concatenate([[0.0], np.cumsum(v)])
    s2 = np.concatenate([[0.0], np.cumsum(v * v)])

    def cost(i, j):
        # sum of squared deviations of v[i:j]; i, j broadcastable
        m = j - i
        return s2[j] - s2[i] - (s1[j] - s1[i]) ** 2 / m

    inf = np.inf
    dp = np.full((k + 1, n + 1), inf)
    arg = np.zeros((k + 1, n + 1), dtype=int)
    dp[0, 0] = 0.0
    for m in range(1, k + 1):
        for j in range(m, n + 1):
            i = np.arange(m - 1, j)
            cand = dp[m - 1, i] + np.maximum(cost(i, j), 0.0)
            b = int(np.argmin(cand))
            dp[m, j] = cand[b]
            arg[m, j] = i[b]
    bounds = [n]
    for m in range(k, 0, -1):
        bounds.append(arg[m, bounds[-1]])
    bounds = bounds[::-1]
    assign_sorted = np.empty(n, dtype=int)
    cents = np.empty(k)
    for c in range(k):
        assign_sorted[bounds[c] : bounds[c + 1]] = c
        cents[c] = v[bounds[c] : bounds[c + 1]].mean()
    assignment = np.empty(n, dtype=int)
    assignment[order] = assign_sorted
    return Clustering(k, cents, assignment, kmeans_objective(values, cents, assignment))


# --------------------------------------------------------------------------
# plans


def weighted_total(values, counts) -> float:
    values = np.asarray(values, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if values.size and np.all(values == values[0]):
        return float(values[0])
    return math.fsum(values * counts) / math.fsum(counts)


@dataclass(frozen=True)
class SparsityPlan:
    per_layer: Mapping[str, float]
    param_counts: Mapping[str, int]
    s_min: float
    s_max: float
    target: float | None
    method: str
    clusters: Mapping[str, int] = field(default_factory=dict)
    shift: float = 0.0

    @property
    def weighted_total(self) -> float:
        names = list(self.per_layer)
        return weighted_total([self.per_layer[n] for n in names], [self.param_counts[n] for n in names])

    def __getitem__(self, name: str) -> float:
        return self.per_layer[name]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "s_min": self.s_min,
            "s_max": self.s_max,
            "target": self.target,
            "shift": self.shift,
            "weighted_total": self.weighted_total,
            "per_layer": dict(self.per_layer),
            "param_counts": dict(self.param_counts),
            "clusters": dict(self.clusters),
        }


def _check_range(s_min: float, s_max: float, target: float | None) -> None:
    if not 0.0 <= s_min < s_max <= 1.0:
        raise ValueError(f"need 0 <= s_min < s_max <= 1, got [{s_min}, {s_max}]")
    if target is not None and target > s_max:
        raise InfeasibleTargetError(f"infeasible target: {target} > s_max = {s_max}")


def _lift_to_target(base: np.ndarray, counts: np.ndarray, s_max: float, target: float):
    """Smallest uniform shift (clamped at s_max) reaching `target`, by bisection."""
    if weighted_total(base, counts) >= target:
        return base, 0.0
    lo, hi = 0.0, float(s_max - base.min())
    while hi - lo > SHIFT_TOL:
        mid = 0.5 * (lo + hi)
        if weighted_total(np.minimum(base + mid, s_max), counts) >= target:
            hi = mid
        else:
            lo = mid
    return np.minimum(base + hi, s_max), hi


def _default_names(n: int) -> list[str]:
    return [f"layer{i:02d}" for i in range(n)]


def assign_sparsities(
    clustering: Clustering,
    param_counts: Sequence[int],
    s_min: float = DEFAULT_S_MIN,
    s_max: float = DEFAULT_S_MAX,
    target: float = DEFAULT_TARGET,
    names: Sequence[str] | None = None,
) -> SparsityPlan:
    """Linear sparsities over cluster rank, lifted to meet the weighted target."""
    _check_range(s_min, s_max, target)
    counts = np.asarray(param_counts, dtype=np.int64)
    assignment = np.asarray(clustering.assignment)
    if counts.shape != assignment.shape:
        raise DimensionError("one parameter count per clustered layer is required")
    names = list(names) if names is not None else _default_names(counts.size)
    k = clustering.k
    rank = np.empty(k, dtype=int)
    rank[np.argsort(clustering.centroids, kind="stable")] = np.arange(k)
    if k == 1:
        level = np.array([min(max(target, s_min), s_max)])
    else:
        # clip guards the endpoints against rounding just outside the range
        level = np.clip(s_max - (s_max - s_min) * rank / (k - 1), s_min, s_max)
    base = level[assignment]
    values, shift = _lift_to_target(base, counts, s_max, target)
    return SparsityPlan(
        per_layer={n: float(v) for n, v in zip(names, values)},
        param_counts={n: int(c) for n, c in zip(names, counts)},
        s_min=s_min,
        s_max=s_max,
        target=target,
        method="score",
        clusters={n: int(c) for n, c in zip(names, assignment)},
        shift=shift,
    )


def layer_order_plan(
    names: Sequence[str],
    s_min: float = DEFAULT_S_MIN,
    s_max: float = DEFAULT_S_MAX,
    param_counts: Sequence[int] | None = None,
    target: float | None = None,
) -> SparsityPlan:
    """Sparsity ramping linearly from s_min (first layer) to s_max (last).

    A single layer gets the midpoint.  When `target` is given the ramp is
    lifted like the score-based plan.
    """
    _check_range(s_min, s_max, target)
    names = list(names)
    t = len(names)
    counts = np.ones(t, dtype=np.int64) if param_counts is None else np.asarray(param_counts, dtype=np.int64)
    if t == 1:
        base = np.array([(s_min + s_max) / 2])
    else:
        base = np.clip(s_min + (s_max - s_min) * np.arange(t) / (t - 1), s_min, s_max)
    shift = 0.0
    if target is not None:
        base, shift = _lift_to_target(base, counts, s_max, target)
    return SparsityPlan(
        per_layer={n: float(v) for n, v in zip(names, base)},
        param_counts={n: int(c) for n, c in zip(names, counts)},
        s_min=s_min,
        s_max=s_max,
        target=target,
        method="layer-order",
        shift=shift,
    )


def uniform_plan(names: Sequence[str], sparsity: float, param_counts: Sequence[int] | None = None) -> SparsityPlan:
    names = list(names)
    counts = [1] * len(names) if param_counts is None else list(param_counts)
    return SparsityPlan(
        per_layer={n: float(sparsity) for n in names},
        param_counts={n: int(c) for n, c in zip(names, counts)},
        s_min=float(sparsity),
        s_max=float(sparsity),
        target=float(sparsity),
        method="uniform",
    )


def score_plan(
    report: ScoreReport,
    k: int | None = None,
    s_min: float = DEFAULT_S_MIN,
    s_max: float = DEFAULT_S_MAX,
    target: float = DEFAULT_TARGET,
    seed: int = 0,
) -> tuple[SparsityPlan, Clustering]:
    """Cluster `report` scores and turn the clusters into a plan."""
    _check_range(s_min, s_max, target)
    k = default_k(len(report.entries)) if k is None else k
    clustering = kmeans_log(report.scores, k, seed)
    plan = assign_sparsities(clustering, report.param_counts, s_min, s_max, target, report.names)
    return plan, clustering


def score_rows(report: ScoreReport, plan: SparsityPlan) -> list[list]:
    """Rows for the ``layer,params,score,log10_score,cluster,sparsity`` table."""
    rows = []
    for e in report.entries:
        rows.append([e.layer, e.params, e.score, math.log10(e.score), plan.clusters.get(e.layer, -1), plan[e.layer]])
    return rows


SCORE_HEADER = ["layer", "params", "score", "log10_score", "cluster", "sparsity"]
