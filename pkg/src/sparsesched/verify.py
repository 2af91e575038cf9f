"""Self-checks of the numerical core against independent reference routes.

Used by ``sparsesched verify``.  Each check returns a `CheckResult`; nothing
here is needed for compression itself.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .expectation import expectation_experiment
from .hessian import cholesky_rows, invert_spd, remove_row_col, sequential_inverse_rows
from .pruning import compensation, ls_optimal_compensation, obc_prune_row, prune_loss
from .scheduler import kmeans_1d_exact, kmeans_log


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _random_layer(rng, d_row=8, d_col=16, n=64):
    x = rng.standard_normal((d_col, n))
    w = rng.standard_normal((d_row, d_col))
    return w, x


def check_obs_single_prune(rng, trials: int = 20) -> CheckResult:
    worst_dw = worst_loss = 0.0
    for _ in range(trials):
        w, x = _random_layer(rng)
        h = 2 * x @ x.T
        h_inv = invert_spd(h)
        row = w[0]
        p = int(rng.integers(row.size))
        dw = compensation(row[p], p, h_inv[p], h_inv[p, p])
        keep = np.arange(row.size) != p
        coef, *_ = np.linalg.lstsq(x[keep].T, x.T @ row, rcond=None)
        ref = np.zeros_like(row)
        ref[keep] = coef
        worst_dw = max(worst_dw, _rel(row + dw, ref))
        measured = float(np.sum((row @ x - ref @ x) ** 2))
        worst_loss = max(worst_loss, abs(prune_loss(row[p], h_inv[p, p]) - measured) / measured)
    ok = worst_dw <= 1e-6 and worst_loss <= 1e-6
    return CheckResult("obs_single_prune", ok, f"compensation rel {worst_dw:.2e}, loss rel {worst_loss:.2e}")


def check_removal_update(rng, trials: int = 20, d: int = 32, steps: int = 16) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        a = rng.standard_normal((d, 2 * d))
        h = a @ a.T
        cur = invert_spd(h)
        idx = list(range(d))
        for p in rng.permutation(d)[:steps]:
            pos = idx.index(int(p))
            cur = remove_row_col(cur, pos)
            idx.pop(pos)
            direct = invert_spd(h[np.ix_(idx, idx)])
            worst = max(worst, _rel(cur, direct))
    return CheckResult("removal_update", worst <= 1e-8, f"max rel {worst:.2e}")


def check_hc_routes(rng, trials: int = 5, d: int = 32) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        a = rng.standard_normal((d, 2 * d))
        h = a @ a.T
        worst = max(worst, _rel(cholesky_rows(h), sequential_inverse_rows(h)))
    return CheckResult("hc_routes", worst <= 1e-8, f"max rel {worst:.2e}")


def check_greedy_oracle(rng, trials: int = 10, d: int = 8, k: int = 3) -> CheckResult:
    mismatches = 0
    gaps = []
    for _ in range(trials):
        x = rng.standard_normal((d, 4 * d))
        h = 2 * x @ x.T
        w = rng.standard_normal(d)
        w_hat, pruned, _ = obc_prune_row(w, h, k)
        gone = []
        for p in pruned:
            kept = [i for i in range(d) if i not in gone]
            cur = ls_optimal_compensation(w, gone, h) if gone else w
            inv = np.linalg.inv(h[np.ix_(kept, kept)])
            loss = cur[kept] ** 2 / (2 * np.diag(inv))
            if kept[int(np.argmin(loss))] != p:
                mismatches += 1
            gone.append(int(p))

        def err(v):
            return float((v - w) @ h @ (v - w)) / 2

        best = min(err(ls_optimal_compensation(w, list(m), h)) for m in itertools.combinations(range(d), k))
        gaps.append(err(w_hat) / best - 1 if best > 0 else 0.0)
    return CheckResult(
        "greedy_oracle", mismatches == 0, f"{mismatches} argmin mismatches, mean gap to optimum {np.mean(gaps):.2%}"
    )


def check_expectation(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((16, 64))
    rep = expectation_experiment(a @ a.T, 0.5, 10_000, seed)
    small = int(np.flatnonzero(rep.budgets == 100)[0])
    ok = bool(rep.rel_deviation[-1] <= 1.05 * rep.rel_deviation[small])
    detail = ", ".join(f"n={b}: {d:.3f}" for b, d in zip(rep.budgets, rep.rel_deviation))
    return CheckResult("expectation", ok, detail)


def check_kmeans(rng, trials: int = 30) -> CheckResult:
    worse = 0
    for _ in range(trials):
        n = int(rng.integers(2, 40))
        k = int(rng.integers(1, min(8, n) + 1))
        scores = 10 ** rng.uniform(-6, 0, n)
        if kmeans_log(scores, k, int(rng.integers(1 << 31))).objective < kmeans_1d_exact(scores, k).objective * (1 - 1e-9):
            worse += 1
    return CheckResult("kmeans_vs_exact", worse == 0, f"{worse} runs below the exact optimum")


def run_all(seed: int = 0) -> list[CheckResult]:
    root = np.random.SeedSequence(seed)
    seqs = root.spawn(5)
    return [
        check_obs_single_prune(np.random.default_rng(seqs[0])),
        check_removal_update(np.random.default_rng(seqs[1])),
        check_hc_routes(np.random.default_rng(seqs[2])),
        check_greedy_oracle(np.random.default_rng(seqs[3])),
        check_expectation(seed),
        check_kmeans(np.random.default_rng(seqs[4])),
    ]
