"""Classification and anchor-prior losses.

The anchor-prior loss (``pp_loss``) scores a column-normalized relation
matrix on three anchor-quality criteria: columns should not collapse to
one-hot (KL against a top-3 pseudo-label, gated by an exact 1-D k-means),
should not be uniform (column entropy), and the per-target marginal should be
balanced (negative marginal entropy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relt.relations import OVER_TARGETS, RelationMatrix, entropy


def cross_entropy(logits, label: int) -> float:
    """Stabilized negative log-softmax of ``logits`` at ``label``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("logits must be a non-empty 1-D sequence")
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


@dataclass(frozen=True)
class KmeansResult:
    """Exact 1-D k-means partition, clusters ordered by ascending mean."""

    clusters: tuple
    means: np.ndarray
    sizes: np.ndarray
    cost: float

    @property
    def top_cluster_size(self) -> int:
        return int(self.sizes[-1])


def kmeans_1d(values, k: int = 3) -> KmeansResult:
    """Optimal 1-D k-means by dynamic programming over sorted runs.

    Optimal clusters are contiguous in sorted order, and equal values are
    never split across clusters, so the DP runs over runs of equal values.
    When there are fewer distinct values than k the distinct values form the
    clusters (cost 0 is still optimal).
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size < k:
        raise ValueError(f"need at least k={k} values, got {values.size}")
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = np.sort(values)
    run_values, run_counts = np.unique(ordered, return_counts=True)
    n_runs = run_values.size
    k_eff = min(k, n_runs)

    w = run_counts.astype(np.float64)
    wsum = np.concatenate(([0.0], np.cumsum(w)))
    vsum = np.concatenate(([0.0], np.cumsum(w * run_values)))
    qsum = np.concatenate(([0.0], np.cumsum(w * run_values**2)))

    # seg_cost[i, j]: within-segment sum of squared deviations for runs i..j
    idx = np.arange(n_runs)
    tw = wsum[idx + 1][None, :] - wsum[idx][:, None]
    tv = vsum[idx + 1][None, :] - vsum[idx][:, None]
    tq = qsum[idx + 1][None, :] - qsum[idx][:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        seg_cost = tq - tv * tv / tw
    seg_cost[idx[:, None] > idx[None, :]] = np.inf

    INF = float("inf")
    dp = np.full((k_eff + 1, n_runs), INF)
    cut = np.zeros((k_eff + 1, n_runs), dtype=np.int64)
    dp[1] = seg_cost[0]
    for m in range(2, k_eff + 1):
        # candidates[i, j] = dp[m-1, i-1] + seg_cost[i, j], first split at run i
        candidates = np.full((n_runs, n_runs), INF)
        candidates[1:] = dp[m - 1, :-1, None] + seg_cost[1:]
        candidates[: m - 1] = INF
        cut[m] = candidates.argmin(axis=0)
        dp[m] = candidates[cut[m], idx]

    bounds = [n_runs]
    j = n_runs - 1
    for m in range(k_eff, 1, -1):
        i = int(cut[m, j])
        bounds.append(i)
        j = i - 1
    bounds.append(0)
    bounds.reverse()

    clusters = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        members = np.repeat(run_values[a:b], run_counts[a:b])
        clusters.append(members)
    means = np.array([c.mean() for c in clusters])
    sizes = np.array([c.size for c in clusters], dtype=np.int64)
    return KmeansResult(tuple(clusters), means, sizes, float(dp[k_eff, n_runs - 1]))


@dataclass(frozen=True)
class PpLossReport:
    """Anchor-prior loss terms; total is their exact sum."""

    l_ke: float
    l_eh: float
    l_he: float
    total: float
    top_cluster_sizes: np.ndarray


def _pseudo_label(column: np.ndarray) -> np.ndarray:
    c_tar = column.size
    # three largest entries, ties broken by lower index
    top3 = np.lexsort((np.arange(c_tar), -column))[:3]
    q = np.full(c_tar, 0.1 / (c_tar - 3))
    q[top3] = 0.3
    return q


def pp_loss_raw(p_values: np.ndarray, with_grad: bool = False):
    """Loss terms (and optionally d(total)/dP) for a column-stochastic array.

    The gradient holds the k-means gate, the cluster assignment, and the
    top-3 index set fixed (they are piecewise constant in P).
    """
    p = np.asarray(p_values, dtype=np.float64)
    c_tar, c_anc = p.shape
    if c_tar < 4:
        raise ValueError(f"anchor-prior loss needs at least 4 target classes, got {c_tar}")
    if (p <= 0.0).any():
        raise ValueError("anchor-prior loss requires strictly positive entries")

    grad = np.zeros_like(p) if with_grad else None
    log_p = np.log(p)

    ke_sum = 0.0
    top_sizes = np.zeros(c_anc, dtype=np.int64)
    for j in range(c_anc):
        col = p[:, j]
        result = kmeans_1d(col, 3)
        top_sizes[j] = result.top_cluster_size
        if result.top_cluster_size == 1:
            q = _pseudo_label(col)
            ke_sum += float((col * (log_p[:, j] - np.log(q))).sum())
            if with_grad:
                grad[:, j] += (log_p[:, j] - np.log(q) + 1.0) / c_anc
    l_ke = ke_sum / c_anc

    l_eh = float(-(p * log_p).sum()) / c_anc
    marginal = p.mean(axis=1)
    log_m = np.log(marginal)
    l_he = float((marginal * log_m).sum())
    if with_grad:
        grad += -(log_p + 1.0) / c_anc
        grad += ((log_m + 1.0) / c_anc)[:, None]

    report = PpLossReport(l_ke, l_eh, l_he, l_ke + l_eh + l_he, top_sizes)
    return (report, grad) if with_grad else report


def pp_loss(p: RelationMatrix) -> PpLossReport:
    """Anchor-prior loss of a column-normalized relation matrix."""
    if p.normalization != OVER_TARGETS:
        raise ValueError("pp_loss requires over_targets normalization")
    return pp_loss_raw(p.values)


def uniformity(column: np.ndarray) -> float:
    """Column entropy normalized by ln(C_tar); 1 means exactly uniform."""
    column = np.asarray(column, dtype=np.float64)
    if column.size == 1:
        return 1.0
    return entropy(column) / np.log(column.size)
