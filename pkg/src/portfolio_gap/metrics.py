"""Evaluation statistics: MAE, SROCC, cost matrices, rank tables and Ward clustering."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import PredictionTable, QualityDataset
from .errors import NotAlignedError, UndefinedCorrelationError, ValidationError


def fractional_ranks(x) -> np.ndarray:
    """1-based ranks with tied values sharing the average of their positions."""
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def mae(pred, mos) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    mos = np.asarray(mos, dtype=np.float64).ravel()
    if pred.size == 0 or pred.size != mos.size:
        raise ValidationError("mae needs two non-empty vectors of equal length")
    return float(np.mean(np.abs(pred - mos)))


def srocc(pred, mos) -> float:
    """Spearman rank-order correlation: Pearson correlation of average-tie ranks."""
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(mos, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValidationError("srocc needs two vectors of equal length >= 2")
    ra = fractional_ranks(a)
    rb = fractional_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    saa, sbb = float(ra @ ra), float(rb @ rb)
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelationError("srocc is undefined for a constant vector")
    r = float(ra @ rb) / np.sqrt(saa * sbb)
    return float(min(1.0, max(-1.0, r)))


@dataclass(frozen=True)
class CostMatrix:
    """Per-instance, per-method absolute errors."""

    values: np.ndarray
    method_names: tuple[str, ...]
    ids: tuple[str, ...]

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "method_names", tuple(self.method_names))
        object.__setattr__(self, "ids", tuple(self.ids))
        if v.ndim != 2 or v.shape[1] != len(self.method_names) or v.shape[0] != len(self.ids):
            raise ValidationError("cost matrix shape does not match ids x methods")
        if not (np.all(np.isfinite(v)) and np.all(v >= 0)):
            raise ValidationError("costs must be finite and non-negative")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "CostMatrix":
        rows = np.asarray(rows)
        return CostMatrix(self.values[rows], self.method_names, tuple(np.asarray(self.ids, dtype=object)[rows]))


def cost_matrix(aligned: PredictionTable, ds: QualityDataset, rows="all") -> CostMatrix:
    if not aligned.aligned:
        raise NotAlignedError("cost matrix needs aligned predictions")
    if aligned.n != len(ds):
        raise ValidationError("prediction table and dataset have different row counts")
    idx = ds.indices(rows)
    vals = np.abs(aligned.values[idx] - ds.mos[idx, None])
    return CostMatrix(vals, aligned.method_names, tuple(ds.ids[i] for i in idx))


def rank_count_table(costs: CostMatrix, depth: int = 3) -> np.ndarray:
    """K x depth matrix; entry (k, r) counts instances where method k has the (r+1)-th smallest cost."""
    if not 1 <= depth <= costs.k:
        raise ValidationError(f"depth must be in [1, {costs.k}]")
    # stable sort: equal costs keep portfolio order
    order = np.argsort(costs.values, axis=1, kind="stable")
    table = np.zeros((costs.k, depth), dtype=np.int64)
    for r in range(depth):
        table[:, r] = np.bincount(order[:, r], minlength=costs.k)
    return table


def method_correlation_matrix(aligned: PredictionTable, ds: QualityDataset | None = None, rows="all") -> np.ndarray:
    if not aligned.aligned:
        raise NotAlignedError("correlation matrix needs aligned predictions")
    values = aligned.values if ds is None else aligned.values[ds.indices(rows)]
    if values.shape[0] < 2:
        raise ValidationError("need at least two rows")
    for k, name in enumerate(aligned.method_names):
        if np.all(values[:, k] == values[0, k]):
            raise UndefinedCorrelationError(f"method {name!r} has constant predictions")
    K = values.shape[1]
    out = np.eye(K)
    for j in range(K):
        for k in range(j + 1, K):
            out[j, k] = out[k, j] = srocc(values[:, j], values[:, k])
    return out


def signed_error_pairs(aligned: PredictionTable, ds: QualityDataset, method_a: str, method_b: str,
                       rows="all") -> list[tuple[float, float]]:
    a = aligned.method_index(method_a)
    b = aligned.method_index(method_b)
    idx = ds.indices(rows)
    mos = ds.mos[idx]
    ea = aligned.values[idx, a] - mos
    eb = aligned.values[idx, b] - mos
    return list(zip(ea.tolist(), eb.tolist()))


# -- Ward clustering ---------------------------------------------------------


@dataclass(frozen=True)
class ClusterTree:
    """Merge history over K leaves.

    ``merges[t] = (left, right, height, size)``; leaves are ``0..K-1`` and the
    cluster created by merge ``t`` has id ``K + t`` (the scipy linkage layout).
    """

    labels: tuple[str, ...]
    merges: tuple[tuple[int, int, float, int], ...]

    @property
    def k(self) -> int:
        return len(self.labels)

    def linkage(self) -> np.ndarray:
        return np.array([[a, b, h, s] for a, b, h, s in self.merges], dtype=np.float64).reshape(-1, 4)

    def height(self, node: int) -> float:
        return 0.0 if node < self.k else self.merges[node - self.k][2]

    def leaves(self, node: int) -> list[int]:
        if node < self.k:
            return [node]
        a, b, _, _ = self.merges[node - self.k]
        return self.leaves(a) + self.leaves(b)

    @property
    def root(self) -> int:
        return self.k + len(self.merges) - 1 if self.merges else 0

    def to_newick(self, precision: int = 6) -> str:
        def fmt(x):
            return f"{x:.{precision}g}"

        def label(name):
            if any(c in name for c in " ,;:()[]'"):
                return "'" + name.replace("'", "''") + "'"
            return name

        def rec(node, parent_h):
            bl = fmt(parent_h - self.height(node))
            if node < self.k:
                return f"{label(self.labels[node])}:{bl}"
            a, b, h, _ = self.merges[node - self.k]
            return f"({rec(a, h)},{rec(b, h)}):{bl}"

        if not self.merges:
            return f"{label(self.labels[0])};" if self.labels else ";"
        a, b, h, _ = self.merges[-1]
        return f"({rec(a, h)},{rec(b, h)});"


def correlation_distance(corr) -> np.ndarray:
    d = 1.0 - np.asarray(corr, dtype=np.float64)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def ward_cluster(dist, labels: Sequence[str] | None = None, atol: float = 1e-12) -> ClusterTree:
    """Agglomerative Ward clustering via the Lance-Williams recurrence.

    Among equally distant pairs the one with the smallest (i, j) cluster ids
    is merged first.
    """
    D = np.array(dist, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValidationError("distance matrix must be square")
    K = D.shape[0]
    if K == 0:
        raise ValidationError("distance matrix is empty")
    if not np.all(np.isfinite(D)):
        raise ValidationError("distance matrix must be finite")
    if np.any(D < 0):
        raise ValidationError("distance matrix has negative entries")
    if not np.allclose(D, D.T, rtol=0.0, atol=atol):
        raise ValidationError("distance matrix is not symmetric")
    if np.any(np.abs(np.diag(D)) > atol):
        raise ValidationError("distance matrix diagonal must be zero")
    labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(K))
    if len(labels) != K:
        raise ValidationError("need one label per leaf")

    dist_of = {}
    for i in range(K):
        for j in range(i + 1, K):
            dist_of[(i, j)] = D[i, j]
    size = {i: 1 for i in range(K)}
    active = list(range(K))
    merges = []
    for t in range(K - 1):
        best = None
        for ai, i in enumerate(active):
            for j in active[ai + 1:]:
                d = dist_of[(i, j)]
                if best is None or d < best[0]:
                    best = (d, i, j)
        d_ij, i, j = best
        u = K + t
        ni, nj = size[i], size[j]
        active = [c for c in active if c not in (i, j)]
        for c in active:
            nc = size[c]
            dic = dist_of[(min(i, c), max(i, c))]
            djc = dist_of[(min(j, c), max(j, c))]
            sq = ((ni + nc) * dic * dic + (nj + nc) * djc * djc - nc * d_ij * d_ij) / (ni + nj + nc)
            dist_of[(c, u)] = float(np.sqrt(max(sq, 0.0)))
        size[u] = ni + nj
        active.append(u)
        merges.append((i, j, float(d_ij), ni + nj))
    return ClusterTree(labels, tuple(merges))


# -- CSV exports -------------------------------------------------------------


def write_rank_table_csv(table: np.ndarray, method_names, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *(f"rank{r + 1}" for r in range(table.shape[1]))])
        for name, row in zip(method_names, table):
            w.writerow([name, *(int(v) for v in row)])


def write_matrix_csv(matrix: np.ndarray, method_names, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *method_names])
        for name, row in zip(method_names, matrix):
            w.writerow([name, *(repr(float(v)) for v in row)])


def write_pairs_csv(pairs, ids, name_a, name_b, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", f"{name_a}_error", f"{name_b}_error"])
        for i, (a, b) in zip(ids, pairs):
            w.writerow([i, repr(float(a)), repr(float(b))])
