"""Single best method, oracle assignment, selector evaluation and method exclusion."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..dataset import FeatureGroupSpec, FeatureTable, PredictionTable, QualityDataset
from ..errors import UndefinedCorrelationError, ValidationError
from ..metrics import CostMatrix, srocc


def single_best(costs: CostMatrix) -> int:
    """Index of the method with the lowest total cost; ties go to the lower index."""
    if costs.n == 0 or costs.k == 0:
        raise ValidationError("single_best needs a non-empty cost matrix")
    return int(np.argmin(costs.values.sum(axis=0)))


def oracle_assign(costs: CostMatrix):
    """Per-instance argmin of the costs.

    Returns ``(picks, oracle_mae, pick_counts)``.
    """
    if costs.n == 0 or costs.k == 0:
        raise ValidationError("oracle_assign needs a non-empty cost matrix")
    picks = np.argmin(costs.values, axis=1)
    oracle_mae = float(np.mean(costs.values[np.arange(costs.n), picks]))
    counts = np.bincount(picks, minlength=costs.k)
    return picks, oracle_mae, counts


def gap_closure(sbm_mae: float, as_mae: float, oracle_mae: float) -> float:
    gap = sbm_mae - oracle_mae
    if gap == 0:
        return 0.0
    return float((sbm_mae - as_mae) / gap)


def cost_rows(costs: CostMatrix, ids) -> np.ndarray:
    """Row positions in ``costs`` for the given instance ids."""
    ids = tuple(ids)
    if ids == costs.ids:
        return np.arange(costs.n)
    pos = {i: r for r, i in enumerate(costs.ids)}
    try:
        return np.array([pos[i] for i in ids], dtype=int)
    except KeyError as exc:
        raise ValidationError(f"cost matrix has no row for id {exc.args[0]!r}") from None


@dataclass
class EvalReport:
    mae: float
    srocc: float | None
    pick_counts: list[int]
    oracle_mae: float
    sbm_mae: float
    gap_closure: float
    picks: list[int]
    ids: list[str] = field(default_factory=list)
    method_names: list[str] = field(default_factory=list)
    sbm_index: int = 0
    oracle_pick_counts: list[int] = field(default_factory=list)
    pick_accuracy: float = 0.0
    assembled_scores: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.picks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sbm_method"] = self.method_names[self.sbm_index] if self.method_names else None
        return d

    def write_json(self, path, extra: dict | None = None):
        doc = self.to_dict()
        if extra:
            doc = {**extra, **doc}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    def write_picks_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "chosen_method", "assembled_score"])
            for i, p, s in zip(self.ids, self.picks, self.assembled_scores):
                w.writerow([i, self.method_names[p], repr(float(s))])


def evaluate_picks(picks, costs: CostMatrix, aligned: PredictionTable, ds: QualityDataset, rows="test",
                   sbm_index: int | None = None) -> EvalReport:
    """Score a vector of per-instance picks on ``rows`` of the dataset.

    ``picks`` has one entry per evaluated row.  The single best method is
    taken from the train rows unless ``sbm_index`` is given; without train
    rows it falls back to the evaluated rows.
    """
    idx = ds.indices(rows)
    if idx.size == 0:
        raise ValidationError(f"no instances in rows {rows!r}")
    picks = np.asarray(picks, dtype=int).ravel()
    if picks.size != idx.size:
        raise ValidationError("need exactly one pick per evaluated row")
    K = costs.k
    if np.any((picks < 0) | (picks >= K)):
        raise ValidationError("pick outside the portfolio")
    ids = [ds.ids[i] for i in idx]
    C = costs.values[cost_rows(costs, ids)]
    if sbm_index is None:
        train = ds.indices("train")
        ref = costs.take(cost_rows(costs, [ds.ids[i] for i in train])) if train.size else CostMatrix(C, costs.method_names, ids)
        sbm_index = single_best(ref)
    r = np.arange(idx.size)
    as_mae = float(np.mean(C[r, picks]))
    sbm_mae = float(np.mean(C[r, np.full(idx.size, sbm_index)]))
    opicks = np.argmin(C, axis=1)
    oracle_mae = float(np.mean(C[r, opicks]))
    assembled = aligned.values[idx, picks]
    try:
        rho = srocc(assembled, ds.mos[idx])
    except (UndefinedCorrelationError, ValidationError):
        rho = None
    return EvalReport(
        mae=as_mae,
        srocc=rho,
        pick_counts=np.bincount(picks, minlength=K).tolist(),
        oracle_mae=oracle_mae,
        sbm_mae=sbm_mae,
        gap_closure=gap_closure(sbm_mae, as_mae, oracle_mae),
        picks=picks.tolist(),
        ids=ids,
        method_names=list(costs.method_names),
        sbm_index=int(sbm_index),
        oracle_pick_counts=np.bincount(opicks, minlength=K).tolist(),
        pick_accuracy=float(np.mean(C[r, picks] == C[r, opicks])),
        assembled_scores=assembled.tolist(),
    )


def evaluate_selector(selector, features: FeatureTable, costs: CostMatrix, aligned: PredictionTable,
                      ds: QualityDataset, rows="test") -> EvalReport:
    idx = ds.indices(rows)
    if idx.size == 0:
        raise ValidationError(f"no instances in rows {rows!r}")
    picks = selector.select_many(features.values[idx])
    return evaluate_picks(picks, costs, aligned, ds, rows, sbm_index=selector.sbm_index)


def exclude_method(*tables, method: str):
    """Drop ``method`` consistently from every given table.

    Accepts PredictionTable, CostMatrix, FeatureTable and FeatureGroupSpec
    objects and returns them in the same order.
    """
    portfolios = [t for t in tables if isinstance(t, (PredictionTable, CostMatrix))]
    if not portfolios:
        raise ValidationError("exclude_method needs at least one prediction or cost table")
    out = []
    for t in tables:
        if isinstance(t, (PredictionTable, CostMatrix)):
            if method not in t.method_names:
                raise ValidationError(f"unknown method {method!r}")
            if len(t.method_names) == 1:
                raise ValidationError(f"removing {method!r} would leave an empty portfolio")
            keep = [k for k, m in enumerate(t.method_names) if m != method]
            names = tuple(t.method_names[k] for k in keep)
            if isinstance(t, PredictionTable):
                out.append(PredictionTable(names, t.values[:, keep], t.aligned, t.ids))
            else:
                out.append(CostMatrix(t.values[:, keep], names, t.ids))
        elif isinstance(t, FeatureTable):
            blocks = [(g, t.values[:, a:b]) for g, a, b in t.groups if g != method]
            out.append(FeatureTable.from_blocks(blocks, ids=t.ids))
        elif isinstance(t, FeatureGroupSpec):
            out.append(FeatureGroupSpec(tuple(g for g in t.groups if g.method != method)))
        else:
            raise ValidationError(f"cannot exclude a method from {type(t).__name__}")
    return out[0] if len(out) == 1 else tuple(out)
