"""Loading, validation, scaling and splitting of instance-level tables.

All tables are joined on a string ``id`` column; the instance order is the
order of the MOS file.  Arrays held by the tables are marked read-only.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataIOError,
    DegenerateInputError,
    LoadError,
    ParseError,
    ValidationError,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _split_names(which) -> tuple[str, ...]:
    if which is None or which == "all":
        return SPLITS
    if isinstance(which, str):
        which = (which,)
    names = tuple(which)
    for s in names:
        if s not in SPLITS:
            raise ValidationError(f"unknown split {s!r}; expected one of {SPLITS}")
    return names


@dataclass(frozen=True)
class QualityDataset:
    ids: tuple[str, ...]
    mos: np.ndarray
    split: tuple[str, ...]
    scale: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "split", tuple(self.split))
        object.__setattr__(self, "mos", _frozen(self.mos))
        if self.mos.ndim != 1 or len(self.mos) != len(self.ids):
            raise ValidationError("mos must be a vector with one entry per id")
        if len(self.split) != len(self.ids):
            raise ValidationError("every instance needs exactly one split tag")
        _check_ids(self.ids, "mos table")
        bad = [s for s in self.split if s not in SPLITS]
        if bad:
            raise ValidationError(f"unknown split tag {bad[0]!r}")
        if not np.all(np.isfinite(self.mos)):
            i = int(np.flatnonzero(~np.isfinite(self.mos))[0])
            raise ValidationError(f"non-finite mos for id {self.ids[i]!r}")
        if self.scale is not None:
            lo, hi = self.scale
            if self.mos.size and (self.mos.min() < lo or self.mos.max() > hi):
                raise ValidationError(f"mos outside the scale bounds [{lo}, {hi}]")

    def __len__(self):
        return len(self.ids)

    def mask(self, which="all") -> np.ndarray:
        names = _split_names(which)
        return np.array([s in names for s in self.split], dtype=bool)

    def indices(self, which="all") -> np.ndarray:
        return np.flatnonzero(self.mask(which))

    def count(self, which) -> int:
        return int(self.mask(which).sum())


@dataclass(frozen=True)
class PredictionTable:
    method_names: tuple[str, ...]
    values: np.ndarray
    aligned: bool = False
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "method_names", tuple(self.method_names))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))
        v = self.values
        if v.ndim != 2 or v.shape[1] != len(self.method_names):
            raise ValidationError("values must be an N x K matrix with one column per method")
        if self.ids is not None and len(self.ids) != v.shape[0]:
            raise ValidationError("prediction ids do not match the number of rows")
        if len(set(self.method_names)) != len(self.method_names):
            raise ValidationError("method names must be unique")
        if not np.all(np.isfinite(v)):
            raise ValidationError("prediction values must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.method_index(name)]

    def method_index(self, name: str) -> int:
        try:
            return self.method_names.index(name)
        except ValueError:
            raise ValidationError(f"unknown method {name!r}") from None


@dataclass(frozen=True)
class FeatureGroup:
    method: str
    dim: int
    source_path: str = ""


@dataclass(frozen=True)
class FeatureGroupSpec:
    groups: tuple[FeatureGroup, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        names = [g.method for g in self.groups]
        if len(set(names)) != len(names):
            raise ValidationError("feature groups must have unique method names")
        for g in self.groups:
            if int(g.dim) <= 0:
                raise ValidationError(f"feature group {g.method!r} has non-positive dim")

    @property
    def methods(self) -> tuple[str, ...]:
        return tuple(g.method for g in self.groups)

    @property
    def total_dim(self) -> int:
        return sum(int(g.dim) for g in self.groups)

    def check_methods(self, method_names: Iterable[str]):
        known = set(method_names)
        extra = [m for m in self.methods if m not in known]
        if extra:
            raise ValidationError(f"feature group {extra[0]!r} is not a portfolio method")


@dataclass(frozen=True)
class FeatureTable:
    """N x D feature matrix with a column range per feature group."""

    values: np.ndarray
    groups: tuple[tuple[str, int, int], ...]
    ids: tuple[str, ...] | None = None
    columns: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "groups", tuple((str(g), int(a), int(b)) for g, a, b in self.groups))
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))
        v = self.values
        if v.ndim != 2:
            raise ValidationError("features must be a 2-D matrix")
        pos = 0
        for name, start, stop in self.groups:
            if start != pos or stop <= start:
                raise ValidationError(f"feature group {name!r} has a bad column range")
            pos = stop
        if pos != v.shape[1]:
            raise ValidationError("feature group ranges do not cover all columns")
        if not np.all(np.isfinite(v)):
            raise ValidationError("feature table contains missing or non-finite values")
        if self.columns is None:
            cols = tuple(f"{g}_{j + 1}" for g, a, b in self.groups for j in range(b - a))
            object.__setattr__(self, "columns", cols)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def group(self, name: str) -> np.ndarray:
        for g, a, b in self.groups:
            if g == name:
                return self.values[:, a:b]
        raise ValidationError(f"unknown feature group {name!r}")

    @classmethod
    def from_blocks(cls, blocks: Sequence[tuple[str, np.ndarray]], ids=None) -> "FeatureTable":
        groups, pos = [], 0
        for name, block in blocks:
            w = np.asarray(block).shape[1]
            groups.append((name, pos, pos + w))
            pos += w
        n = len(ids) if ids is not None else (np.asarray(blocks[0][1]).shape[0] if blocks else 0)
        values = np.hstack([np.asarray(b, dtype=np.float64) for _, b in blocks]) if blocks else np.zeros((n, 0))
        return cls(values, tuple(groups), ids)


def _check_ids(ids, where):
    seen = set()
    for i in ids:
        if not i:
            raise ValidationError(f"{where}: empty id")
        if i in seen:
            raise ValidationError(f"{where}: duplicate id {i!r}")
        seen.add(i)


# -- CSV I/O -----------------------------------------------------------------


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"file not found: {path}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    return header, body


def _parse_float(cell, path, row, column):
    try:
        x = float(cell)
    except ValueError:
        raise ParseError(path, row, column, cell) from None
    if not np.isfinite(x):
        raise ParseError(path, row, column, cell)
    return x


def _numeric_block(path, header, body, first_col=1):
    ncol = len(header)
    out = np.empty((len(body), ncol - first_col))
    for r, row in enumerate(body):
        if len(row) != ncol:
            raise ValidationError(f"{path}: row {r + 2} has {len(row)} cells, expected {ncol}")
        for c in range(first_col, ncol):
            out[r, c - first_col] = _parse_float(row[c].strip(), path, r + 2, header[c])
    return out


def _join(ids_wanted, ids_have, path):
    pos = {}
    for r, i in enumerate(ids_have):
        if i in pos:
            raise ValidationError(f"{path}: duplicate id {i!r}")
        pos[i] = r
    missing = [i for i in ids_wanted if i not in pos]
    if missing:
        raise LoadError(f"{path}: missing id {missing[0]!r}")
    extra = len(ids_have) - len(ids_wanted)
    if extra > 0:
        logger.warning("%s: ignoring %d ids not present in the mos table", path, extra)
    return np.array([pos[i] for i in ids_wanted], dtype=int)


def load_mos(path, default_split: str = "train") -> QualityDataset:
    header, body = _read_csv(path)
    if header[:2] != ["id", "mos"] or len(header) > 3 or (len(header) == 3 and header[2] != "split"):
        raise ValidationError(f"{path}: header must be 'id,mos[,split]', got {','.join(header)}")
    ids = [row[0].strip() for row in body]
    _check_ids(ids, str(path))
    mos = np.array([_parse_float(row[1].strip(), path, r + 2, "mos") for r, row in enumerate(body)])
    if len(header) == 3:
        split = [row[2].strip() if len(row) > 2 else "" for row in body]
        for r, s in enumerate(split):
            if s not in SPLITS:
                raise ValidationError(f"{path}: row {r + 2}: bad split tag {s!r}")
    else:
        split = [default_split] * len(ids)
    return QualityDataset(tuple(ids), mos, tuple(split))


def load_predictions(path, ids: Sequence[str]) -> PredictionTable:
    header, body = _read_csv(path)
    if not header or header[0] != "id" or len(header) < 2:
        raise ValidationError(f"{path}: header must be 'id,<method1>,...'")
    values = _numeric_block(path, header, body)
    order = _join(ids, [row[0].strip() for row in body], path)
    return PredictionTable(tuple(header[1:]), values[order], aligned=False, ids=tuple(ids))


def load_feature_manifest(path) -> FeatureGroupSpec:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    entries = doc.get("groups") if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: expected a list of {{method, dim, path}} entries")
    groups = []
    for e in entries:
        if not isinstance(e, dict) or set(e) != {"method", "dim", "path"}:
            raise ValidationError(f"{path}: each entry needs exactly the keys method, dim, path")
        src = Path(e["path"])
        if not src.is_absolute():
            src = path.parent / src
        groups.append(FeatureGroup(str(e["method"]), int(e["dim"]), str(src)))
    return FeatureGroupSpec(tuple(groups))


def load_features(spec: FeatureGroupSpec, ids: Sequence[str]) -> FeatureTable:
    blocks = []
    for g in spec.groups:
        header, body = _read_csv(g.source_path)
        if header[0] != "id":
            raise ValidationError(f"{g.source_path}: header must start with 'id'")
        if len(header) - 1 != g.dim:
            raise ValidationError(
                f"{g.source_path}: group {g.method!r} declares dim {g.dim} but has {len(header) - 1} columns"
            )
        for r, row in enumerate(body):
            for c, cell in enumerate(row[1:], start=1):
                if cell.strip() == "" or cell.strip().lower() in ("nan", "na", "null"):
                    raise LoadError(f"{g.source_path}: row {r + 2}, column {header[c]!r}: missing feature value")
        values = _numeric_block(g.source_path, header, body)
        order = _join(ids, [row[0].strip() for row in body], g.source_path)
        blocks.append((g.method, values[order]))
    return FeatureTable.from_blocks(blocks, ids=tuple(ids))


def load_dataset(mos_path, predictions_path, feature_manifest_path=None):
    """Load the MOS table, the raw predictions and (optionally) the feature groups.

    Returns ``(dataset, predictions, features)`` where ``features`` is None
    when no manifest is given.  Predictions come back unaligned.
    """
    ds = load_mos(mos_path)
    preds = load_predictions(predictions_path, ds.ids)
    features = None
    if feature_manifest_path is not None:
        spec = load_feature_manifest(feature_manifest_path)
        spec.check_methods(preds.method_names)
        features = load_features(spec, ds.ids)
    return ds, preds, features


def _fmt(x) -> str:
    return repr(float(x))


def write_mos_csv(ds: QualityDataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "mos", "split"])
        for i, m, s in zip(ds.ids, ds.mos, ds.split):
            w.writerow([i, _fmt(m), s])


def write_predictions_csv(preds: PredictionTable, ids: Sequence[str], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *preds.method_names])
        for i, row in zip(ids, preds.values):
            w.writerow([i, *(_fmt(v) for v in row)])


def write_feature_group_csv(ids: Sequence[str], block: np.ndarray, path):
    block = np.asarray(block)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *(f"f{j + 1}" for j in range(block.shape[1]))])
        for i, row in zip(ids, block):
            w.writerow([i, *(_fmt(v) for v in row)])


def write_feature_manifest(features: FeatureTable, directory, name="features.json") -> Path:
    """Write one CSV per feature group plus the JSON manifest pointing at them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = features.ids or tuple(str(i) for i in range(features.values.shape[0]))
    entries = []
    for g, a, b in features.groups:
        fname = f"features_{g}.csv"
        write_feature_group_csv(ids, features.values[:, a:b], directory / fname)
        entries.append({"method": g, "dim": b - a, "path": fname})
    out = directory / name
    out.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    return out


# -- transformations ---------------------------------------------------------


def scale_mos(ds: QualityDataset, lo: float = 0.0, hi: float = 100.0) -> QualityDataset:
    """Min-max map the raw scores onto ``[lo, hi]``."""
    if not hi > lo:
        raise ValidationError("scale bounds must satisfy lo < hi")
    raw = ds.mos
    mn, mx = float(raw.min()), float(raw.max())
    if not mx > mn:
        raise DegenerateInputError("cannot scale mos: all raw scores are equal")
    scaled = lo + (raw - mn) / (mx - mn) * (hi - lo)
    # guard against rounding just outside the interval
    scaled = np.clip(scaled, lo, hi)
    return QualityDataset(ds.ids, scaled, ds.split, scale=(float(lo), float(hi)))


def split_dataset(ds: QualityDataset, seed: int, val_count: int) -> QualityDataset:
    """Re-tag ``val_count`` train instances as validation, drawn uniformly without replacement."""
    if val_count < 0:
        raise ValidationError("val_count must be non-negative")
    train = ds.indices("train")
    if val_count == 0:
        return ds
    if val_count >= len(train):
        raise ValidationError(f"val_count={val_count} must be smaller than the train size {len(train)}")
    rng = np.random.default_rng(seed)
    chosen = train[rng.choice(len(train), size=val_count, replace=False)]
    split = list(ds.split)
    for i in chosen:
        split[i] = "val"
    return QualityDataset(ds.ids, ds.mos, tuple(split), ds.scale)


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        os.makedirs(p, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create directory {p}: {exc}") from exc
    return p
