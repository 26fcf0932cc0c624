"""Column standardization and per-group PCA reduction of feature tables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FeatureGroupSpec, FeatureTable, QualityDataset
from .errors import PortfolioError, ValidationError


def _ro(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ScalerModel:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _ro(self.mean))
        object.__setattr__(self, "std", _ro(self.std))
        if np.any(self.std < 0):
            raise ValidationError("std must be non-negative")

    @property
    def constant(self) -> np.ndarray:
        return self.std <= 1e-12 * (1.0 + np.abs(self.mean))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ScalerModel":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def standardize_fit(X) -> ScalerModel:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("standardize_fit needs a non-empty 2-D matrix")
    return ScalerModel(X.mean(axis=0), X.std(axis=0))


def standardize_apply(model: ScalerModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.mean.size:
        raise ValidationError(f"expected {model.mean.size} columns, got {X.shape[-1]}")
    const = model.constant
    scale = np.where(const, 1.0, model.std)
    out = (X - model.mean) / scale
    out[..., const] = 0.0
    return out


@dataclass(frozen=True)
class PcaModel:
    """Top-k principal axes; ``components`` rows are orthonormal."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    group: str = ""
    scaler: ScalerModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "mean", _ro(self.mean))
        object.__setattr__(self, "components", _ro(self.components))
        object.__setattr__(self, "explained_variance", _ro(self.explained_variance))

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "PcaModel":
        comps = np.asarray(d["components"], dtype=np.float64)
        return cls(
            np.asarray(d["mean"], dtype=np.float64),
            comps.reshape(len(d["components"]), -1),
            np.asarray(d["explained_variance"], dtype=np.float64),
            d.get("group", ""),
            None if d.get("scaler") is None else ScalerModel.from_dict(d["scaler"]),
        )


def pca_fit(X, k: int, group: str = "", scaler: ScalerModel | None = None) -> PcaModel:
    """Top-k principal components of the column-centred data via thin SVD.

    Each component is oriented so that its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("pca_fit needs a 2-D matrix")
    n, D = X.shape
    if n < 2:
        raise ValidationError("pca_fit needs at least 2 rows")
    if not 1 <= k <= min(n - 1, D):
        raise ValidationError(f"k={k} out of range [1, {min(n - 1, D)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:k].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    var = s[:k] ** 2 / (n - 1)
    return PcaModel(mean, comps, var, group, scaler)


def pca_transform(model: PcaModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.dim:
        raise ValidationError(f"expected {model.dim} columns, got {X.shape[-1]}")
    return (X - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, scores) -> np.ndarray:
    return model.mean + np.asarray(scores, dtype=np.float64) @ model.components


def _reduce_block(model: PcaModel, block):
    if model.scaler is not None:
        block = standardize_apply(model.scaler, block)
    return pca_transform(model, block)


def reduce_feature_groups(features: FeatureTable, spec: FeatureGroupSpec | None = None, cap: int = 100,
                          ds: QualityDataset | None = None, fit_rows="train", standardize: bool = True):
    """Replace every group wider than ``cap`` by its top-``cap`` PCA scores.

    The PCA (and the optional pre-standardization) is fitted on ``fit_rows``
    of ``ds`` only, or on all rows when no dataset is given.  Returns the new
    table and one PcaModel per reduced group, in group order.
    """
    if cap < 1:
        raise ValidationError("cap must be >= 1")
    if spec is not None:
        dims = {g.method: int(g.dim) for g in spec.groups}
        for name, a, b in features.groups:
            if name in dims and dims[name] != b - a:
                raise ValidationError(f"group {name!r}: table has {b - a} columns, manifest declares {dims[name]}")
    rows = np.arange(features.values.shape[0]) if ds is None else ds.indices(fit_rows)
    blocks, models = [], []
    for name, a, b in features.groups:
        block = features.values[:, a:b]
        if b - a <= cap:
            blocks.append((name, block))
            continue
        train = block[rows]
        scaler = standardize_fit(train) if standardize else None
        if scaler is not None:
            train = standardize_apply(scaler, train)
        try:
            model = pca_fit(train, cap, group=name, scaler=scaler)
        except PortfolioError as exc:
            raise type(exc)(f"feature group {name!r}: {exc}") from exc
        models.append(model)
        blocks.append((name, _reduce_block(model, block)))
    return FeatureTable.from_blocks(blocks, ids=features.ids), models


def apply_reduction(features: FeatureTable, models) -> FeatureTable:
    """Re-apply fitted group reductions to a new feature table."""
    by_group = {m.group: m for m in models}
    blocks = []
    for name, a, b in features.groups:
        block = features.values[:, a:b]
        m = by_group.get(name)
        blocks.append((name, block if m is None else _reduce_block(m, block)))
    return FeatureTable.from_blocks(blocks, ids=features.ids)
