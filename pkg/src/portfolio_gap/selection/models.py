"""Selector configurations, the desk-scale model zoo, and selector (de)serialization.

Two selection modes are supported: ``direct_class`` models predict the
best method as a class label, ``argmin_error`` models predict every
method's absolute error and pick the smallest.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import softmax

from ..dataset import FeatureTable, QualityDataset
from ..errors import DataIOError, ValidationError
from ..features import PcaModel, ScalerModel, pca_fit, pca_transform, standardize_apply, standardize_fit
from ..metrics import CostMatrix
from .core import cost_rows, oracle_assign

FORMAT_VERSION = 1

MODEL_KINDS = ("constant_sbm", "knn", "decision_forest", "multinomial_linear", "error_regressors")

_DEFAULTS = {
    "constant_sbm": {},
    "knn": {"k": 5, "target": "label"},
    "decision_forest": {"trees": 100, "depth": None, "min_leaf": 1},
    "multinomial_linear": {"l2": 1e-3, "epochs": 300, "lr": 0.5},
    "error_regressors": {"hidden": [32], "l2": 1e-4, "epochs": 300, "lr": 0.01},
}


@dataclass(frozen=True)
class SelectorConfig:
    model_kind: str
    hyperparams: dict = field(default_factory=dict)
    scaling: bool = True
    pca: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValidationError(f"unknown model_kind {self.model_kind!r}")
        unknown = set(self.hyperparams) - set(_DEFAULTS[self.model_kind])
        if unknown:
            raise ValidationError(f"{self.model_kind}: unknown hyperparameter(s) {sorted(unknown)}")
        if self.pca is not None and int(self.pca) < 1:
            raise ValidationError("pca dim must be >= 1 when on")
        hp = self.params
        kind = self.model_kind
        if kind == "knn":
            if int(hp["k"]) < 1:
                raise ValidationError("knn: k must be >= 1")
            if hp["target"] not in ("label", "cost"):
                raise ValidationError("knn: target must be 'label' or 'cost'")
        elif kind == "decision_forest":
            if int(hp["trees"]) < 1 or int(hp["min_leaf"]) < 1:
                raise ValidationError("decision_forest: trees and min_leaf must be >= 1")
            if hp["depth"] is not None and int(hp["depth"]) < 1:
                raise ValidationError("decision_forest: depth must be >= 1 or null")
        elif kind in ("multinomial_linear", "error_regressors"):
            if float(hp["l2"]) < 0 or int(hp["epochs"]) < 1 or float(hp["lr"]) <= 0:
                raise ValidationError(f"{kind}: need l2 >= 0, epochs >= 1 and lr > 0")
            if kind == "error_regressors" and any(int(w) < 1 for w in hp["hidden"]):
                raise ValidationError("error_regressors: hidden widths must be >= 1")

    @property
    def params(self) -> dict:
        return {**_DEFAULTS[self.model_kind], **self.hyperparams}

    @property
    def mode(self) -> str:
        if self.model_kind == "error_regressors":
            return "argmin_error"
        if self.model_kind == "knn" and self.params["target"] == "cost":
            return "argmin_error"
        return "direct_class"

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "hyperparams": copy.deepcopy(dict(self.hyperparams)),
            "scaling": self.scaling,
            "pca": self.pca,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectorConfig":
        unknown = set(d) - {"model_kind", "hyperparams", "scaling", "pca", "seed"}
        if unknown:
            raise ValidationError(f"selector config: unknown key(s) {sorted(unknown)}")
        if "model_kind" not in d:
            raise ValidationError("selector config needs a model_kind")
        return cls(d["model_kind"], dict(d.get("hyperparams") or {}), bool(d.get("scaling", True)),
                   d.get("pca"), int(d.get("seed", 0)))


# -- models -----------------------------------------------------------------


class ConstantModel:
    kind = "constant_sbm"

    def __init__(self, index=0):
        self.index = int(index)

    def fit(self, X, C, labels, hp, rng, val=None):
        self.index = int(np.argmin(C.sum(axis=0)))
        self.k = C.shape[1]
        return self

    def scores(self, X):
        s = np.zeros((X.shape[0], self.k))
        s[:, self.index] = 1.0
        return s

    def to_dict(self):
        return {"index": self.index, "k": self.k}

    @classmethod
    def from_dict(cls, d):
        m = cls(d["index"])
        m.k = int(d["k"])
        return m


class KnnModel:
    """k-nearest neighbours on (optionally standardized) Euclidean features."""

    kind = "knn"

    def fit(self, X, C, labels, hp, rng, val=None):
        self.X = np.asarray(X, dtype=np.float64)
        self.C = np.asarray(C, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=int)
        self.n_neighbors = int(hp["k"])
        self.target = hp["target"]
        self._tree = None
        return self

    def _neighbors(self, X):
        if self._tree is None:
            self._tree = cKDTree(self.X)
        k = min(self.n_neighbors, self.X.shape[0])
        _, nb = self._tree.query(np.asarray(X, dtype=np.float64), k=k)
        return nb.reshape(len(X), k)

    def scores(self, X):
        nb = self._neighbors(X)
        K = self.C.shape[1]
        if self.target == "cost":
            # negated so that argmax picks the smallest mean neighbour cost
            return -self.C[nb].mean(axis=1)
        votes = np.zeros((len(X), K))
        for j in range(nb.shape[1]):
            np.add.at(votes, (np.arange(len(X)), self.labels[nb[:, j]]), 1.0)
        return votes

    def predicted_errors(self, X):
        return self.C[self._neighbors(X)].mean(axis=1)

    def to_dict(self):
        return {"X": self.X.tolist(), "C": self.C.tolist(), "labels": self.labels.tolist(),
                "k": self.n_neighbors, "target": self.target}

    @classmethod
    def from_dict(cls, d):
        m = cls()
        m.X = np.asarray(d["X"], dtype=np.float64).reshape(len(d["labels"]), -1)
        m.C = np.asarray(d["C"], dtype=np.float64)
        m.labels = np.asarray(d["labels"], dtype=int)
        m.n_neighbors = int(d["k"])
        m.target = d["target"]
        m._tree = None
        return m


class ForestModel:
    """Bagged CART trees (gini, sqrt feature subsampling).

    Trees are grown with scikit-learn and stored as flat node arrays, so a
    deserialized forest predicts without scikit-learn objects.
    """

    kind = "decision_forest"

    def fit(self, X, C, labels, hp, rng, val=None):
        from sklearn.ensemble import RandomForestClassifier

        self.k = C.shape[1]
        forest = RandomForestClassifier(
            n_estimators=int(hp["trees"]),
            max_depth=None if hp["depth"] is None else int(hp["depth"]),
            min_samples_leaf=int(hp["min_leaf"]),
            criterion="gini",
            max_features="sqrt",
            bootstrap=True,
            random_state=int(rng.integers(2**31 - 1)),
            n_jobs=1,
        )
        forest.fit(X, labels)
        classes = forest.classes_.astype(int)
        self.trees = []
        for est in forest.estimators_:
            t = est.tree_
            value = t.value[:, 0, :]
            value = value / np.maximum(value.sum(axis=1, keepdims=True), 1e-300)
            full = np.zeros((t.node_count, self.k))
            full[:, classes] = value
            self.trees.append({
                "left": t.children_left.astype(int),
                "right": t.children_right.astype(int),
                "feature": t.feature.astype(int),
                "threshold": t.threshold.astype(np.float64),
                "value": full,
            })
        return self

    def scores(self, X):
        # the tree thresholds were learned on float32 copies of the data
        X = np.asarray(X, dtype=np.float32).astype(np.float64)
        n = X.shape[0]
        rows = np.arange(n)
        out = np.zeros((n, self.k))
        for t in self.trees:
            node = np.zeros(n, dtype=int)
            while True:
                inner = t["left"][node] != -1
                if not inner.any():
                    break
                f = t["feature"][node[inner]]
                go_left = X[rows[inner], f] <= t["threshold"][node[inner]]
                node[inner] = np.where(go_left, t["left"][node[inner]], t["right"][node[inner]])
            out += t["value"][node]
        return out / len(self.trees)

    def to_dict(self):
        return {"k": self.k, "trees": [{key: v.tolist() for key, v in t.items()} for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        m = cls()
        m.k = int(d["k"])
        m.trees = []
        for t in d["trees"]:
            m.trees.append({
                "left": np.asarray(t["left"], dtype=int),
                "right": np.asarray(t["right"], dtype=int),
                "feature": np.asarray(t["feature"], dtype=int),
                "threshold": np.asarray(t["threshold"], dtype=np.float64),
                "value": np.asarray(t["value"], dtype=np.float64).reshape(len(t["left"]), m.k),
            })
        return m


def _val_selection_mae(scores, C):
    return float(np.mean(C[np.arange(len(C)), np.argmax(scores, axis=1)]))


class LinearModel:
    """Softmax regression trained by full-batch gradient descent with a fixed step."""

    kind = "multinomial_linear"
    eval_every = 10

    def fit(self, X, C, labels, hp, rng, val=None):
        n, D = X.shape
        K = C.shape[1]
        Y = np.zeros((n, K))
        Y[np.arange(n), labels] = 1.0
        W = np.zeros((D, K))
        b = np.zeros(K)
        lr, l2 = float(hp["lr"]), float(hp["l2"])
        best = None
        for epoch in range(int(hp["epochs"])):
            P = softmax(X @ W + b, axis=1)
            G = (P - Y) / n
            W -= lr * (X.T @ G + l2 * W)
            b -= lr * G.sum(axis=0)
            if val is not None and (epoch + 1) % self.eval_every == 0:
                score = _val_selection_mae(val[0] @ W + b, val[1])
                if best is None or score < best[0]:
                    best = (score, W.copy(), b.copy())
        if best is not None:
            _, W, b = best
        self.W, self.b = W, b
        return self

    def scores(self, X):
        return softmax(np.asarray(X) @ self.W + self.b, axis=1)

    def to_dict(self):
        return {"W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d):
        m = cls()
        m.b = np.asarray(d["b"], dtype=np.float64)
        m.W = np.asarray(d["W"], dtype=np.float64).reshape(-1, m.b.size)
        return m


class ErrorRegressors:
    """One small MLP (or linear model) per method predicting that method's absolute error.

    All heads share the preprocessing stem; each is trained on its own cost
    column with a mean-absolute-error loss using full-batch Adam.
    """

    kind = "error_regressors"
    eval_every = 10

    def fit(self, X, C, labels, hp, rng, val=None):
        n, D = X.shape
        K = C.shape[1]
        widths = [D, *[int(w) for w in hp["hidden"]], 1]
        params = []
        for a, b in zip(widths[:-1], widths[1:]):
            params.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(K, a, b)))
            params.append(np.zeros((K, b)))
        params[-1][:, 0] = np.median(C, axis=0)
        lr, l2 = float(hp["lr"]), float(hp["l2"])
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        b1, b2, eps = 0.9, 0.999, 1e-8
        best = None
        for epoch in range(int(hp["epochs"])):
            pred, cache = self._forward(params, X)
            grad_out = np.sign(pred - C.T[:, :, None]) / n
            grads = self._backward(params, cache, grad_out)
            t = epoch + 1
            for i, (p, g) in enumerate(zip(params, grads)):
                if i % 2 == 0:
                    g = g + l2 * p
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                p -= lr * (m[i] / (1 - b1**t)) / (np.sqrt(v[i] / (1 - b2**t)) + eps)
            if val is not None and t % self.eval_every == 0:
                vp, _ = self._forward(params, val[0])
                loss = float(np.mean(np.abs(vp[:, :, 0].T - val[1])))
                if best is None or loss < best[0]:
                    best = (loss, [p.copy() for p in params])
        self.params = best[1] if best is not None else params
        return self

    @staticmethod
    def _forward(params, X):
        h = np.broadcast_to(np.asarray(X, dtype=np.float64), (params[0].shape[0], *np.shape(X)))
        cache = [h]
        n_layers = len(params) // 2
        for layer in range(n_layers):
            W, b = params[2 * layer], params[2 * layer + 1]
            z = np.einsum("knd,kdh->knh", h, W) + b[:, None, :]
            h = np.maximum(z, 0.0) if layer < n_layers - 1 else z
            cache.append(h)
        return h, cache

    @staticmethod
    def _backward(params, cache, grad_out):
        grads = [None] * len(params)
        g = grad_out
        n_layers = len(params) // 2
        for layer in reversed(range(n_layers)):
            h_in = cache[layer]
            grads[2 * layer] = np.einsum("knd,knh->kdh", h_in, g)
            grads[2 * layer + 1] = g.sum(axis=1)
            if layer > 0:
                g = np.einsum("knh,kdh->knd", g, params[2 * layer]) * (cache[layer] > 0)
        return grads

    def predicted_errors(self, X):
        pred, _ = self._forward(self.params, X)
        return pred[:, :, 0].T

    def scores(self, X):
        return -self.predicted_errors(X)

    def to_dict(self):
        return {"shapes": [list(p.shape) for p in self.params], "params": [p.ravel().tolist() for p in self.params]}

    @classmethod
    def from_dict(cls, d):
        m = cls()
        m.params = [np.asarray(p, dtype=np.float64).reshape(s) for p, s in zip(d["params"], d["shapes"])]
        return m


_MODELS = {cls.kind: cls for cls in (ConstantModel, KnnModel, ForestModel, LinearModel, ErrorRegressors)}


# -- selector ---------------------------------------------------------------


@dataclass
class Selector:
    """A fitted mapping from a feature row to a portfolio method index."""

    config: SelectorConfig
    method_names: tuple[str, ...]
    n_features: int
    model: object
    sbm_index: int = 0
    scaler: ScalerModel | None = None
    pca: PcaModel | None = None

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def k(self) -> int:
        return len(self.method_names)

    def preprocess(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValidationError(f"selector expects {self.n_features} features, got {X.shape[1]}")
        if self.scaler is not None:
            X = standardize_apply(self.scaler, X)
        if self.pca is not None:
            X = pca_transform(self.pca, X)
        return X

    def predicted_errors(self, X) -> np.ndarray:
        if self.mode != "argmin_error":
            raise ValidationError("predicted errors are only available in argmin_error mode")
        return self.model.predicted_errors(self.preprocess(X))

    def select_many(self, X) -> np.ndarray:
        X = self.preprocess(X)
        if self.mode == "argmin_error":
            errs = self.model.predicted_errors(X)
            if not np.all(np.isfinite(errs)):
                raise ValidationError("selector produced non-finite error predictions")
            return np.argmin(errs, axis=1)
        return np.argmax(self.model.scores(X), axis=1)

    def select(self, row) -> int:
        row = np.asarray(row, dtype=np.float64)
        if row.ndim != 1:
            raise ValidationError("select expects a single feature row")
        return int(self.select_many(row[None, :])[0])

    def to_dict(self) -> dict:
        return {
            "format": "portfolio-gap-selector",
            "version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "method_names": list(self.method_names),
            "n_features": self.n_features,
            "sbm_index": self.sbm_index,
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
            "pca": None if self.pca is None else self.pca.to_dict(),
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Selector":
        if d.get("format") != "portfolio-gap-selector":
            raise ValidationError("not a serialized selector")
        if d.get("version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported selector version {d.get('version')!r}")
        config = SelectorConfig.from_dict(d["config"])
        model = _MODELS[config.model_kind].from_dict(d["model"])
        return cls(
            config,
            tuple(d["method_names"]),
            int(d["n_features"]),
            model,
            int(d["sbm_index"]),
            None if d["scaler"] is None else ScalerModel.from_dict(d["scaler"]),
            None if d["pca"] is None else PcaModel.from_dict(d["pca"]),
        )


def save_selector(selector: Selector, path, extra: dict | None = None):
    doc = selector.to_dict()
    if extra:
        doc["extra"] = extra
    try:
        Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def load_selector(path) -> tuple[Selector, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return Selector.from_dict(doc), doc.get("extra") or {}


def fit_selector(config: SelectorConfig, X, C, method_names, X_val=None, C_val=None) -> Selector:
    """Fit a selector on raw feature rows ``X`` and the matching cost rows ``C``."""
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("cannot train a selector on an empty train split")
    if C.shape != (X.shape[0], len(method_names)):
        raise ValidationError("features and costs are not row-aligned")
    rng = np.random.default_rng(config.seed)
    scaler = standardize_fit(X) if config.scaling else None
    Z = standardize_apply(scaler, X) if scaler is not None else X
    pca = None
    if config.pca is not None and config.model_kind != "constant_sbm":
        k = min(int(config.pca), Z.shape[1], Z.shape[0] - 1)
        if k >= 1:
            pca = pca_fit(Z, k)
            Z = pca_transform(pca, Z)
    val = None
    if X_val is not None and len(X_val):
        V = np.asarray(X_val, dtype=np.float64)
        if scaler is not None:
            V = standardize_apply(scaler, V)
        if pca is not None:
            V = pca_transform(pca, V)
        val = (V, np.asarray(C_val, dtype=np.float64))
    labels = np.argmin(C, axis=1)
    sbm = int(np.argmin(C.sum(axis=0)))
    model = _MODELS[config.model_kind]().fit(Z, C, labels, config.params, rng, val)
    return Selector(config, tuple(method_names), X.shape[1], model, sbm, scaler, pca)


def training_arrays(features: FeatureTable, costs: CostMatrix, ds: QualityDataset, split):
    idx = ds.indices(split)
    ids = [ds.ids[i] for i in idx]
    if features.ids is not None and features.values.shape[0] == len(ds) and features.ids != ds.ids:
        raise ValidationError("feature rows are not in dataset order")
    if features.values.shape[0] != len(ds):
        raise ValidationError("feature table and dataset have different row counts")
    return features.values[idx], costs.values[cost_rows(costs, ids)]


def train_selector(config: SelectorConfig, features: FeatureTable, costs: CostMatrix, ds: QualityDataset) -> Selector:
    """Train on the train-tagged rows; val-tagged rows (if any) pick the best checkpoint."""
    X, C = training_arrays(features, costs, ds, "train")
    Xv, Cv = training_arrays(features, costs, ds, "val")
    return fit_selector(config, X, C, costs.method_names, Xv, Cv)


def training_labels(costs: CostMatrix) -> np.ndarray:
    return oracle_assign(costs)[0]


def select(selector: Selector, row) -> int:
    return selector.select(row)
