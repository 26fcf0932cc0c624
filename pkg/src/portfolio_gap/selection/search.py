"""Budgeted, cross-validated search over selector configurations."""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..dataset import FeatureTable, QualityDataset
from ..errors import ValidationError
from ..metrics import CostMatrix
from .models import Selector, SelectorConfig, fit_selector, train_selector, training_arrays


def default_space(seed: int = 0) -> list[SelectorConfig]:
    """The built-in selector grid, in a fixed order."""
    space = [SelectorConfig("constant_sbm", {}, scaling=False, seed=seed)]
    prep = [(True, None), (False, None), (True, 16)]
    for (scaling, pca), k, target in itertools.product(prep, (1, 5, 15, 50), ("label", "cost")):
        space.append(SelectorConfig("knn", {"k": k, "target": target}, scaling, pca, seed))
    for (scaling, pca), trees, depth, leaf in itertools.product(prep[:2], (50, 100), (None, 8), (1, 5)):
        space.append(SelectorConfig("decision_forest", {"trees": trees, "depth": depth, "min_leaf": leaf},
                                    scaling, pca, seed))
    for (scaling, pca), l2 in itertools.product(prep, (1e-4, 1e-2, 1.0)):
        space.append(SelectorConfig("multinomial_linear", {"l2": l2}, scaling, pca, seed))
    for (scaling, pca), hidden in itertools.product(prep, ([], [32], [64, 32])):
        space.append(SelectorConfig("error_regressors", {"hidden": hidden}, scaling, pca, seed))
    return space


def expand_space(space, budget: int, seed: int) -> list[SelectorConfig]:
    """Resolve ``space`` to the ordered list of configs that will be evaluated.

    ``space`` is a list of configs (or config dicts), or a generator description
    ``{"generator": "grid" | "random", "kinds": [...]}``.  A random generator
    draws ``budget`` distinct configs from the default grid.
    """
    if isinstance(space, dict):
        unknown = set(space) - {"generator", "kinds"}
        if unknown:
            raise ValidationError(f"space generator: unknown key(s) {sorted(unknown)}")
        grid = default_space(seed)
        kinds = space.get("kinds")
        if kinds:
            grid = [c for c in grid if c.model_kind in kinds]
        gen = space.get("generator", "grid")
        if gen == "random":
            rng = np.random.default_rng(seed)
            order = rng.permutation(len(grid))
            grid = [grid[i] for i in order]
        elif gen != "grid":
            raise ValidationError(f"unknown space generator {gen!r}")
        configs = grid
    else:
        configs = [c if isinstance(c, SelectorConfig) else SelectorConfig.from_dict(c) for c in space]
    if not configs:
        raise ValidationError("selector search space is empty")
    return configs[:budget]


@dataclass
class SearchEntry:
    index: int
    config: SelectorConfig
    cv_mae: float
    fold_maes: list[float]

    def to_dict(self) -> dict:
        return {"index": self.index, "config": self.config.to_dict(), "cv_mae": self.cv_mae,
                "fold_maes": self.fold_maes}


def cv_folds(n: int, folds: int, seed: int) -> list[np.ndarray]:
    if folds < 2:
        raise ValidationError("need at least 2 folds")
    if folds > n:
        raise ValidationError(f"cannot make {folds} folds from {n} train rows")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def cross_validate(config: SelectorConfig, X, C, method_names, folds) -> tuple[float, list[float]]:
    """Out-of-fold selection MAE: mean cost of the picked method over all rows."""
    total = 0.0
    per_fold = []
    n = X.shape[0]
    for held in folds:
        mask = np.ones(n, dtype=bool)
        mask[held] = False
        sel = fit_selector(config, X[mask], C[mask], method_names)
        picks = sel.select_many(X[held])
        cost = C[held, picks]
        per_fold.append(float(np.mean(cost)))
        total += float(np.sum(cost))
    return total / n, per_fold


def search_selectors(space, budget: int, folds: int, features: FeatureTable, costs: CostMatrix,
                     ds: QualityDataset, seed: int = 0, threads: int = 1):
    """Evaluate up to ``budget`` configs by k-fold CV on the train split.

    Returns ``(best_config, selector, log)``; the winner (lowest CV MAE,
    earliest on ties) is refit on the full train split.
    """
    if budget < 1:
        raise ValidationError("budget must be >= 1")
    configs = expand_space(space, budget, seed)
    X, C = training_arrays(features, costs, ds, "train")
    if X.shape[0] == 0:
        raise ValidationError("train split is empty")
    fold_idx = cv_folds(X.shape[0], folds, seed)

    def run(item):
        i, cfg = item
        cv, per_fold = cross_validate(cfg, X, C, costs.method_names, fold_idx)
        return SearchEntry(i, cfg, cv, per_fold)

    items = list(enumerate(configs))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            log = list(pool.map(run, items))
    else:
        log = [run(it) for it in items]
    best = min(log, key=lambda e: (e.cv_mae, e.index))
    selector: Selector = train_selector(best.config, features, costs, ds)
    return best.config, selector, log
