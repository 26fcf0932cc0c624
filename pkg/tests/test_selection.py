import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portfolio_gap.dataset import FeatureGroup, FeatureGroupSpec, FeatureTable, PredictionTable, QualityDataset
from portfolio_gap.errors import ValidationError
from portfolio_gap.metrics import CostMatrix, cost_matrix
from portfolio_gap.selection import (
    SelectorConfig,
    cv_folds,
    default_space,
    evaluate_picks,
    evaluate_selector,
    exclude_method,
    expand_space,
    fit_selector,
    gap_closure,
    load_selector,
    oracle_assign,
    save_selector,
    search_selectors,
    select,
    single_best,
    train_selector,
)

from conftest import planted_portfolio

ZOO = [
    SelectorConfig("constant_sbm", {}),
    SelectorConfig("knn", {"k": 5}),
    SelectorConfig("knn", {"k": 5, "target": "cost"}),
    SelectorConfig("decision_forest", {"trees": 20}),
    SelectorConfig("multinomial_linear", {"epochs": 100}),
    SelectorConfig("error_regressors", {"hidden": [8], "epochs": 100}),
]


def _cm(values):
    values = np.asarray(values, dtype=float)
    n, k = values.shape
    return CostMatrix(values, tuple(f"m{j}" for j in range(k)), tuple(f"i{i}" for i in range(n)))


def test_sbm_and_oracle_small():
    c = _cm([[1, 2], [3, 1], [2, 2]])
    assert single_best(c) == 1
    picks, omae, counts = oracle_assign(c)
    assert picks.tolist() == [0, 1, 0]
    assert omae == pytest.approx(4 / 3)
    assert counts.tolist() == [2, 1]


def test_sbm_tie_goes_to_lower_index():
    assert single_best(_cm([[1, 1], [2, 2]])) == 0


def test_gap_closure_frozen():
    # KonIQ-scale numbers: SBM 6.792, AS 6.665, oracle 3.063
    assert gap_closure(6.792, 6.665, 3.063) == pytest.approx(0.03405738803968887, rel=1e-12)
    assert gap_closure(2.0, 1.0, 2.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 2**31))
def test_oracle_dominates_every_method(n, k, seed):
    c = _cm(np.random.default_rng(seed).exponential(size=(n, k)))
    _, omae, counts = oracle_assign(c)
    assert omae <= c.values.mean(axis=0).min()
    assert counts.sum() == n


def _planted(n=600, k=3, seed=0):
    ids, mos, preds, feats, split, best = planted_portfolio(n, k, seed)
    ds = QualityDataset(tuple(ids), mos, tuple(split))
    names = tuple(f"m{j + 1}" for j in range(k))
    aligned = PredictionTable(names, preds, aligned=True, ids=ds.ids)
    ft = FeatureTable(feats, ((names[0], 0, k),), ds.ids)
    return ds, aligned, ft, cost_matrix(aligned, ds), best


def test_evaluate_oracle_and_sbm_picks_exact():
    ds, aligned, ft, costs, best = _planted()
    test = ds.indices("test")
    rep = evaluate_picks(best[test], costs, aligned, ds)
    assert rep.gap_closure == 1.0 and rep.mae == rep.oracle_mae
    rep0 = evaluate_picks(np.full(test.size, rep.sbm_index), costs, aligned, ds)
    assert rep0.gap_closure == 0.0
    assert rep0.pick_counts[rep.sbm_index] == test.size


def test_evaluate_rejects_bad_picks():
    ds, aligned, ft, costs, _ = _planted()
    with pytest.raises(ValidationError):
        evaluate_picks([0, 1], costs, aligned, ds)
    with pytest.raises(ValidationError):
        evaluate_picks(np.full(300, 7), costs, aligned, ds)


@pytest.mark.parametrize("config", ZOO[1:], ids=lambda c: f"{c.model_kind}-{c.mode}")
def test_zoo_learns_planted_labels(config):
    ds, aligned, ft, costs, _ = _planted()
    sel = train_selector(config, ft, costs, ds)
    rep = evaluate_selector(sel, ft, costs, aligned, ds)
    assert rep.gap_closure >= 0.95


def test_constant_selector_is_sbm():
    ds, aligned, ft, costs, _ = _planted()
    sel = train_selector(ZOO[0], ft, costs, ds)
    rep = evaluate_selector(sel, ft, costs, aligned, ds)
    assert set(rep.picks) == {sel.sbm_index}
    assert rep.gap_closure == 0.0


@pytest.mark.parametrize("config", ZOO, ids=lambda c: c.model_kind)
def test_selector_serialization_round_trip(config, tmp_path):
    ds, aligned, ft, costs, _ = _planted(n=200)
    sel = train_selector(config, ft, costs, ds)
    save_selector(sel, tmp_path / "s.json", {"note": 1})
    back, extra = load_selector(tmp_path / "s.json")
    assert extra == {"note": 1}
    X = ft.values
    assert np.array_equal(sel.select_many(X), back.select_many(X))
    assert select(back, X[0]) == sel.select(X[0])
    if sel.mode == "argmin_error":
        assert np.array_equal(sel.predicted_errors(X), back.predicted_errors(X))


@pytest.mark.parametrize("config", ZOO, ids=lambda c: c.model_kind)
def test_training_is_deterministic(config):
    ds, aligned, ft, costs, _ = _planted(n=200, seed=3)
    a = train_selector(config, ft, costs, ds)
    b = train_selector(config, ft, costs, ds)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_select_rejects_wrong_width():
    ds, aligned, ft, costs, _ = _planted(n=100)
    sel = train_selector(ZOO[1], ft, costs, ds)
    with pytest.raises(ValidationError):
        sel.select(np.zeros(5))


def test_pca_preprocessing():
    ds, aligned, ft, costs, _ = _planted(n=200)
    sel = train_selector(SelectorConfig("knn", {"k": 3}, pca=2), ft, costs, ds)
    assert sel.pca is not None and sel.pca.k == 2


def test_config_validation():
    with pytest.raises(ValidationError):
        SelectorConfig("svm", {})
    with pytest.raises(ValidationError):
        SelectorConfig("knn", {"neighbours": 3})
    with pytest.raises(ValidationError):
        SelectorConfig("knn", {"k": 0})
    with pytest.raises(ValidationError):
        SelectorConfig.from_dict({"model_kind": "knn", "extra": 1})
    cfg = SelectorConfig("decision_forest", {"depth": 4}, pca=3, seed=2)
    assert SelectorConfig.from_dict(cfg.to_dict()) == cfg


def test_fit_selector_empty_train():
    with pytest.raises(ValidationError):
        fit_selector(ZOO[1], np.zeros((0, 2)), np.zeros((0, 2)), ("a", "b"))


def test_exclude_method_consistency():
    ds, aligned, ft, costs, _ = _planted()
    spec = FeatureGroupSpec((FeatureGroup("m1", 3, ""),))
    p2, c2, f2, s2 = exclude_method(aligned, costs, ft, spec, method="m1")
    assert p2.method_names == c2.method_names == ("m2", "m3")
    np.testing.assert_array_equal(c2.values, costs.values[:, 1:])
    assert f2.dim == 0 and s2.groups == ()
    with pytest.raises(ValidationError):
        exclude_method(aligned, method="nope")
    single = exclude_method(exclude_method(aligned, method="m1"), method="m2")
    with pytest.raises(ValidationError, match="empty portfolio"):
        exclude_method(single, method="m3")


def test_exclusion_changes_sbm_reference():
    c = _cm([[0.0, 1.0, 2.0], [0.0, 1.0, 2.0]])
    c2 = exclude_method(c, method="m0")
    assert single_best(c2) == 0 and c2.method_names[0] == "m1"


def test_default_space_and_expansion():
    space = default_space()
    assert space[0].model_kind == "constant_sbm"
    assert {c.model_kind for c in space} == {"constant_sbm", "knn", "decision_forest", "multinomial_linear",
                                             "error_regressors"}
    assert expand_space({"generator": "grid"}, 5, 0) == space[:5]
    r1 = expand_space({"generator": "random", "kinds": ["knn"]}, 4, 1)
    assert r1 == expand_space({"generator": "random", "kinds": ["knn"]}, 4, 1)
    assert all(c.model_kind == "knn" for c in r1)
    with pytest.raises(ValidationError):
        expand_space({"generator": "bayes"}, 3, 0)
    with pytest.raises(ValidationError):
        expand_space([], 3, 0)


def test_cv_folds_partition():
    folds = cv_folds(23, 5, 0)
    allrows = np.sort(np.concatenate(folds))
    np.testing.assert_array_equal(allrows, np.arange(23))
    with pytest.raises(ValidationError):
        cv_folds(3, 5, 0)


def test_search_picks_lowest_cv_and_is_reproducible():
    ds, aligned, ft, costs, _ = _planted(n=300)
    space = [ZOO[0], ZOO[1], ZOO[3]]
    best, sel, log = search_selectors(space, 3, 3, ft, costs, ds, seed=1)
    assert len(log) == 3
    winner = min(log, key=lambda e: (e.cv_mae, e.index))
    assert best == winner.config
    assert best.model_kind != "constant_sbm"
    best2, _, log2 = search_selectors(space, 3, 3, ft, costs, ds, seed=1, threads=2)
    assert best2 == best and [e.cv_mae for e in log2] == [e.cv_mae for e in log]


def test_search_budget_truncates():
    ds, aligned, ft, costs, _ = _planted(n=120)
    _, _, log = search_selectors(ZOO[:3], 2, 2, ft, costs, ds)
    assert [e.index for e in log] == [0, 1]
