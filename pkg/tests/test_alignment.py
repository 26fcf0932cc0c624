import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portfolio_gap.alignment import (
    AlignOptions,
    FitInfo,
    Logistic5Params,
    align_portfolio,
    apply_logistic5,
    fit_logistic5,
    load_params,
    logistic5,
    save_params,
)
from portfolio_gap.dataset import PredictionTable, QualityDataset
from portfolio_gap.errors import (
    AlreadyAlignedError,
    DegenerateInputError,
    InsufficientDataError,
    ValidationError,
)


def _naive_logistic(beta, x):
    b1, b2, b3, b4, b5 = beta
    return b1 * (0.5 - 1.0 / (1.0 + math.exp(b2 * (x - b3)))) + b4 * x + b5


def test_logistic_matches_closed_form():
    beta = (80.0, 0.3, 1.5, 0.2, 40.0)
    xs = np.linspace(-10, 10, 41)
    expected = [_naive_logistic(beta, x) for x in xs]
    np.testing.assert_allclose(logistic5(beta, xs), expected, rtol=1e-13, atol=1e-12)


def test_apply_saturates_without_overflow():
    params = Logistic5Params((100.0, 0.5, 50.0, 0.0, 50.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = apply_logistic5(params, [-1e9, 50.0, 1e9])
    # the sigmoid rises with b2 > 0, so the far left saturates at b5 - b1/2
    np.testing.assert_array_equal(out, [0.0, 50.0, 100.0])


def test_apply_clamp_and_unclamped():
    params = Logistic5Params((200.0, 1.0, 0.0, 0.0, 50.0))
    np.testing.assert_array_equal(apply_logistic5(params, [-100.0, 100.0]), [0.0, 100.0])
    np.testing.assert_array_equal(apply_logistic5(params, [-100.0, 100.0], clamp=None), [-50.0, 150.0])


def _draw_beta(rng):
    return np.array([
        rng.uniform(20, 100) * rng.choice([-1, 1]),
        rng.uniform(0.2, 3.0),
        rng.uniform(-1, 1),
        rng.uniform(-2, 2),
        rng.uniform(20, 80),
    ])


@pytest.mark.parametrize("seed", range(5))
def test_recovers_noise_free_curve(seed):
    rng = np.random.default_rng(seed)
    beta = _draw_beta(rng)
    x = rng.uniform(-3, 3, 200)
    y = logistic5(beta, x)
    p = fit_logistic5(x, y)
    assert p.fit_info.final_rmse < 1e-6
    assert p.fit_info.restarts_used <= 10
    assert np.sqrt(np.mean((logistic5(p.beta, x) - y) ** 2)) < 1e-6


def test_linear_data_is_fit_exactly():
    x = np.linspace(0, 1, 50)
    y = 30 * x + 10
    p = fit_logistic5(x, y)
    assert p.fit_info.final_rmse < 1e-6


def test_input_validation():
    with pytest.raises(InsufficientDataError):
        fit_logistic5([1, 2, 3, 4], [1, 2, 3, 4])
    with pytest.raises(DegenerateInputError):
        fit_logistic5([1.0] * 10, np.arange(10.0))
    with pytest.raises(ValidationError):
        fit_logistic5([1, 2, np.nan, 4, 5], [1, 2, 3, 4, 5])
    with pytest.raises(ValidationError):
        fit_logistic5([1, 2, 3], [1, 2])


def test_fit_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=100)
    y = 50 + 20 * np.tanh(x) + rng.normal(scale=3, size=100)
    assert fit_logistic5(x, y).beta == fit_logistic5(x, y).beta


def test_params_json_round_trip(tmp_path):
    p = Logistic5Params((1 / 3, -2.0e-7, 1e10, 0.1, 5.5), FitInfo(True, 12, 0.25, 3))
    save_params(["a", "b"], [p, p], tmp_path / "p.json")
    back = load_params(tmp_path / "p.json")
    assert back["a"] == p and back["b"].beta == p.beta


def test_params_validation():
    with pytest.raises(ValidationError):
        Logistic5Params((1.0, 2.0, 3.0, 4.0))
    with pytest.raises(ValidationError):
        Logistic5Params((1.0, np.inf, 3.0, 4.0, 5.0))


def _portfolio(seed=0, n=120):
    rng = np.random.default_rng(seed)
    mos = rng.uniform(0, 100, n)
    raw = np.column_stack([
        mos / 100 + rng.normal(scale=0.05, size=n),
        -mos * 3 + rng.normal(scale=10, size=n),
        np.exp(mos / 40) + rng.normal(scale=0.2, size=n),
    ])
    split = tuple("train" if i < n * 2 // 3 else "test" for i in range(n))
    ids = tuple(f"i{i}" for i in range(n))
    return QualityDataset(ids, mos, split), PredictionTable(("a", "b", "c"), raw, ids=ids)


def test_align_portfolio_shapes_and_range():
    ds, preds = _portfolio()
    aligned, params = align_portfolio(preds, ds)
    assert aligned.aligned and aligned.values.shape == preds.values.shape
    assert aligned.values.min() >= 0 and aligned.values.max() <= 100
    assert len(params) == 3
    # alignment should beat the raw scale by a wide margin
    assert np.mean(np.abs(aligned.values[:, 1] - ds.mos)) < 15
    with pytest.raises(AlreadyAlignedError):
        align_portfolio(aligned, ds)


def test_align_ignores_test_rows():
    ds, preds = _portfolio(1)
    _, base = align_portfolio(preds, ds)
    test = ds.indices("test")
    rng = np.random.default_rng(9)
    vals = np.array(preds.values)
    mos = np.array(ds.mos)
    vals[test] = vals[rng.permutation(test)]
    mos[test] = rng.uniform(0, 100, test.size)
    ds2 = QualityDataset(ds.ids, mos, ds.split)
    preds2 = PredictionTable(preds.method_names, vals, ids=preds.ids)
    _, other = align_portfolio(preds2, ds2)
    assert [p.beta for p in base] == [p.beta for p in other]


def test_align_threads_match_serial():
    ds, preds = _portfolio(2)
    a, _ = align_portfolio(preds, ds, threads=1)
    b, _ = align_portfolio(preds, ds, threads=3)
    assert np.array_equal(a.values, b.values)


def test_align_error_names_method():
    ds, preds = _portfolio(3)
    vals = np.array(preds.values)
    vals[:, 2] = 1.0
    bad = PredictionTable(preds.method_names, vals, ids=preds.ids)
    with pytest.raises(DegenerateInputError, match="'c'"):
        align_portfolio(bad, ds, AlignOptions(restarts=2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_never_worse_than_best_constant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=30)
    y = rng.uniform(0, 100, 30)
    p = fit_logistic5(x, y, AlignOptions(restarts=3))
    # b1 = b4 = 0, b5 = mean is always reachable from the first start
    assert p.fit_info.final_rmse <= np.std(y) + 1e-9


def test_nearly_linear_logistic_converges():
    # gentle slope over the data range: amplitude and linear term are almost collinear
    beta = (68.7465552, 0.20694957, 0.92356091, -1.76351548, 56.30727287)
    x = np.random.default_rng(0).uniform(-3, 3, 200)
    y = logistic5(beta, x)
    p = fit_logistic5(x, y, AlignOptions(restarts=1))
    assert p.fit_info.final_rmse < 1e-9
