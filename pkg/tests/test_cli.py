import csv
import hashlib
import json

import numpy as np
import pytest
from click.testing import CliRunner

from portfolio_gap.cli import main

from conftest import planted_portfolio, write_config, write_csv, write_portfolio_files


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def digest(directory):
    out = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(directory))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture
def planted(tmp_path):
    ids, mos, preds, feats, split, best = planted_portfolio(n=400, k=3, seed=1)
    mos_p, preds_p, manifest = write_portfolio_files(tmp_path / "data", ids, mos, preds, feats, split)
    return tmp_path, mos_p, preds_p, manifest


def _cfg(tmp_path, name, doc):
    return write_config(tmp_path / name, doc)


def test_version():
    r = invoke("--version")
    assert r.exit_code == 0 and "0.1.0" in r.output


def test_align_outputs(planted):
    tmp, mos, preds, _ = planted
    cfg = _cfg(tmp, "c.json", {"data": {"mos": str(mos), "predictions": str(preds)}})
    r = invoke("--config", cfg, "--out", tmp / "out", "align")
    assert r.exit_code == 0, r.output
    out = tmp / "out"
    for name in ("aligned_predictions.csv", "alignment_params.json", "mos.csv", "align_report.json"):
        assert (out / name).is_file()
    rep = json.loads((out / "align_report.json").read_text())
    assert rep["toolkit"] == "portfolio-gap" and len(rep["config_hash"]) == 64
    assert [m["method"] for m in rep["methods"]] == ["m1", "m2", "m3"]
    with open(out / "aligned_predictions.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "m1", "m2", "m3"] and len(rows) == 401
    assert all(0 <= float(v) <= 100 for row in rows[1:] for v in row[1:])


def test_align_is_byte_identical_across_runs_and_threads(planted):
    tmp, mos, preds, _ = planted
    cfg = _cfg(tmp, "c.json", {"data": {"mos": str(mos), "predictions": str(preds)}})
    invoke("--config", cfg, "--out", tmp / "a", "--threads", 1, "align")
    invoke("--config", cfg, "--out", tmp / "b", "--threads", 3, "align")
    assert digest(tmp / "a") == digest(tmp / "b")


def test_missing_input_exits_4(tmp_path):
    cfg = _cfg(tmp_path, "c.json", {"data": {"mos": "nope.csv", "predictions": "nope2.csv"}})
    r = CliRunner().invoke(main, ["--config", str(cfg), "--out", str(tmp_path / "o"), "align"])
    assert r.exit_code == 4
    err = json.loads(r.stderr if hasattr(r, "stderr") else r.output)
    assert err["exit_code"] == 4 and "nope.csv" in err["message"]


def test_unknown_config_key_exits_2(tmp_path):
    cfg = _cfg(tmp_path, "c.json", {"data": {"mos": "x"}, "colour": "blue"})
    r = CliRunner().invoke(main, ["--config", str(cfg), "align"])
    assert r.exit_code == 2


def test_bad_format_exits_2(tmp_path):
    r = CliRunner().invoke(main, ["--format", "json,png", "simulate", "sweep"])
    assert r.exit_code == 2


def test_refuses_to_overwrite_input(planted):
    tmp, mos, preds, _ = planted
    cfg = _cfg(tmp, "c.json", {"data": {"mos": str(mos), "predictions": str(preds)}})
    r = CliRunner().invoke(main, ["--config", str(cfg), "--out", str(mos.parent), "align"])
    assert r.exit_code == 2


def test_benchmark_requires_aligned(planted):
    tmp, mos, preds, _ = planted
    cfg = _cfg(tmp, "c.json", {"data": {"mos": str(mos), "predictions": str(preds)}})
    r = CliRunner().invoke(main, ["--config", str(cfg), "--out", str(tmp / "o"), "benchmark"])
    assert r.exit_code == 2


def test_benchmark_tables(planted):
    tmp, mos, preds, _ = planted
    cfg = _cfg(tmp, "c.json", {"data": {"mos": str(mos), "predictions": str(preds), "predictions_aligned": True},
                               "benchmark": {"depth": 3}})
    r = invoke("--config", cfg, "--out", tmp / "b", "--format", "json,csv,svg", "benchmark")
    assert r.exit_code == 0, r.output
    out = tmp / "b"
    doc = json.loads((out / "benchmark.json").read_text())
    counts = np.array(doc["rank_counts"])
    assert np.all(counts.sum(axis=0) == doc["n"]) and doc["n"] == 200
    assert doc["virtual_best"]["mae"] <= min(m["mae"] for m in doc["methods"])
    assert (out / "cluster_tree.nwk").read_text().endswith(";\n")
    assert (out / "correlation.svg").is_file()
    assert len(list((out / "scatter").glob("*.csv"))) == 3
    rows = list(csv.reader(open(out / "selection_table.csv")))
    assert rows[0] == ["method", "sbm", "vbm"]


def _select_cfg(tmp, mos, preds, manifest, **selection):
    doc = {"data": {"mos": str(mos), "predictions": str(preds), "features": str(manifest),
                    "predictions_aligned": True},
           "selection": selection}
    return _cfg(tmp, "sel.json", doc)


def test_select_train_evaluate_predict_planted(planted):
    tmp, mos, preds, manifest = planted
    cfg = _select_cfg(tmp, mos, preds, manifest, config={"model_kind": "knn", "hyperparams": {"k": 5}})
    r = invoke("--config", cfg, "--out", tmp / "s", "select", "train")
    assert r.exit_code == 0, r.output
    sel_path = tmp / "s" / "selector.json"
    cfg2 = _select_cfg(tmp, mos, preds, manifest, selector=str(sel_path))
    r = invoke("--config", cfg2, "--out", tmp / "e", "select", "evaluate")
    assert r.exit_code == 0, r.output
    rep = json.loads((tmp / "e" / "eval_report.json").read_text())
    assert rep["gap_closure"] >= 0.95
    picks = list(csv.reader(open(tmp / "e" / "picks.csv")))
    assert picks[0] == ["id", "chosen_method", "assembled_score"] and len(picks) == 201
    r = invoke("--config", cfg2, "--out", tmp / "p", "select", "predict")
    assert r.exit_code == 0, r.output
    pred_rows = list(csv.reader(open(tmp / "p" / "picks.csv")))
    assert len(pred_rows) == 401
    # predict and evaluate agree on the test rows
    by_id = {row[0]: row[1] for row in pred_rows[1:]}
    assert all(by_id[row[0]] == row[1] for row in picks[1:])


def test_benchmark_with_selector_adds_as_column(planted):
    tmp, mos, preds, manifest = planted
    cfg = _select_cfg(tmp, mos, preds, manifest, config={"model_kind": "knn"})
    invoke("--config", cfg, "--out", tmp / "s", "select", "train")
    cfg2 = _select_cfg(tmp, mos, preds, manifest, selector=str(tmp / "s" / "selector.json"))
    r = invoke("--config", cfg2, "--out", tmp / "b", "benchmark")
    assert r.exit_code == 0, r.output
    rows = list(csv.reader(open(tmp / "b" / "selection_table.csv")))
    assert rows[0] == ["method", "sbm", "vbm", "as"]
    doc = json.loads((tmp / "b" / "benchmark.json").read_text())
    assert doc["selection_table"]["as"]["gap_closure"] >= 0.95


def test_exclusion_drops_method(planted):
    tmp, mos, preds, manifest = planted
    cfg = _cfg(tmp, "x.json", {"data": {"mos": str(mos), "predictions": str(preds), "predictions_aligned": True},
                               "selection": {"exclude": ["m2"]}})
    r = invoke("--config", cfg, "--out", tmp / "b", "benchmark")
    assert r.exit_code == 0, r.output
    doc = json.loads((tmp / "b" / "benchmark.json").read_text())
    assert doc["selection_table"]["method_names"] == ["m1", "m3"]


def test_unknown_excluded_method_exits_2(planted):
    tmp, mos, preds, manifest = planted
    cfg = _cfg(tmp, "x.json", {"data": {"mos": str(mos), "predictions": str(preds), "predictions_aligned": True},
                               "selection": {"exclude": ["zz"]}})
    r = CliRunner().invoke(main, ["--config", str(cfg), "--out", str(tmp / "b"), "benchmark"])
    assert r.exit_code == 2


def test_select_search_deterministic(planted):
    tmp, mos, preds, manifest = planted
    space = [{"model_kind": "constant_sbm"}, {"model_kind": "knn", "hyperparams": {"k": 3}},
             {"model_kind": "decision_forest", "hyperparams": {"trees": 10}}]
    cfg = _select_cfg(tmp, mos, preds, manifest, space=space, budget=3, folds=3)
    assert invoke("--config", cfg, "--out", tmp / "a", "select", "search").exit_code == 0
    assert invoke("--config", cfg, "--out", tmp / "b", "--threads", 2, "select", "search").exit_code == 0
    assert digest(tmp / "a") == digest(tmp / "b")
    log = json.loads((tmp / "a" / "search_log.json").read_text())
    assert len(log["log"]) == 3 and log["best"]["model_kind"] != "constant_sbm"


def test_simulate_commands(tmp_path):
    cfg = _cfg(tmp_path, "sim.json", {"simulate": {"k": 3, "n": 300, "sigma_grid": [1.0, 2.0], "trials": 2,
                                                   "rho_grid": [0.0, 1.0], "repeats": 2, "oracle_trials": 5000}})
    for sub in ("sweep", "futility", "oracle-mae"):
        r = invoke("--config", cfg, "--out", tmp_path / "o", "--format", "json,csv,svg", "simulate", sub)
        assert r.exit_code == 0, r.output
    out = tmp_path / "o"
    for name in ("sweep.csv", "sweep.json", "sweep.svg", "futility.csv", "futility.json", "oracle_mae.json"):
        assert (out / name).is_file(), name
    doc = json.loads((out / "oracle_mae.json").read_text())
    assert abs(doc["estimate"] - doc["quadrature"]) < 4 * doc["standard_error"]


def test_simulate_and_report_byte_identical(tmp_path):
    cfg = _cfg(tmp_path, "sim.json", {"simulate": {"k": 3, "n": 200, "sigma_grid": [1.0, 3.0], "trials": 2}})
    for d in ("a", "b"):
        assert invoke("--config", cfg, "--out", tmp_path / d, "--format", "json,csv,svg",
                      "simulate", "sweep").exit_code == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    rcfg = _cfg(tmp_path, "r.json", {"report": {"input": str(tmp_path / "a" / "sweep.csv"), "y": ["gap"]}})
    r = invoke("--config", rcfg, "--out", tmp_path / "r", "report")
    assert r.exit_code == 0, r.output
    assert (tmp_path / "r" / "sweep.svg").read_text().lstrip().startswith("<?xml")


def test_seed_changes_simulation(tmp_path):
    cfg = _cfg(tmp_path, "sim.json", {"simulate": {"k": 2, "n": 100, "sigma_grid": [1.0], "trials": 2}})
    invoke("--config", cfg, "--out", tmp_path / "a", "--seed", 1, "simulate", "sweep")
    invoke("--config", cfg, "--out", tmp_path / "b", "--seed", 2, "simulate", "sweep")
    assert (tmp_path / "a" / "sweep.csv").read_bytes() != (tmp_path / "b" / "sweep.csv").read_bytes()


def test_report_missing_column_exits_2(tmp_path):
    src = write_csv(tmp_path / "t.csv", ["x", "y"], [[1, 2], [2, 3]])
    cfg = _cfg(tmp_path, "r.json", {"report": {"input": str(src), "y": ["zz"]}})
    r = CliRunner().invoke(main, ["--config", str(cfg), "--out", str(tmp_path / "o"), "report"])
    assert r.exit_code == 2


def test_report_non_numeric_exits_2(tmp_path):
    src = write_csv(tmp_path / "t.csv", ["x", "y"], [[1, "abc"]])
    cfg = _cfg(tmp_path, "r.json", {"report": {"input": str(src)}})
    r = CliRunner().invoke(main, ["--config", str(cfg), "--out", str(tmp_path / "o"), "report"])
    assert r.exit_code == 2
