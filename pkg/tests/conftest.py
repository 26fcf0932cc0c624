import json
from pathlib import Path

import numpy as np
import pytest

from portfolio_gap.dataset import FeatureTable, write_feature_manifest


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(c) for c in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def tiny_files(tmp_path):
    mos = write_csv(tmp_path / "mos.csv", ["id", "mos", "split"],
                    [["a", 10, "train"], ["b", 50, "train"], ["c", 90, "test"]])
    preds = write_csv(tmp_path / "preds.csv", ["id", "m1", "m2"],
                      [["c", 0.9, 3.0], ["a", 0.1, 1.0], ["b", 0.5, 2.0]])
    return mos, preds


def planted_portfolio(n=600, k=3, seed=0, test_frac=0.5):
    """Aligned synthetic portfolio whose features one-hot encode the oracle label."""
    rng = np.random.default_rng(seed)
    mos = rng.uniform(0, 100, n)
    best = rng.integers(0, k, n)
    err = rng.uniform(5, 15, (n, k))
    err[np.arange(n), best] = rng.uniform(0, 1, n)
    sign = rng.choice([-1.0, 1.0], (n, k))
    preds = mos[:, None] + sign * err
    feats = np.eye(k)[best] + 0.01 * rng.normal(size=(n, k))
    n_test = int(n * test_frac)
    split = ["train"] * (n - n_test) + ["test"] * n_test
    ids = [f"i{j:04d}" for j in range(n)]
    return ids, mos, preds, feats, split, best


def write_portfolio_files(directory, ids, mos, preds, feats, split, method_names=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    k = preds.shape[1]
    names = method_names or [f"m{j + 1}" for j in range(k)]
    write_csv(directory / "mos.csv", ["id", "mos", "split"],
              [[i, repr(float(m)), s] for i, m, s in zip(ids, mos, split)])
    write_csv(directory / "preds.csv", ["id", *names],
              [[i, *(repr(float(v)) for v in row)] for i, row in zip(ids, preds)])
    ft = FeatureTable(feats, ((names[0], 0, feats.shape[1]),), tuple(ids))
    manifest = write_feature_manifest(ft, directory)
    return directory / "mos.csv", directory / "preds.csv", manifest


def write_config(path, doc):
    Path(path).write_text(json.dumps(doc), encoding="utf-8")
    return path


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when != "call" and report.outcome == "passed":
        return
    name = report.nodeid.split("::")[-1]
    if _ACCEPTANCE.get(name, ("PASS",))[0] != "PASS":
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
        detail = report.longrepr[-1]
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    _ACCEPTANCE[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
