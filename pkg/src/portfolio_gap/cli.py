"""``portfolio-gap`` command line interface.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
Errors are reported on stderr as a single JSON object.
"""
from __future__ import annotations

import functools
import itertools
import json
import math
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .alignment import AlignOptions, align_portfolio, save_params
from .config import RunConfig, load_config
from .dataset import (
    FeatureTable,
    PredictionTable,
    ensure_dir,
    load_dataset,
    load_feature_manifest,
    load_features,
    load_mos,
    load_predictions,
    scale_mos,
    split_dataset,
    write_mos_csv,
    write_predictions_csv,
)
from .errors import DataIOError, NotAlignedError, PortfolioError, ValidationError
from .features import PcaModel, apply_reduction, reduce_feature_groups
from .metrics import (
    correlation_distance,
    cost_matrix,
    mae,
    method_correlation_matrix,
    rank_count_table,
    signed_error_pairs,
    srocc,
    ward_cluster,
    write_matrix_csv,
    write_pairs_csv,
    write_rank_table_csv,
)
from .noiselab import (
    NoiseModel,
    SweepResult,
    expected_oracle_mae,
    futility_experiment,
    gap_vs_noise_sweep,
    pure_noise_oracle_mae,
)
from .selection import (
    SelectorConfig,
    evaluate_picks,
    evaluate_selector,
    exclude_method,
    load_selector,
    oracle_assign,
    save_selector,
    search_selectors,
    single_best,
    train_selector,
)


class Run:
    """Resolved config plus the set of input files that must not be overwritten."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.inputs = set()
        for p in (cfg.data.mos, cfg.data.predictions, cfg.data.features, cfg.selection.selector, cfg.report.input):
            if p:
                self.inputs.add(os.path.realpath(p))

    @property
    def threads(self) -> int:
        return self.cfg.threads or os.cpu_count() or 1

    def out(self, name: str) -> Path:
        d = ensure_dir(self.cfg.out)
        path = d / name
        ensure_dir(path.parent)
        if os.path.realpath(path) in self.inputs:
            raise ValidationError(f"refusing to overwrite input file {path}")
        return path

    def provenance(self) -> dict:
        return {"toolkit": "portfolio-gap", "version": __version__, "config_hash": self.cfg.hash()}

    def want(self, fmt: str) -> bool:
        return fmt in self.cfg.formats

    def write_json(self, name, doc):
        path = self.out(name)
        path.write_text(json.dumps({**self.provenance(), **doc}, indent=2, default=_json_default) + "\n",
                        encoding="utf-8")
        return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def _fail(exc, code):
    click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PortfolioError as exc:
            _fail(exc, exc.exit_code)
        except OSError as exc:
            _fail(exc, DataIOError.exit_code)
    return wrapper


# -- data helpers ------------------------------------------------------------


def _require(value, what):
    if not value:
        raise ValidationError(f"config is missing {what}")
    return value


def _load_inputs(run: Run, with_features: bool):
    d = run.cfg.data
    ds, preds, feats = load_dataset(_require(d.mos, "data.mos"), _require(d.predictions, "data.predictions"),
                                    d.features if with_features else None)
    if run.cfg.scale.enabled:
        ds = scale_mos(ds, run.cfg.scale.lo, run.cfg.scale.hi)
    if d.predictions_aligned:
        preds = PredictionTable(preds.method_names, preds.values, aligned=True, ids=preds.ids)
    return ds, preds, feats


def _selection_inputs(run: Run, reduce: bool = True):
    ds, preds, feats = _load_inputs(run, with_features=True)
    if not preds.aligned:
        raise NotAlignedError("selection needs aligned predictions (set data.predictions_aligned)")
    if feats is None:
        raise ValidationError("selection needs a feature manifest (data.features)")
    ds = split_dataset(ds, run.cfg.seed, run.cfg.split.val_count)
    for name in run.cfg.selection.exclude or []:
        preds, feats = exclude_method(preds, feats, method=name)
    reduction = []
    if reduce and run.cfg.features.cap is not None:
        feats, reduction = reduce_feature_groups(feats, None, run.cfg.features.cap, ds, "train",
                                                 run.cfg.features.standardize)
    costs = cost_matrix(preds, ds)
    return ds, preds, feats, costs, reduction


def _reduction_extra(run: Run, reduction):
    return {"feature_cap": run.cfg.features.cap, "feature_reduction": [m.to_dict() for m in reduction],
            "excluded_methods": list(run.cfg.selection.exclude or [])}


def _write_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "portfolio-gap"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


# -- CLI ---------------------------------------------------------------------


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON run config.")
@click.option("--out", default=None, help="Output directory.")
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None, help="Worker threads (default: logical processors).")
@click.option("--format", "formats", default=None, help="Comma-separated output formats: json,csv[,svg].")
@click.version_option(__version__)
@click.pass_context
def main(ctx, config_path, out, seed, threads, formats):
    """Benchmark per-instance algorithm selection over predictor portfolios."""
    try:
        cfg = load_config(config_path)
        if out is not None:
            cfg.out = out
        if seed is not None:
            cfg.seed = seed
        if threads is not None:
            if threads < 1:
                raise ValidationError("--threads must be >= 1")
            cfg.threads = threads
        if formats is not None:
            fm = [f.strip() for f in formats.split(",") if f.strip()]
            bad = set(fm) - {"json", "csv", "svg"}
            if bad:
                raise ValidationError(f"unknown format(s) {sorted(bad)}")
            cfg.formats = fm
    except PortfolioError as exc:
        _fail(exc, exc.exit_code)
    ctx.obj = Run(cfg)


@main.command()
@click.pass_obj
@handle_errors
def align(run: Run):
    """Fit per-method logistic alignment on the train rows and write aligned predictions."""
    cfg = run.cfg
    ds, preds, _ = _load_inputs(run, with_features=False)
    if preds.aligned:
        raise ValidationError("predictions are flagged as already aligned")
    a = cfg.alignment
    opts = AlignOptions(a.max_iter, a.tol, a.restarts, cfg.seed)
    aligned, params = align_portfolio(preds, ds, opts, fit_rows=a.fit_rows, threads=run.threads)
    write_predictions_csv(aligned, ds.ids, run.out("aligned_predictions.csv"))
    save_params(preds.method_names, params, run.out("alignment_params.json"))
    write_mos_csv(ds, run.out("mos.csv"))
    fit_mask = ds.mask(a.fit_rows)
    methods = []
    for k, (name, p) in enumerate(zip(preds.method_names, params)):
        before = float(np.sqrt(np.mean((preds.values[fit_mask, k] - ds.mos[fit_mask]) ** 2)))
        methods.append({"method": name, "rmse_before": before, "rmse_after": p.fit_info.final_rmse,
                        **p.to_dict()["fit_info"]})
    run.write_json("align_report.json", {"n": len(ds), "fit_rows": a.fit_rows, "methods": methods})


def _method_rows(preds, costs, ds, rows, depth):
    idx = ds.indices(rows)
    mos = ds.mos[idx]
    table = rank_count_table(costs, depth)
    out = []
    for k, name in enumerate(preds.method_names):
        col = preds.values[idx, k]
        try:
            rho = srocc(col, mos)
        except PortfolioError:
            rho = None
        out.append({"method": name, "srocc": rho, "mae": mae(col, mos),
                    **{f"rank{r + 1}": int(table[k, r]) for r in range(depth)}})
    return out, table


@main.command()
@click.pass_obj
@handle_errors
def benchmark(run: Run):
    """Method table, SBM/VBM(/AS) table, rank counts, correlations, clustering and scatter data."""
    cfg = run.cfg
    b = cfg.benchmark
    want_as = cfg.selection.selector is not None
    ds, preds, feats = _load_inputs(run, with_features=want_as)
    if not preds.aligned:
        raise NotAlignedError("benchmark needs aligned predictions (run `align` first)")
    for name in cfg.selection.exclude or []:
        if feats is not None:
            preds, feats = exclude_method(preds, feats, method=name)
        else:
            preds = exclude_method(preds, method=name)
    idx = ds.indices(b.rows)
    if idx.size == 0:
        raise ValidationError(f"no instances in rows {b.rows!r}")
    costs = cost_matrix(preds, ds, b.rows)
    depth = min(b.depth, preds.k)
    methods, table = _method_rows(preds, costs, ds, b.rows, depth)

    opicks, oracle_mae, ocounts = oracle_assign(costs)
    vbm_scores = preds.values[idx, opicks]
    try:
        vbm_srocc = srocc(vbm_scores, ds.mos[idx])
    except PortfolioError:
        vbm_srocc = None
    vbm = {"method": "virtual_best", "srocc": vbm_srocc, "mae": oracle_mae, "rank1": int(costs.n)}
    sbm_idx = single_best(costs)
    sbm_counts = [0] * preds.k
    sbm_counts[sbm_idx] = costs.n
    selection_table = {
        "method_names": list(preds.method_names),
        "sbm": {"method": preds.method_names[sbm_idx], "pick_counts": sbm_counts,
                "mae": methods[sbm_idx]["mae"], "srocc": methods[sbm_idx]["srocc"]},
        "vbm": {"pick_counts": ocounts.tolist(), "mae": oracle_mae, "srocc": vbm_srocc},
    }
    if want_as:
        selector, extra = load_selector(cfg.selection.selector)
        if tuple(selector.method_names) != preds.method_names:
            raise ValidationError("selector was trained on a different portfolio")
        f = apply_reduction(feats, [PcaModel.from_dict(m) for m in extra.get("feature_reduction", [])])
        full_costs = cost_matrix(preds, ds)
        rep = evaluate_selector(selector, f, full_costs, preds, ds, b.rows)
        selection_table["as"] = {"pick_counts": rep.pick_counts, "mae": rep.mae, "srocc": _finite(rep.srocc),
                                 "gap_closure": rep.gap_closure, "selector_sbm_mae": rep.sbm_mae}

    corr = method_correlation_matrix(preds, ds, b.rows)
    if b.distance == "one_minus_srocc":
        dist = correlation_distance(corr)
    elif b.distance == "sqrt_two_minus_two_srocc":
        dist = np.sqrt(np.maximum(2.0 * correlation_distance(corr), 0.0))
    else:
        raise ValidationError(f"unknown benchmark.distance {b.distance!r}")
    tree = ward_cluster(dist, preds.method_names) if preds.k >= 1 else None

    if run.want("csv"):
        _write_method_table(run.out("methods.csv"), methods, vbm, depth)
        _write_selection_table(run.out("selection_table.csv"), selection_table, preds.method_names)
        write_rank_table_csv(table, preds.method_names, run.out("rank_counts.csv"))
        write_matrix_csv(corr, preds.method_names, run.out("correlation.csv"))
        pairs = b.scatter_pairs or [list(p) for p in itertools.combinations(preds.method_names, 2)]
        ids = [ds.ids[i] for i in idx]
        for pa, pb in pairs:
            pts = signed_error_pairs(preds, ds, pa, pb, b.rows)
            write_pairs_csv(pts, ids, pa, pb, run.out(f"scatter/{pa}__{pb}.csv"))
    run.out("cluster_tree.nwk").write_text(tree.to_newick() + "\n", encoding="utf-8")
    if run.want("svg"):
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(corr, vmin=-1, vmax=1, cmap="viridis")
        ax.set_xticks(range(preds.k), preds.method_names, rotation=90)
        ax.set_yticks(range(preds.k), preds.method_names)
        fig.colorbar(im, ax=ax, label="SROCC")
        fig.tight_layout()
        _write_svg(fig, run.out("correlation.svg"))
        plt.close(fig)
    run.write_json("benchmark.json", {
        "rows": b.rows, "n": int(idx.size), "methods": methods, "virtual_best": vbm,
        "selection_table": selection_table, "rank_counts": table.tolist(),
        "correlation": corr.tolist(), "cluster_tree": tree.to_newick(), "distance": b.distance,
    })


def _write_method_table(path, methods, vbm, depth):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "srocc", "mae", *(f"rank{r + 1}" for r in range(depth))])
        for m in methods:
            w.writerow([m["method"], "" if m["srocc"] is None else repr(m["srocc"]), repr(m["mae"]),
                        *(m[f"rank{r + 1}"] for r in range(depth))])
        w.writerow([vbm["method"], "" if vbm["srocc"] is None else repr(vbm["srocc"]), repr(vbm["mae"]),
                    vbm["rank1"], *([0] * (depth - 1))])


def _write_selection_table(path, st, names):
    import csv

    cols = ["sbm", "vbm"] + (["as"] if "as" in st else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *cols])
        for k, name in enumerate(names):
            w.writerow([name, *(st[c]["pick_counts"][k] for c in cols)])
        w.writerow(["MAE", *(repr(float(st[c]["mae"])) for c in cols)])
        w.writerow(["SROCC", *("" if st[c]["srocc"] is None else repr(float(st[c]["srocc"])) for c in cols)])


@main.group()
def select():
    """Train, search, apply and evaluate per-instance selectors."""


def _selector_config(run: Run) -> SelectorConfig:
    d = _require(run.cfg.selection.config, "selection.config")
    d = {"seed": run.cfg.seed, **d}
    return SelectorConfig.from_dict(d)


@select.command("train")
@click.pass_obj
@handle_errors
def select_train(run: Run):
    ds, preds, feats, costs, reduction = _selection_inputs(run)
    config = _selector_config(run)
    selector = train_selector(config, feats, costs, ds)
    save_selector(selector, run.out("selector.json"), _reduction_extra(run, reduction))
    run.write_json("train_report.json", {"config": config.to_dict(), "train_rows": ds.count("train"),
                                         "val_rows": ds.count("val"), "train_sbm": preds.method_names[selector.sbm_index]})


@select.command("search")
@click.pass_obj
@handle_errors
def select_search(run: Run):
    cfg = run.cfg
    ds, preds, feats, costs, reduction = _selection_inputs(run)
    space = cfg.selection.space if cfg.selection.space is not None else {"generator": "grid"}
    best, selector, log = search_selectors(space, cfg.selection.budget, cfg.selection.folds, feats, costs, ds,
                                           seed=cfg.seed, threads=run.threads)
    save_selector(selector, run.out("selector.json"), _reduction_extra(run, reduction))
    entries = [e.to_dict() for e in log]
    if run.want("csv"):
        import csv

        with open(run.out("search_log.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "model_kind", "config", "cv_mae"])
            for e in entries:
                w.writerow([e["index"], e["config"]["model_kind"], json.dumps(e["config"], sort_keys=True),
                            repr(e["cv_mae"])])
    run.write_json("search_log.json", {"budget": cfg.selection.budget, "folds": cfg.selection.folds,
                                       "best": best.to_dict(), "log": entries})


def _selector_features(run: Run, ids=None):
    d = run.cfg.data
    spec = load_feature_manifest(_require(d.features, "data.features"))
    if ids is None:
        from .dataset import _read_csv

        _, body = _read_csv(spec.groups[0].source_path)
        ids = tuple(row[0].strip() for row in body)
    feats = load_features(spec, ids)
    selector, extra = load_selector(_require(run.cfg.selection.selector, "selection.selector"))
    dropped = set(extra.get("excluded_methods", []))
    if dropped:
        feats = FeatureTable.from_blocks([(g, feats.values[:, a:b]) for g, a, b in feats.groups if g not in dropped],
                                         ids=feats.ids)
    feats = apply_reduction(feats, [PcaModel.from_dict(m) for m in extra.get("feature_reduction", [])])
    return selector, feats, ids


@select.command("predict")
@click.pass_obj
@handle_errors
def select_predict(run: Run):
    import csv

    d = run.cfg.data
    ids = load_mos(d.mos).ids if d.mos else None
    selector, feats, ids = _selector_features(run, ids)
    picks = selector.select_many(feats.values)
    scores = None
    if d.predictions:
        preds = load_predictions(d.predictions, ids)
        cols = [preds.method_index(m) for m in selector.method_names]
        scores = preds.values[np.arange(len(ids)), np.asarray(cols)[picks]]
    with open(run.out("picks.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "chosen_method"] + (["assembled_score"] if scores is not None else []))
        for r, (i, p) in enumerate(zip(ids, picks)):
            w.writerow([i, selector.method_names[p]] + ([repr(float(scores[r]))] if scores is not None else []))


@select.command("evaluate")
@click.pass_obj
@handle_errors
def select_evaluate(run: Run):
    ds, preds, _, costs, _ = _selection_inputs(run, reduce=False)
    selector, feats, _ = _selector_features(run, ds.ids)
    if tuple(selector.method_names) != preds.method_names:
        raise ValidationError("selector was trained on a different portfolio")
    rep = evaluate_selector(selector, feats, costs, preds, ds, run.cfg.selection.rows)
    if run.want("csv"):
        rep.write_picks_csv(run.out("picks.csv"))
    doc = rep.to_dict()
    doc["srocc"] = _finite(doc["srocc"])
    for key in ("picks", "ids", "assembled_scores"):
        doc.pop(key)
    run.write_json("eval_report.json", {"rows": run.cfg.selection.rows, **doc})


@main.group()
def simulate():
    """Synthetic noisy portfolios: gap sweeps, selector futility, oracle MAE."""


def _sim_kw(run: Run) -> dict:
    s = run.cfg.simulate
    return {"feature_dim": s.feature_dim, "mos_distribution": s.mos_distribution}


def _write_sweep(run: Run, res: SweepResult, stem: str, y_cols):
    if run.want("csv"):
        res.to_csv(run.out(f"{stem}.csv"))
    run.write_json(f"{stem}.json", res.to_dict())
    if run.want("svg"):
        _sweep_svg(res, y_cols, run.out(f"{stem}.svg"), stem)


def _sweep_svg(res: SweepResult, y_cols, path, title):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.asarray(res.grid, dtype=float)
    for c in y_cols:
        y = res.column(c)
        se = res.columns.get(c + "_se")
        if se is not None and np.all(np.isfinite(se)):
            ax.errorbar(x, y, yerr=np.asarray(se), marker="o", capsize=3, label=c)
        else:
            ax.plot(x, y, marker="o", label=c)
    ax.set_xlabel(res.grid_name)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _write_svg(fig, path)
    plt.close(fig)


@simulate.command("sweep")
@click.pass_obj
@handle_errors
def simulate_sweep(run: Run):
    s = run.cfg.simulate
    if not s.sigma_grid or any(float(v) < 0 for v in s.sigma_grid):
        raise ValidationError("simulate.sigma_grid must be a non-empty list of non-negative numbers")
    res = gap_vs_noise_sweep(s.sigma_grid, s.k, s.n, s.trials, run.cfg.seed, run.threads, **_sim_kw(run))
    _write_sweep(run, res, "sweep", ["sbm_mae", "vbm_mae", "gap"])


@simulate.command("futility")
@click.pass_obj
@handle_errors
def simulate_futility(run: Run):
    s = run.cfg.simulate
    if not s.rho_grid or any(not 0.0 <= float(v) <= 1.0 for v in s.rho_grid):
        raise ValidationError("simulate.rho_grid must be a non-empty list of values in [0, 1]")
    sel = s.selector or {"model_kind": "knn", "hyperparams": {"k": 15}}
    config = SelectorConfig.from_dict({"seed": run.cfg.seed, **sel})
    res = futility_experiment(s.rho_grid, config, s.n, s.k, s.sigma, run.cfg.seed, s.repeats, run.threads,
                              **_sim_kw(run))
    _write_sweep(run, res, "futility", ["gap_closure"])


@simulate.command("oracle-mae")
@click.pass_obj
@handle_errors
def simulate_oracle_mae(run: Run):
    s = run.cfg.simulate
    sigmas = s.sigmas or [s.sigma] * s.k
    bias = s.bias or [0.0] * len(sigmas)
    model = NoiseModel(tuple(bias), tuple(sigmas), 0.0)
    est, se = expected_oracle_mae(model, s.oracle_trials, run.cfg.seed)
    doc = {"k": model.k, "bias": list(model.bias), "sigma": list(model.sigma), "trials": s.oracle_trials,
           "estimate": est, "standard_error": _finite(se)}
    if all(b == 0 for b in model.bias) and len(set(model.sigma)) == 1:
        doc["quadrature"] = pure_noise_oracle_mae(model.k, model.sigma[0])
        doc["single_method_mae"] = model.sigma[0] * math.sqrt(2.0 / math.pi)
    if run.want("csv"):
        import csv

        with open(run.out("oracle_mae.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "trials", "estimate", "standard_error", "quadrature"])
            w.writerow([model.k, s.oracle_trials, repr(est), repr(se), repr(doc.get("quadrature", float("nan")))])
    run.write_json("oracle_mae.json", doc)


@main.command()
@click.pass_obj
@handle_errors
def report(run: Run):
    """Render a sweep/futility CSV as an SVG line chart."""
    import csv

    r = run.cfg.report
    path = _require(r.input, "report.input")
    if not Path(path).is_file():
        raise DataIOError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    x_name = r.x or header[0]
    try:
        cols = {h: [float(row[j]) for row in body] for j, h in enumerate(header)}
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"{path}: expected a rectangular numeric table ({exc})") from exc
    if x_name not in cols:
        raise ValidationError(f"column {x_name!r} not in {path}")
    y_cols = r.y or [h for h in header[1:] if not h.endswith("_se")]
    missing = [c for c in y_cols if c not in cols]
    if missing:
        raise ValidationError(f"column {missing[0]!r} not in {path}")
    others = {h: v for h, v in cols.items() if h != x_name}
    res = SweepResult(x_name, cols[x_name], others)
    _sweep_svg(res, y_cols, run.out(Path(path).stem + ".svg"), r.title or Path(path).stem)


if __name__ == "__main__":
    main()
