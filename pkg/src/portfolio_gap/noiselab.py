"""Synthetic noisy portfolios and the SBM/oracle gap they produce.

Method k predicts

    mos + bias_k + sqrt(rho) * sigma_k * g_k(x) + sqrt(1 - rho) * sigma_k * eps

where ``x`` are observable features, ``g_k`` is a smooth unit-variance
function of them (random Fourier features) and ``eps`` is standard normal.
Only the ``g_k`` part can be learned from features; the rest is noise that
an oracle exploits but no selector can predict.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .dataset import FeatureTable, PredictionTable, QualityDataset
from .errors import ValidationError
from .metrics import CostMatrix, cost_matrix
from .selection.core import evaluate_picks
from .selection.models import SelectorConfig, fit_selector

# reference KonIQ-10k test-set MAEs of the single best method and of the oracle
REFERENCE_SBM_MAE = 4.154
REFERENCE_VBM_MAE = 2.069

_REFERENCE_POINTS = 1 << 14


@dataclass(frozen=True)
class NoiseModel:
    bias: tuple[float, ...]
    sigma: tuple[float, ...]
    rho: float = 0.0
    mos_distribution: str = "uniform"
    beta_shape: tuple[float, float] = (4.0, 3.0)
    feature_dim: int = 2
    n_fourier: int = 16
    length_scale: float = 1.0
    antithetic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "bias", tuple(float(b) for b in self.bias))
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if len(self.bias) != len(self.sigma) or not self.sigma:
            raise ValidationError("need one bias and one sigma per method")
        if any(s < 0 for s in self.sigma):
            raise ValidationError("noise sigma must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationError("rho must lie in [0, 1]")
        if self.mos_distribution not in ("uniform", "beta"):
            raise ValidationError("mos_distribution must be 'uniform' or 'beta'")
        if self.feature_dim < 1 or self.n_fourier < 1 or self.length_scale <= 0:
            raise ValidationError("feature_dim, n_fourier and length_scale must be positive")

    @property
    def k(self) -> int:
        return len(self.sigma)

    @classmethod
    def equal(cls, k: int, sigma: float, rho: float = 0.0, bias: float = 0.0, **kw) -> "NoiseModel":
        return cls((bias,) * k, (sigma,) * k, rho, **kw)

    def method_names(self) -> tuple[str, ...]:
        return tuple(f"m{k + 1}" for k in range(self.k))


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


class FourierFunctions:
    """K seeded smooth functions of x, each shifted and scaled to zero mean and unit variance."""

    def __init__(self, model: NoiseModel, ss: np.random.SeedSequence):
        rng = np.random.default_rng(ss)
        K, d, J = model.k, model.feature_dim, model.n_fourier
        self.omega = rng.normal(0.0, 1.0 / model.length_scale, size=(K, J, d))
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=(K, J))
        self.amp = rng.normal(size=(K, J))
        ref = rng.normal(size=(_REFERENCE_POINTS, d))
        raw = self._raw(ref)
        self.shift = raw.mean(axis=0)
        self.scale = raw.std(axis=0)
        self.scale[self.scale == 0] = 1.0
        self.antithetic = model.antithetic

    def _raw(self, x):
        z = np.einsum("nd,kjd->nkj", x, self.omega) + self.phase
        return np.einsum("nkj,kj->nk", np.cos(z), self.amp)

    def __call__(self, x) -> np.ndarray:
        g = (self._raw(np.asarray(x, dtype=np.float64)) - self.shift) / self.scale
        if self.antithetic:
            for k in range(1, g.shape[1], 2):
                g[:, k] = -g[:, k - 1]
        return g


def simulate_portfolio(n: int, model: NoiseModel, seed=0, test_fraction: float = 0.5):
    """Draw a synthetic dataset, its (already aligned) predictions and features.

    The first ``n - round(n * test_fraction)`` instances are tagged train and
    the rest test.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    ss = _seed_sequence(seed)
    s_mos, s_x, s_g, s_eps = ss.spawn(4)
    K = model.k
    rng = np.random.default_rng(s_mos)
    if model.mos_distribution == "uniform":
        mos = rng.uniform(0.0, 100.0, size=n)
    else:
        mos = 100.0 * rng.beta(*model.beta_shape, size=n)
    x = np.random.default_rng(s_x).normal(size=(n, model.feature_dim))
    g = FourierFunctions(model, s_g)(x)
    eps = np.column_stack([np.random.default_rng(c).normal(size=n) for c in s_eps.spawn(K)])
    sigma = np.asarray(model.sigma)
    preds = (mos[:, None] + np.asarray(model.bias)
             + math.sqrt(model.rho) * sigma * g
             + math.sqrt(1.0 - model.rho) * sigma * eps)
    n_test = int(round(n * test_fraction))
    split = ("train",) * (n - n_test) + ("test",) * n_test
    ids = tuple(f"s{i:06d}" for i in range(n))
    ds = QualityDataset(ids, mos, split)
    table = PredictionTable(model.method_names(), preds, aligned=True, ids=ids)
    features = FeatureTable(x, (("latent", 0, model.feature_dim),), ids)
    return ds, table, features


def expected_oracle_mae(model: NoiseModel, trials: int = 1_000_000, seed=0, chunk: int = 1 << 17):
    """Monte Carlo estimate of E[min_k |bias_k + sigma_k * eps_k|] and its standard error.

    Each method draws from its own stream (child ``k`` of the seed), so the
    first K methods see identical draws regardless of the portfolio size.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    if model.rho != 0.0:
        raise ValidationError("expected_oracle_mae is defined for pure-noise models (rho = 0)")
    streams = [np.random.default_rng(c) for c in _seed_sequence(seed).spawn(model.k)]
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        best = np.full(m, np.inf)
        for b, s, rng in zip(model.bias, model.sigma, streams):
            np.minimum(best, np.abs(b + s * rng.normal(size=m)), out=best)
        total += float(best.sum())
        total_sq += float(best @ best)
        done += m
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0)
    se = math.sqrt(var / trials) if trials > 1 else float("nan")
    return mean, se


def pure_noise_oracle_mae(k: int, sigma: float = 1.0) -> float:
    """Expected oracle MAE of K unbiased methods with equal noise, by quadrature."""
    val, _ = integrate.quad(lambda t: special.erfc(t / math.sqrt(2.0)) ** k, 0.0, np.inf)
    return sigma * val


@dataclass
class SweepResult:
    grid_name: str
    grid: list[float]
    columns: dict[str, list[float]]
    meta: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return np.asarray(self.columns[name], dtype=np.float64)

    def to_csv(self, path):
        names = list(self.columns)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.grid_name, *names])
            for j, g in enumerate(self.grid):
                w.writerow([repr(float(g)), *(repr(float(self.columns[c][j])) for c in names)])

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        return {
            "grid_name": self.grid_name,
            "grid": list(self.grid),
            "columns": {k: [clean(float(v)) for v in vals] for k, vals in self.columns.items()},
            "meta": self.meta,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def _mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def _run_jobs(fn, jobs, threads):
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _portfolio_gap(costs: CostMatrix):
    col = costs.values.mean(axis=0)
    sbm = float(col.min())
    vbm = float(costs.values.min(axis=1).mean())
    return sbm, vbm


def gap_vs_noise_sweep(sigmas, k: int = 8, n: int = 2000, trials: int = 10, seed: int = 0,
                       threads: int = 1, **model_kw) -> SweepResult:
    """SBM and oracle MAE of pure-noise portfolios over a grid of noise levels.

    The single best method is chosen in-sample.  Each (grid point, trial)
    draws from the stream ``SeedSequence([seed, point, trial])``.
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas:
        raise ValidationError("sigma grid is empty")
    if trials < 1:
        raise ValidationError("trials must be >= 1")

    def job(jt):
        j, t = jt
        model = NoiseModel.equal(k, sigmas[j], 0.0, **model_kw)
        ds, preds, _ = simulate_portfolio(n, model, np.random.SeedSequence([seed, j, t]))
        return _portfolio_gap(cost_matrix(preds, ds))

    jobs = [(j, t) for j in range(len(sigmas)) for t in range(trials)]
    results = _run_jobs(job, jobs, threads)
    cols = {c: [] for c in ("sbm_mae", "sbm_mae_se", "vbm_mae", "vbm_mae_se", "gap", "gap_se",
                            "ratio", "ratio_se")}
    for j in range(len(sigmas)):
        res = np.array(results[j * trials:(j + 1) * trials])
        sbm, vbm = res[:, 0], res[:, 1]
        for name, vals in (("sbm_mae", sbm), ("vbm_mae", vbm), ("gap", sbm - vbm)):
            m, se = _mean_se(vals)
            cols[name].append(m)
            cols[name + "_se"].append(se)
        if np.all(sbm > 0):
            m, se = _mean_se(vbm / sbm)
        else:
            m, se = float("nan"), float("nan")
        cols["ratio"].append(m)
        cols["ratio_se"].append(se)
    meta = {
        "k": k, "n": n, "trials": trials, "seed": seed,
        "pure_noise_ratio": pure_noise_oracle_mae(k) / math.sqrt(2.0 / math.pi),
        "reference_sbm_mae": REFERENCE_SBM_MAE,
        "reference_vbm_mae": REFERENCE_VBM_MAE,
        "reference_ratio": REFERENCE_VBM_MAE / REFERENCE_SBM_MAE,
    }
    return SweepResult("sigma", sigmas, cols, meta)


def futility_experiment(rhos, config: SelectorConfig, n: int = 5000, k: int = 8, sigma: float = 10.0,
                        seed: int = 0, repeats: int = 10, threads: int = 1, **model_kw) -> SweepResult:
    """Train ``config`` on the train half and report its gap closure on the test half, per rho."""
    rhos = [float(r) for r in rhos]
    if not rhos:
        raise ValidationError("rho grid is empty")
    if any(not 0.0 <= r <= 1.0 for r in rhos):
        raise ValidationError("rho values must lie in [0, 1]")

    def job(jr):
        j, r = jr
        model = NoiseModel.equal(k, sigma, rhos[j], **model_kw)
        ds, preds, feats = simulate_portfolio(n, model, np.random.SeedSequence([seed, j, r]))
        costs = cost_matrix(preds, ds)
        tr = ds.indices("train")
        sel = fit_selector(config, feats.values[tr], costs.values[tr], costs.method_names)
        te = ds.indices("test")
        rep = evaluate_picks(sel.select_many(feats.values[te]), costs, preds, ds, "test",
                             sbm_index=sel.sbm_index)
        return rep.sbm_mae, rep.oracle_mae, rep.mae, rep.gap_closure

    jobs = [(j, r) for j in range(len(rhos)) for r in range(repeats)]
    results = _run_jobs(job, jobs, threads)
    names = ("sbm_mae", "vbm_mae", "selector_mae", "gap_closure")
    cols = {}
    for name in names:
        cols[name] = []
        cols[name + "_se"] = []
    cols["gap"] = []
    for j in range(len(rhos)):
        res = np.array(results[j * repeats:(j + 1) * repeats])
        for c, name in enumerate(names):
            m, se = _mean_se(res[:, c])
            cols[name].append(m)
            cols[name + "_se"].append(se)
        cols["gap"].append(float(np.mean(res[:, 0] - res[:, 1])))
    meta = {"k": k, "n": n, "sigma": sigma, "repeats": repeats, "seed": seed, "selector": config.to_dict()}
    return SweepResult("rho", rhos, cols, meta)
