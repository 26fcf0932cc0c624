"""Per-method 5-parameter logistic alignment of raw scores to the MOS scale.

The curve is

    f(x) = b1 * (1/2 - 1/(1 + exp(b2 * (x - b3)))) + b4 * x + b5

fitted by Levenberg-Marquardt with an analytic Jacobian and a few seeded
restarts.
"""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataset import PredictionTable, QualityDataset
from .errors import (
    AlreadyAlignedError,
    DataIOError,
    DegenerateInputError,
    InsufficientDataError,
    NumericalError,
    PortfolioError,
    ValidationError,
)
from .metrics import fractional_ranks


@dataclass(frozen=True)
class AlignOptions:
    max_iter: int = 500
    tol: float = 1e-10
    restarts: int = 10
    seed: int = 0


@dataclass(frozen=True)
class FitInfo:
    converged: bool
    iterations: int
    final_rmse: float
    restarts_used: int
    monotone: bool = True


@dataclass(frozen=True)
class Logistic5Params:
    beta: tuple[float, float, float, float, float]
    fit_info: FitInfo = field(default_factory=lambda: FitInfo(True, 0, 0.0, 0))

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        if len(beta) != 5:
            raise ValidationError("a 5-parameter logistic needs exactly 5 betas")
        if not all(np.isfinite(beta)):
            raise ValidationError("logistic parameters must be finite")
        if self.fit_info.final_rmse < 0:
            raise ValidationError("final_rmse must be non-negative")
        object.__setattr__(self, "beta", beta)

    def to_dict(self) -> dict:
        return {"beta": list(self.beta), "fit_info": asdict(self.fit_info)}

    @classmethod
    def from_dict(cls, d: dict) -> "Logistic5Params":
        return cls(tuple(d["beta"]), FitInfo(**d.get("fit_info", {"converged": True, "iterations": 0,
                                                                   "final_rmse": 0.0, "restarts_used": 0})))


def logistic5(beta, x) -> np.ndarray:
    b1, b2, b3, b4, b5 = beta
    x = np.asarray(x, dtype=np.float64)
    # 1/2 - 1/(1+exp(z)) == expit(z) - 1/2, which saturates instead of overflowing
    return b1 * (expit(b2 * (x - b3)) - 0.5) + b4 * x + b5


def _jacobian(beta, x) -> np.ndarray:
    b1, b2, b3, _, _ = beta
    s = expit(b2 * (x - b3))
    ds = s * (1.0 - s)
    J = np.empty((x.size, 5))
    J[:, 0] = s - 0.5
    J[:, 1] = b1 * ds * (x - b3)
    J[:, 2] = -b1 * ds * b2
    J[:, 3] = x
    J[:, 4] = 1.0
    return J


def _levenberg_marquardt(beta0, x, y, max_iter, tol):
    """Marquardt-scaled LM.  One iteration is one Jacobian evaluation; rejected
    damping trials within it do not count against ``max_iter``."""
    beta = np.array(beta0, dtype=np.float64)
    r = logistic5(beta, x) - y
    ssr = float(r @ r)
    floor = 1e-28 * (1.0 + float(y @ y))
    lam = 1e-3
    it = 0
    converged = False
    while it < max_iter:
        if ssr <= floor:
            converged = True
            break
        it += 1
        J = _jacobian(beta, x)
        d = np.einsum("ij,ij->j", J, J)
        d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        b = np.concatenate([-r, np.zeros(5)])
        while True:
            A = np.vstack([J, np.diag(np.sqrt(lam * d))])
            step, *_ = np.linalg.lstsq(A, b, rcond=None)
            trial = beta + step
            r_new = logistic5(trial, x) - y
            ssr_new = float(r_new @ r_new)
            if np.isfinite(ssr_new) and ssr_new < ssr:
                rel = (ssr - ssr_new) / ssr
                beta, r, ssr = trial, r_new, ssr_new
                lam = max(lam / 10.0, 1e-15)
                converged = rel < tol
                break
            lam *= 10.0
            if lam > 1e16:
                # no descent direction left at machine precision
                converged = True
                break
        if converged:
            break
    return beta, ssr, it, converged


def _initial_beta(raw, target):
    rr, rt = fractional_ranks(raw), fractional_ranks(target)
    rr = rr - rr.mean()
    rt = rt - rt.mean()
    denom = np.sqrt((rr @ rr) * (rt @ rt))
    corr = float(rr @ rt / denom) if denom > 0 else 1.0
    sign = -1.0 if corr < 0 else 1.0
    span = float(raw.max() - raw.min())
    return np.array([
        float(target.max() - target.min()),
        sign * 4.0 / span,
        float(np.median(raw)),
        0.0,
        float(target.mean()),
    ])


def _linear_design(b2, b3, x):
    s = expit(b2 * (x - b3))
    return np.column_stack([s - 0.5, x, np.ones_like(x)]), s


def _solve_linear_part(beta, x, y):
    """Given slope and midpoint, the amplitude, linear and offset terms solve a linear least-squares problem."""
    A, _ = _linear_design(beta[1], beta[2], x)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    out = np.array(beta, dtype=np.float64)
    out[[0, 3, 4]] = coef
    return out


def _projected_lm(beta0, x, y, max_iter, tol):
    """LM over (b2, b3) alone, with b1, b4, b5 solved exactly at every point.

    Uses the Kaufman Jacobian: the nonlinear columns projected onto the
    orthogonal complement of the linear design.  This walks the curved
    amplitude/slope valley that full five-parameter LM crosses slowly when
    the logistic is nearly linear over the data.
    """
    theta = np.array(beta0[1:3], dtype=np.float64)

    def evaluate(th):
        A, s = _linear_design(th[0], th[1], x)
        c, *_ = np.linalg.lstsq(A, y, rcond=None)
        r = A @ c - y
        return A, s, c, r, float(r @ r)

    A, s, c, r, ssr = evaluate(theta)
    floor = 1e-28 * (1.0 + float(y @ y))
    lam = 1e-3
    it = 0
    converged = False
    while it < max_iter:
        if ssr <= floor:
            converged = True
            break
        it += 1
        ds = s * (1.0 - s)
        Jn = np.column_stack([c[0] * ds * (x - theta[1]), -c[0] * ds * theta[0]])
        Q, _ = np.linalg.qr(A)
        J = Jn - Q @ (Q.T @ Jn)
        d = np.einsum("ij,ij->j", J, J)
        d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        b = np.concatenate([-r, np.zeros(2)])
        while True:
            M = np.vstack([J, np.diag(np.sqrt(lam * d))])
            step, *_ = np.linalg.lstsq(M, b, rcond=None)
            trial = theta + step
            A2, s2, c2, r2, ssr2 = evaluate(trial)
            if np.isfinite(ssr2) and ssr2 < ssr:
                rel = (ssr - ssr2) / ssr
                theta, A, s, c, r, ssr = trial, A2, s2, c2, r2, ssr2
                lam = max(lam / 10.0, 1e-15)
                converged = rel < tol
                break
            lam *= 10.0
            if lam > 1e16:
                converged = True
                break
        if converged:
            break
    beta = np.array([c[0], theta[0], theta[1], c[1], c[2]])
    return beta, ssr, it, converged


def fit_logistic5(raw, target, opts: AlignOptions | None = None) -> Logistic5Params:
    """Least-squares fit of the 5-parameter logistic; best of ``opts.restarts`` starts."""
    opts = opts or AlignOptions()
    x = np.asarray(raw, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValidationError("raw and target must have equal length")
    if x.size < 5:
        raise InsufficientDataError(f"need at least 5 points to fit 5 parameters, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("raw and target must be finite")
    if np.unique(x).size < 2:
        raise DegenerateInputError("raw scores are constant")

    base = _initial_beta(x, y)
    rng = np.random.default_rng(opts.seed)
    n_starts = max(1, int(opts.restarts))
    exact = 1e-10 * max(1.0, float(np.std(y)))
    best = None
    used = 0
    for s in range(n_starts):
        if s == 0:
            start = base
        else:
            start = base * (1.0 + rng.uniform(-0.5, 0.5, size=5))
            if s % 2 == 0:
                start[1] = -start[1]
            start = _solve_linear_part(start, x, y)
        beta, ssr, iters, conv = _levenberg_marquardt(start, x, y, opts.max_iter, opts.tol)
        if not conv:
            pbeta, pssr, piters, pconv = _projected_lm(beta, x, y, opts.max_iter, opts.tol)
            iters += piters
            if np.all(np.isfinite(pbeta)) and pssr < ssr:
                beta, ssr, conv = pbeta, pssr, pconv
        used += 1
        if best is None or ssr < best[1]:
            best = (beta, ssr, iters, conv)
        if np.sqrt(best[1] / x.size) <= exact:
            break
    beta, ssr, iters, conv = best
    if not np.all(np.isfinite(beta)):
        raise NumericalError("logistic fit diverged")
    grid = np.linspace(x.min(), x.max(), 257)
    diffs = np.diff(logistic5(beta, grid))
    monotone = bool(np.all(diffs >= -1e-12) or np.all(diffs <= 1e-12))
    if not monotone:
        warnings.warn("fitted logistic curve is not monotone over the observed raw range", RuntimeWarning)
    info = FitInfo(bool(conv), int(iters), float(np.sqrt(ssr / x.size)), used, monotone)
    return Logistic5Params(tuple(beta), info)


def apply_logistic5(params: Logistic5Params, raw, clamp=(0.0, 100.0)) -> np.ndarray:
    out = logistic5(params.beta, raw)
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out


def align_portfolio(preds: PredictionTable, ds: QualityDataset, opts: AlignOptions | None = None,
                    fit_rows="train", clamp=None, threads: int = 1):
    """Fit one curve per method on ``fit_rows`` and apply it to every row.

    ``clamp`` defaults to the dataset's scale bounds, or [0, 100].
    """
    if preds.aligned:
        raise AlreadyAlignedError("prediction table is already aligned")
    if preds.n != len(ds):
        raise ValidationError("prediction table and dataset have different row counts")
    if preds.ids is not None and preds.ids != ds.ids:
        raise ValidationError("prediction rows are not in dataset order")
    opts = opts or AlignOptions()
    if clamp is None:
        clamp = ds.scale or (0.0, 100.0)
    mask = ds.mask(fit_rows)
    target = ds.mos[mask]

    def fit_one(k):
        name = preds.method_names[k]
        try:
            return fit_logistic5(preds.values[mask, k], target, opts)
        except PortfolioError as exc:
            raise type(exc)(f"method {name!r}: {exc}") from exc

    ks = range(preds.k)
    if threads > 1 and preds.k > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            params = list(pool.map(fit_one, ks))
    else:
        params = [fit_one(k) for k in ks]
    values = np.column_stack([apply_logistic5(p, preds.values[:, k], clamp) for k, p in enumerate(params)])
    aligned = PredictionTable(preds.method_names, values, aligned=True, ids=preds.ids or ds.ids)
    return aligned, params


def save_params(method_names, params, path):
    doc = {name: p.to_dict() for name, p in zip(method_names, params)}
    try:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def load_params(path) -> dict[str, Logistic5Params]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    return {name: Logistic5Params.from_dict(d) for name, d in doc.items()}
