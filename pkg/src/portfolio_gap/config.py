"""Run configuration: a strict JSON schema mapped onto nested dataclasses.

Unknown keys anywhere in the document are rejected.  Relative paths are
resolved against the directory holding the config file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataIOError, ValidationError


@dataclass
class DataConfig:
    mos: str | None = None
    predictions: str | None = None
    features: str | None = None
    predictions_aligned: bool = False


@dataclass
class ScaleConfig:
    enabled: bool = False
    lo: float = 0.0
    hi: float = 100.0


@dataclass
class SplitConfig:
    val_count: int = 0


@dataclass
class AlignmentConfig:
    max_iter: int = 500
    tol: float = 1e-10
    restarts: int = 10
    fit_rows: str = "train"


@dataclass
class FeaturesConfig:
    cap: int | None = 100
    standardize: bool = True


@dataclass
class BenchmarkConfig:
    rows: str = "test"
    depth: int = 3
    distance: str = "one_minus_srocc"
    scatter_pairs: list | None = None


@dataclass
class SelectionConfig:
    config: dict | None = None
    space: typing.Any = None
    budget: int = 20
    folds: int = 5
    selector: str | None = None
    rows: str = "test"
    exclude: list | None = None


@dataclass
class SimulateConfig:
    k: int = 8
    n: int = 5000
    sigma: float = 10.0
    sigma_grid: list = field(default_factory=lambda: [0.0, 2.5, 5.0, 10.0, 20.0])
    rho_grid: list = field(default_factory=lambda: [0.0, 0.5, 1.0])
    trials: int = 10
    repeats: int = 10
    oracle_trials: int = 1_000_000
    bias: list | None = None
    sigmas: list | None = None
    feature_dim: int = 2
    mos_distribution: str = "uniform"
    selector: dict | None = None


@dataclass
class ReportConfig:
    input: str | None = None
    x: str | None = None
    y: list | None = None
    title: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    threads: int | None = None
    out: str = "out"
    formats: list = field(default_factory=lambda: ["json", "csv"])
    data: DataConfig = field(default_factory=DataConfig)
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything that can change outputs; thread count and output dir are excluded."""
        doc = self.to_dict()
        doc.pop("threads", None)
        doc.pop("out", None)
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_PATH_FIELDS = {("data", "mos"), ("data", "predictions"), ("data", "features"),
                ("selection", "selector"), ("report", "input")}


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ValidationError(f"config {where or 'root'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValidationError(f"config {where or 'root'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = _coerce(tp, value, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if type(None) in args or tp is typing.Any:
            return None
        raise ValidationError(f"config {where}: null is not allowed")
    if tp is typing.Any:
        return value
    if args and type(None) in args:
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    target = origin or tp
    if target is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"config {where}: expected true/false")
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"config {where}: expected an integer")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"config {where}: expected a number")
        return float(value)
    if target is str:
        if not isinstance(value, str):
            raise ValidationError(f"config {where}: expected a string")
        return value
    if target is list:
        if not isinstance(value, list):
            raise ValidationError(f"config {where}: expected a list")
        return value
    if target is dict:
        if not isinstance(value, dict):
            raise ValidationError(f"config {where}: expected an object")
        return value
    return value


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path}: invalid JSON ({exc})") from exc
    cfg = _build(RunConfig, doc, "")
    base = path.resolve().parent
    for section, key in _PATH_FIELDS:
        sub = getattr(cfg, section)
        value = getattr(sub, key)
        if value is not None and not Path(value).is_absolute():
            setattr(sub, key, str(base / value))
    if "out" in doc and not Path(cfg.out).is_absolute():
        cfg.out = str(base / cfg.out)
    return cfg
