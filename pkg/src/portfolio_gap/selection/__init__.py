from .core import (
    EvalReport,
    evaluate_picks,
    evaluate_selector,
    exclude_method,
    gap_closure,
    oracle_assign,
    single_best,
)
from .models import (
    MODEL_KINDS,
    Selector,
    SelectorConfig,
    fit_selector,
    load_selector,
    save_selector,
    select,
    train_selector,
)
from .search import SearchEntry, cross_validate, cv_folds, default_space, expand_space, search_selectors

__all__ = [
    "EvalReport",
    "MODEL_KINDS",
    "Selector",
    "SelectorConfig",
    "SearchEntry",
    "cross_validate",
    "cv_folds",
    "default_space",
    "evaluate_picks",
    "evaluate_selector",
    "exclude_method",
    "expand_space",
    "fit_selector",
    "gap_closure",
    "load_selector",
    "oracle_assign",
    "save_selector",
    "search_selectors",
    "select",
    "single_best",
    "train_selector",
]
