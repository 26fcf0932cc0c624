"""Per-instance algorithm selection benchmarks for portfolios of quality predictors."""

__version__ = "0.1.0"

from .alignment import AlignOptions, Logistic5Params, align_portfolio, apply_logistic5, fit_logistic5
from .dataset import (
    FeatureGroup,
    FeatureGroupSpec,
    FeatureTable,
    PredictionTable,
    QualityDataset,
    load_dataset,
    scale_mos,
    split_dataset,
)
from .errors import (
    DataIOError,
    NumericalError,
    PortfolioError,
    ValidationError,
)
from .features import (
    PcaModel,
    ScalerModel,
    pca_fit,
    pca_transform,
    reduce_feature_groups,
    standardize_apply,
    standardize_fit,
)
from .metrics import (
    ClusterTree,
    CostMatrix,
    cost_matrix,
    mae,
    method_correlation_matrix,
    rank_count_table,
    signed_error_pairs,
    srocc,
    ward_cluster,
)
from .noiselab import (
    NoiseModel,
    SweepResult,
    expected_oracle_mae,
    futility_experiment,
    gap_vs_noise_sweep,
    simulate_portfolio,
)
from .selection import (
    EvalReport,
    Selector,
    SelectorConfig,
    evaluate_picks,
    evaluate_selector,
    exclude_method,
    oracle_assign,
    search_selectors,
    select,
    single_best,
    train_selector,
)
