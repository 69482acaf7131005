"""Training, inference, evaluation and cross-validation."""

from .crossval import FoldSplit, crossval, crossval_ladder, fold_split
from .evaluation import (
    STRUCTURES,
    MetricsReport,
    abnormal_union,
    case_dsc,
    dsc,
    fuse_average,
    permutation_test,
    report_table,
    union_ensemble,
)
from .training import (
    TrainConfig,
    TrainedModel,
    infer_whole,
    load_checkpoint,
    predict_case,
    save_checkpoint,
    train,
)
