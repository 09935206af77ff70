"""Quantitative prediction of spherical-equivalent progression from
irregularly sampled vision-screening histories.

The pipeline: ingest screening records, build per-eye chronological
histories, expand them into labeled subsequence samples, train a
time-aware LSTM on the length-layered 80/20 split, and report stratified
mean absolute error in diopters.
"""

__version__ = "0.1.0"

from .records import (
    EyeHistory,
    VisionRecord,
    classify_myopia,
    compute_interval,
    compute_se,
    group_histories,
    parse_records,
)
from .preprocess import (
    FEATURE_DIM,
    Sample,
    SplitDataset,
    Standardizer,
    augment,
    encode,
    fit_standardizer,
    split,
)
from .tlstm import (
    CellState,
    TlstmParams,
    decay,
    forward,
    forward_batch,
    load_checkpoint,
    lstm_cell,
    predict_horizon,
    save_checkpoint,
    tlstm_cell,
)
from .training import LossTrace, TrainConfig, TrainResult, mse, train
from .evaluation import StratifiedMetrics, evaluate, mae, render_table
from .synthgen import CohortSpec, generate, reference_composition

__all__ = [
    "VisionRecord",
    "EyeHistory",
    "parse_records",
    "classify_myopia",
    "compute_se",
    "compute_interval",
    "group_histories",
    "FEATURE_DIM",
    "Sample",
    "SplitDataset",
    "Standardizer",
    "encode",
    "fit_standardizer",
    "augment",
    "split",
    "TlstmParams",
    "CellState",
    "decay",
    "lstm_cell",
    "tlstm_cell",
    "forward",
    "forward_batch",
    "predict_horizon",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "TrainResult",
    "LossTrace",
    "mse",
    "train",
    "StratifiedMetrics",
    "evaluate",
    "mae",
    "render_table",
    "CohortSpec",
    "generate",
    "reference_composition",
    "__version__",
]
