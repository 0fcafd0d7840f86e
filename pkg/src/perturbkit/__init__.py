"""Benchmarking engine for single-cell perturbation-response prediction."""

from .dataset import (
    Condition,
    ControlIndex,
    CounterfactualRequest,
    DatasetMeta,
    PerturbationDataset,
    build_control_index,
    build_counterfactual_requests,
    load_dataset,
    sample_matched_controls,
    save_dataset,
)
from .errors import (
    ControlError,
    FormatError,
    GeneMismatchError,
    PerturbkitError,
    SplitError,
    TrainError,
    UsageError,
    ValidationError,
)
from .evaluate import MetricReport, diagnose_collapse, evaluate, write_report
from .hpo import (
    Choice,
    LogUniform,
    Trial,
    UniformFloat,
    UniformInt,
    hpo_search,
    stability_reruns,
    validation_report,
)
from .metrics import (
    MetricValue,
    SimilarityMatrix,
    composite_objective,
    distributional_metric,
    fit_metric,
    matrix_distance,
    rank_metric,
    similarity_matrix,
    transposed_rank_metric,
)
from .models import (
    ModelConfig,
    OneHotVocab,
    TrainedModel,
    load_model,
    predict,
    save_model,
    train_model,
)
from .preprocess import (
    AggregateTable,
    ConditionAggregate,
    aggregate_means,
    compute_logfc,
    log_normalize,
    read_aggregates,
    select_genes,
    write_aggregates,
)
from .splits import (
    SplitAssignment,
    SplitSpec,
    compute_imbalance,
    downsample_to_imbalance,
    load_split,
    make_split,
    save_split,
)
from .synth import GroundTruth, SynthSpec, export_truth, generate, oracle_predict

__version__ = "0.1.0"
