"""Few-shot semantic segmentation with prototypical matching, in pure numpy."""

from .autodiff import Tensor, no_grad
from .data import (
    CLASS_NAMES,
    NUM_CLASSES,
    Episode,
    EpisodeSpec,
    LoadedDataset,
    generate_dataset,
    load_dataset,
    sample_episode,
)
from .encoder import Encoder, EncoderConfig
from .errors import (
    ContractViolationError,
    DatasetError,
    EmptyClassError,
    TrainingError,
    UnderPopulatedClassError,
)
from .gradcheck import GradientReport, gradient_check
from .metrics import (
    CSV_COLUMNS,
    AggregateReport,
    ConfusionMatrix,
    MetricReport,
    aggregate_reports,
    compute_metrics,
    confusion_matrix,
    pooled_report,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    evaluate,
    finetune_stage,
    pretrain_stage,
    restore_model,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "gradient_check",
    "GradientReport",
    "CLASS_NAMES",
    "NUM_CLASSES",
    "Episode",
    "EpisodeSpec",
    "LoadedDataset",
    "generate_dataset",
    "load_dataset",
    "sample_episode",
    "Encoder",
    "EncoderConfig",
    "CSV_COLUMNS",
    "AggregateReport",
    "ConfusionMatrix",
    "MetricReport",
    "aggregate_reports",
    "compute_metrics",
    "confusion_matrix",
    "pooled_report",
    "Checkpoint",
    "TrainConfig",
    "evaluate",
    "finetune_stage",
    "pretrain_stage",
    "restore_model",
    "ContractViolationError",
    "EmptyClassError",
    "DatasetError",
    "UnderPopulatedClassError",
    "TrainingError",
    "__version__",
]
