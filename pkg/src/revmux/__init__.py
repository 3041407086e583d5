"""Reversible multi-input multiplexing for frozen transformer text encoders.

Several classification inputs are compressed into one composite sequence,
pushed through the expensive suffix of a shared encoder in a single forward
pass, then exactly recovered by inverting the mixing transform. The package
provides the numeric core (autodiff tensors, encoder backbone), the
invertible adapter stack, training objectives, the training and evaluation
pipelines, an analytical cost model, and sklearn-style estimator wrappers.
"""

from .adapters import CouplingMLP, RevMuxAdapters
from .backbone import ConfigError, EncoderConfig, EncoderModel
from .checkpoint import CheckpointFormatError, load_arrays, save_arrays
from .data import (
    ArrayDataset,
    DataError,
    Example,
    Vocab,
    load_jsonl,
    save_jsonl,
    synth_task,
    task_vocab,
    tokenize_dataset,
)
from .estimator import EncoderTextClassifier, MultiplexedTextClassifier
from .evaluation import (
    EvalReport,
    FlopsReport,
    accuracy_cdf,
    count_flops,
    evaluate_rounds,
    save_cdf_csv,
)
from .objectives import LossBreakdown, combined_loss, infonce_loss
from .optim import Adam
from .pipeline import (
    CompositeBatch,
    PretrainConfig,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    build_composite_batch,
    form_groups,
    plain_accuracy,
    quick_eval,
    revmux_forward,
    teacher_forward,
    train_adapters,
    train_backbone,
)
from .tensor import ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ArrayDataset",
    "CheckpointFormatError",
    "CompositeBatch",
    "ConfigError",
    "CouplingMLP",
    "DataError",
    "EncoderConfig",
    "EncoderModel",
    "EncoderTextClassifier",
    "EvalReport",
    "Example",
    "FlopsReport",
    "LossBreakdown",
    "MultiplexedTextClassifier",
    "PretrainConfig",
    "RevMuxAdapters",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "Vocab",
    "accuracy_cdf",
    "build_composite_batch",
    "combined_loss",
    "count_flops",
    "evaluate_rounds",
    "form_groups",
    "infonce_loss",
    "load_arrays",
    "load_jsonl",
    "no_grad",
    "plain_accuracy",
    "quick_eval",
    "revmux_forward",
    "teacher_forward",
    "save_arrays",
    "save_cdf_csv",
    "save_jsonl",
    "synth_task",
    "task_vocab",
    "tokenize_dataset",
    "train_adapters",
    "train_backbone",
    "__version__",
]
