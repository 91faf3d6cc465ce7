"""Data-free model merging toolkit.

Train domain models on non-IID partitions, merge parameters with exact
pooled normalization buffers, synthesize pseudo-data by inverting those
buffers, and distill divergent models back into the merged one -- all
without touching the original training data after the merge point.
"""

from .data import Dataset, PartitionPlan, dirichlet_partition, make_blobs, make_patterns
from .distillation import DistillJob, FilterConfig, filter_samples, kd_loss, refine
from .inversion import InversionConfig, PseudoBatch, inversion_loss, synthesize
from .merging import (
    MergePlan,
    compute_offset,
    divergence_score,
    merge_buffers,
    merge_parameters,
    plan_and_merge,
    select_outliers,
)
from .network import (
    BufferStats,
    Checkpoint,
    ModelSpec,
    TrainConfig,
    evaluate,
    forward,
    init_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train,
    update_buffers,
)
from .tensor import Tensor, backward, forward_op, grad_check

__version__ = "0.1.0"

__all__ = [
    "Dataset", "PartitionPlan", "dirichlet_partition", "make_blobs", "make_patterns",
    "DistillJob", "FilterConfig", "filter_samples", "kd_loss", "refine",
    "InversionConfig", "PseudoBatch", "inversion_loss", "synthesize",
    "MergePlan", "compute_offset", "divergence_score", "merge_buffers",
    "merge_parameters", "plan_and_merge", "select_outliers",
    "BufferStats", "Checkpoint", "ModelSpec", "TrainConfig", "evaluate", "forward",
    "init_checkpoint", "load_checkpoint", "save_checkpoint", "train", "update_buffers",
    "Tensor", "backward", "forward_op", "grad_check",
    "__version__",
]
