"""Joint salient / camouflaged object segmentation with a shared ViT and per-task
distribution-learning modules, plus saliency-based subset sampling."""

from .data import Dataset, GenSpec, SamplePair, discover, generate, load, load_manifest
from .estimator import JointSegmenter, SaliencySampler
from .metrics import MaskPair, MetricReport, composite_score, evaluate, pair_metrics
from .model import JointModel, ModelConfig, parameter_partition
from .sbss import SamplingPlan, sample, score_dataset, write_subset_manifest
from .trainer import TaskSpec, TrainConfig, TrainingDivergedError, infer, scjoint_step, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GenSpec",
    "JointModel",
    "JointSegmenter",
    "MaskPair",
    "MetricReport",
    "ModelConfig",
    "SaliencySampler",
    "SamplePair",
    "SamplingPlan",
    "TaskSpec",
    "TrainConfig",
    "TrainingDivergedError",
    "composite_score",
    "discover",
    "evaluate",
    "generate",
    "infer",
    "load",
    "load_manifest",
    "pair_metrics",
    "parameter_partition",
    "sample",
    "score_dataset",
    "scjoint_step",
    "train",
    "write_subset_manifest",
]
