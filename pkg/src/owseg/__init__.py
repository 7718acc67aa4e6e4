"""Open-world skeleton action segmentation: pyramid graph-convolutional
encoder, temporal upsampling decoder, clustering-regularized training, and a
recognize / detect-novel / cluster / map evaluation pipeline."""

from .checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint
from .clustering import kmeans, map_clusters
from .config import LossConfig, ModelConfig, TrainConfig, config_from_text, config_to_text
from .data import (
    OpenWorldSplit,
    SkeletonGraph,
    SkeletonSequence,
    generate_synthetic,
    load_dataset,
    make_split,
    save_dataset,
)
from .decoder import PyramidPoolingDecoder, TemporalUpsamplingDecoder
from .encoder import PyramidEncoder, STGCNBlock, init_parameters
from .errors import DatasetFormatError, PrototypeStateError, TrainingError
from .losses import (
    ClassPrototype,
    inter_loss,
    intra_loss,
    mixup_pair,
    total_loss,
    update_class_means,
)
from .metrics import (
    MetricReport,
    acc_ood,
    auroc,
    corpus_f1_at_k,
    f1_at_k,
    frame_accuracy,
    h_score,
    openness,
    split_openness,
    to_segments,
)
from .model import (
    SegmentationModel,
    assemble_batch,
    build_model,
    forward_in_length_groups,
)
from .pipeline import (
    NoveltyDetector,
    calibrate_threshold,
    cluster_novel,
    detect,
    evaluate_outcomes,
    recognize,
    run_pipeline,
)
from .trainer import TrainResult, sgd_step, train

__all__ = [
    "Checkpoint",
    "ClassPrototype",
    "DatasetFormatError",
    "LossConfig",
    "MetricReport",
    "ModelConfig",
    "NoveltyDetector",
    "OpenWorldSplit",
    "PrototypeStateError",
    "PyramidEncoder",
    "PyramidPoolingDecoder",
    "STGCNBlock",
    "SegmentationModel",
    "SkeletonGraph",
    "SkeletonSequence",
    "TemporalUpsamplingDecoder",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "acc_ood",
    "assemble_batch",
    "auroc",
    "build_model",
    "forward_in_length_groups",
    "calibrate_threshold",
    "cluster_novel",
    "config_from_text",
    "config_to_text",
    "corpus_f1_at_k",
    "detect",
    "evaluate_outcomes",
    "f1_at_k",
    "frame_accuracy",
    "generate_synthetic",
    "h_score",
    "init_parameters",
    "inter_loss",
    "intra_loss",
    "kmeans",
    "load_checkpoint",
    "load_dataset",
    "make_split",
    "map_clusters",
    "mixup_pair",
    "openness",
    "recognize",
    "restore_model",
    "run_pipeline",
    "save_checkpoint",
    "save_dataset",
    "sgd_step",
    "split_openness",
    "to_segments",
    "total_loss",
    "train",
    "update_class_means",
]
