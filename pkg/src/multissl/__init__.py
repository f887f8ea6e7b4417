"""Multi-task multi-modal self-supervised representation learning toolkit."""

from .autodiff import Parameter, Tensor, backward, zero_grads
from .clustering import CentroidSet, ClusterQueue, assign, fuse_multimodal, kmeans_fit
from .data import (InMemoryDataset, Manifest, SampleRecord, Split, SynthConfig,
                   average_over_time, load_manifest, make_batches,
                   read_feature_file, synth_generate, write_feature_file)
from .estimators import (LinearProbeClassifier, MultiModalEncoder,
                         check_modality_arrays)
from .heads import (ClassifierHead, ClusteringHead, Decoder, ModelBundle,
                    ProjectionHead, RepresentationHead, fuse_for_classifier)
from .losses import (LossBreakdown, LossConfig, Method, clustering_loss,
                     feature_augment, info_nce, mms_pair, mms_total,
                     multitask_loss, recon_loss)
from .metrics import (MetricsReport, confusion_matrix, weighted_metrics_multilabel,
                      weighted_metrics_single)
from .optim import AdamW, LrSchedule, adamw_step, lr_at
from .training import (Checkpoint, DownstreamConfig, PretrainConfig,
                       attach_probe_and_train, load_checkpoint, pretrain,
                       save_checkpoint, write_run_log)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CentroidSet", "Checkpoint", "ClassifierHead", "ClusterQueue",
    "ClusteringHead", "Decoder", "DownstreamConfig", "InMemoryDataset",
    "LinearProbeClassifier", "LossBreakdown", "LossConfig", "LrSchedule",
    "Manifest", "Method", "MetricsReport", "ModelBundle", "MultiModalEncoder",
    "Parameter", "PretrainConfig", "ProjectionHead", "RepresentationHead",
    "SampleRecord", "Split", "SynthConfig", "Tensor", "adamw_step", "assign",
    "attach_probe_and_train", "average_over_time", "backward",
    "check_modality_arrays", "clustering_loss", "confusion_matrix",
    "feature_augment", "fuse_for_classifier", "fuse_multimodal", "info_nce",
    "kmeans_fit", "load_checkpoint", "load_manifest", "lr_at", "make_batches",
    "mms_pair", "mms_total", "multitask_loss", "pretrain", "read_feature_file",
    "recon_loss", "save_checkpoint", "synth_generate",
    "weighted_metrics_multilabel", "weighted_metrics_single",
    "write_feature_file", "write_run_log", "zero_grads",
]
