"""Scikit-learn style wrappers around the pretraining and probe protocols.

``MultiModalEncoder`` is a transformer: ``fit`` runs self-supervised
pretraining on dicts of per-modality feature matrices, ``transform``
returns fused representations. ``LinearProbeClassifier`` trains the
downstream head on top of a fitted encoder (or from scratch) and follows
the usual ``fit``/``predict``/``predict_proba`` contract.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .data import MODALITIES, InMemoryDataset, Split
from .errors import ContractError
from .heads import ModelBundle
from .losses import LossConfig, Method
from .training import (Checkpoint, DownstreamConfig, PretrainConfig,
                       attach_probe_and_train, compute_fused_representations,
                       load_checkpoint, pretrain)


def check_modality_arrays(X, required=None) -> dict:
    """Validate a dict of per-modality feature matrices.

    Every value must be a finite 2-D array-like; all modalities must agree
    on the number of rows. Returns float32 copies keyed by modality.
    """
    if not isinstance(X, dict):
        raise ContractError(f"X must be a dict of modality -> [N x dim] array, "
                            f"got {type(X).__name__}")
    unknown = sorted(set(X) - set(MODALITIES))
    if unknown:
        raise ContractError(f"unknown modalities {unknown} (expected subset of "
                            f"{MODALITIES})")
    if required:
        missing = [m for m in required if m not in X]
        if missing:
            raise ContractError(f"missing required modalities {missing}")
    out = {}
    n_rows = None
    for m in MODALITIES:
        if m not in X:
            continue
        arr = np.asarray(X[m], dtype=np.float32)
        if arr.ndim != 2:
            raise ContractError(f"modality '{m}' must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"modality '{m}' contains non-finite values")
        if n_rows is None:
            n_rows = arr.shape[0]
        elif arr.shape[0] != n_rows:
            raise ContractError(f"modality '{m}' has {arr.shape[0]} rows, "
                                f"expected {n_rows}")
        out[m] = arr
    if not out:
        raise ContractError("X holds no modalities")
    return out


def _split_from_arrays(feats: dict, y=None) -> Split:
    n = next(iter(feats.values())).shape[0]
    ids = [f"x{i:06d}" for i in range(n)]
    return Split(ids=ids, features=feats, labels=y)


class MultiModalEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised encoder over precomputed per-modality features.

    Parameters mirror the pretraining configuration; see
    ``training.PretrainConfig``. ``fit`` ignores ``y``.
    """

    def __init__(self, method: str = "ConCluGen", epochs: int = 20,
                 batch_size: int = 64, lr: float | None = None,
                 weight_decay: float | None = None, representation_dim: int = 128,
                 projection_dim: int = 64, cluster_dim: int = 32, clusters: int = 8,
                 queue_batches: int = 4, cluster_start_epoch: int = 12,
                 temperature: float = 0.1, margin: float = 0.001,
                 normalize_embeddings: bool = True, augment_noise_sigma: float = 0.1,
                 augment_mask_prob: float = 0.1, fusion: str = "concat",
                 seed: int = 0):
        self.method = method
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.representation_dim = representation_dim
        self.projection_dim = projection_dim
        self.cluster_dim = cluster_dim
        self.clusters = clusters
        self.queue_batches = queue_batches
        self.cluster_start_epoch = cluster_start_epoch
        self.temperature = temperature
        self.margin = margin
        self.normalize_embeddings = normalize_embeddings
        self.augment_noise_sigma = augment_noise_sigma
        self.augment_mask_prob = augment_mask_prob
        self.fusion = fusion
        self.seed = seed

    def _config(self) -> PretrainConfig:
        return PretrainConfig(
            method=self.method, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, weight_decay=self.weight_decay,
            loss=LossConfig(temperature=self.temperature, margin=self.margin,
                            normalize_embeddings=self.normalize_embeddings,
                            method=self.method),
            clusters=self.clusters, queue_batches=self.queue_batches,
            cluster_start_epoch=self.cluster_start_epoch,
            representation_dim=self.representation_dim,
            projection_dim=self.projection_dim, cluster_dim=self.cluster_dim,
            seed=self.seed, augment_noise_sigma=self.augment_noise_sigma,
            augment_mask_prob=self.augment_mask_prob)

    def fit(self, X, y=None):
        required = Method.parse(self.method).required_modalities
        feats = check_modality_arrays(X, required=required)
        dims = {m: a.shape[1] for m, a in feats.items()}
        dataset = InMemoryDataset(splits={"train": _split_from_arrays(feats)},
                                  modality_dims=dims, task_type="unlabeled")
        self.checkpoint_, self.loss_log_ = pretrain(self._config(), dataset)
        from .training import _bundle_from_checkpoint
        self.bundle_ = _bundle_from_checkpoint(self.checkpoint_)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "bundle_"):
            raise NotFittedError("MultiModalEncoder is not fitted; call fit first")
        mods = self.bundle_.modalities if self.fusion != "vision_only" else ("video",)
        feats = check_modality_arrays(X, required=mods)
        split = _split_from_arrays({m: feats[m] for m in mods})
        return compute_fused_representations(self.bundle_, split, self.fusion)


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Downstream classifier over a pretrained encoder.

    ``encoder`` may be a fitted ``MultiModalEncoder``, a ``Checkpoint``,
    or a checkpoint path. ``mode`` selects linear evaluation, finetuning,
    or the supervised-from-scratch baseline.
    """

    def __init__(self, encoder=None, mode: str = "linear_eval",
                 fusion: str = "concat", epochs: int = 30, lr: float = 0.01,
                 weight_decay: float = 1e-4, threshold: float = 0.5,
                 batch_size: int = 64, seed: int = 0):
        self.encoder = encoder
        self.mode = mode
        self.fusion = fusion
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.threshold = threshold
        self.batch_size = batch_size
        self.seed = seed

    def _source(self):
        enc = self.encoder
        if isinstance(enc, MultiModalEncoder):
            if not hasattr(enc, "checkpoint_"):
                raise NotFittedError("encoder is not fitted")
            return enc.checkpoint_
        if isinstance(enc, (Checkpoint, ModelBundle)):
            return enc
        if isinstance(enc, (str, bytes)) or hasattr(enc, "__fspath__"):
            return load_checkpoint(enc)
        raise ContractError("encoder must be a fitted MultiModalEncoder, a "
                            "Checkpoint, or a checkpoint path")

    def fit(self, X, y):
        y = np.asarray(y)
        if y.ndim == 1:
            task_type = "single_label"
            self.classes_, encoded = np.unique(y, return_inverse=True)
            labels = encoded.astype(np.int64)
            class_names = [str(c) for c in self.classes_]
        elif y.ndim == 2:
            task_type = "multi_label"
            if not np.isin(y, (0, 1)).all():
                raise ContractError("multi-label y must be binary")
            self.classes_ = np.arange(y.shape[1])
            labels = y.astype(np.int64)
            class_names = [str(c) for c in self.classes_]
        else:
            raise ContractError(f"y must be 1-D class labels or an [N x C] binary "
                                f"matrix, got shape {y.shape}")

        feats = check_modality_arrays(X)
        split = _split_from_arrays(feats, labels)
        dataset = InMemoryDataset(
            splits={"train": split, "test": split},
            modality_dims={m: a.shape[1] for m, a in feats.items()},
            task_type=task_type, class_names=class_names)
        dcfg = DownstreamConfig(mode=self.mode, fusion=self.fusion,
                                epochs=self.epochs, lr=self.lr,
                                weight_decay=self.weight_decay,
                                threshold=self.threshold, seed=self.seed,
                                batch_size=self.batch_size)
        self.bundle_, self.train_report_ = attach_probe_and_train(
            self._source(), dataset, dcfg)
        self.task_type_ = task_type
        return self

    def _logits(self, X) -> np.ndarray:
        if not hasattr(self, "bundle_"):
            raise NotFittedError("LinearProbeClassifier is not fitted; call fit first")
        mods = self.bundle_.modalities if self.fusion != "vision_only" else ("video",)
        feats = check_modality_arrays(X, required=mods)
        split = _split_from_arrays({m: feats[m] for m in mods})
        fused = compute_fused_representations(self.bundle_, split, self.fusion)
        from .autodiff import Tensor
        return self.bundle_.classifier(Tensor.leaf(fused)).data

    def predict_proba(self, X) -> np.ndarray:
        z = self._logits(X).astype(np.float64)
        if self.task_type_ == "single_label":
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-z))

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        if self.task_type_ == "single_label":
            return self.classes_[np.argmax(proba, axis=1)]
        return (proba > self.threshold).astype(np.int64)
