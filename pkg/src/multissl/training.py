"""Pretraining and downstream protocols, checkpointing, run logging.

One loop drives all six methods; the per-step pipeline is
encode -> (method-specific losses) -> multitask sum -> backward -> AdamW
with the cosine warm-restart schedule. Clustering components contribute
exactly 0 before the configured start epoch and no queue updates happen.
Every source of randomness is derived from (seed, epoch, step), so a run
resumed from a checkpoint is bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .clustering import ClusterQueue, CentroidSet, assign, fuse_multimodal, kmeans_fit
from .data import Split, decode_feature, encode_feature, make_batches
from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     TrainingError)
from .heads import FUSION_MODES, ModelBundle
from .losses import (LossConfig, Method, clustering_loss, feature_augment,
                     info_nce, mms_total, multitask_loss, recon_loss)
from .metrics import MetricsReport, weighted_metrics_multilabel, weighted_metrics_single
from .optim import AdamW, LrSchedule, lr_at

CHECKPOINT_VERSION = 1

# Appendix-reported pretraining rates; the weight decay shared by every
# method. Desk-scale runs usually override lr through the config.
METHOD_LR_DEFAULTS = {
    Method.CON_CLU_GEN: 0.00009,
    Method.CON_CLU: 0.00009,
    Method.CON_GEN: 0.00036,
    Method.MULTI_CONT: 0.00036,
    Method.INSTANCE_CONT: 0.00036,
    Method.GENERATIVE: 0.00036,
}
WEIGHT_DECAY_DEFAULT = 0.00032

LOG_COLUMNS = ("epoch", "step", "lr", "total", "mms", "clustering",
               "reconstruction", "info_nce")


@dataclass
class PretrainConfig:
    method: str = Method.CON_CLU_GEN.value
    epochs: int = 20
    batch_size: int = 64
    lr: float | None = None
    weight_decay: float | None = None
    schedule: LrSchedule | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    clusters: int = 8
    queue_batches: int = 4
    cluster_start_epoch: int = 12
    representation_dim: int = 128
    projection_dim: int = 64
    cluster_dim: int = 32
    seed: int = 0
    augment_noise_sigma: float = 0.1
    augment_mask_prob: float = 0.1
    kmeans_max_iters: int = 10
    kmeans_tol: float = 1e-4

    def validate(self) -> None:
        Method.parse(self.method)
        self.loss.validate()
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        for name in ("representation_dim", "projection_dim", "cluster_dim",
                     "clusters", "queue_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.cluster_start_epoch < 0:
            raise ConfigError("cluster_start_epoch must be non-negative")

    def effective_lr(self) -> float:
        if self.lr is not None:
            return float(self.lr)
        return METHOD_LR_DEFAULTS[Method.parse(self.method)]

    def effective_weight_decay(self) -> float:
        if self.weight_decay is not None:
            return float(self.weight_decay)
        return WEIGHT_DECAY_DEFAULT

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["loss"] = asdict(self.loss)
        doc["schedule"] = asdict(self.schedule) if self.schedule is not None else None
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "PretrainConfig":
        doc = dict(doc)
        known = set(PretrainConfig.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown pretrain config fields: {sorted(extra)}")
        if doc.get("loss") is not None:
            doc["loss"] = LossConfig(**doc["loss"])
        if doc.get("schedule") is not None:
            doc["schedule"] = LrSchedule(**doc["schedule"])
        cfg = PretrainConfig(**doc)
        cfg.validate()
        return cfg


@dataclass
class DownstreamConfig:
    mode: str = "linear_eval"            # linear_eval | finetune | supervised_scratch
    task_type: str | None = None         # inferred from the dataset when None
    fusion: str = "concat"
    epochs: int = 30
    lr: float = 0.01
    weight_decay: float = 1e-4
    threshold: float = 0.5
    seed: int = 0
    batch_size: int = 64

    def validate(self) -> None:
        if self.mode not in ("linear_eval", "finetune", "supervised_scratch"):
            raise ConfigError(f"unknown downstream mode '{self.mode}'")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion '{self.fusion}'")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


@dataclass
class Checkpoint:
    method: str
    config: dict
    params: dict
    epochs_completed: int = 0
    global_step: int = 0
    optimizer_state: dict | None = None
    centroids: np.ndarray | None = None
    centroid_inertia: float | None = None
    queue: list = field(default_factory=list)
    rng: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _derived_seed(seed: int, *entries: int) -> int:
    ss = np.random.SeedSequence([int(seed), *[int(e) for e in entries]])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain(cfg: PretrainConfig, dataset, resume_from: Checkpoint | None = None,
             stop_after_epoch: int | None = None):
    """Run self-supervised pretraining; returns ``(Checkpoint, log_rows)``.

    ``log_rows`` holds one dict per step with the loss breakdown
    (columns as in ``LOG_COLUMNS``). ``stop_after_epoch`` interrupts the
    run early while keeping the full-run schedule, producing a mid-run
    checkpoint; resuming from it with the same config reproduces the
    uninterrupted run bit-exactly.
    """
    cfg.validate()
    method = Method.parse(cfg.method)
    for m in method.required_modalities:
        if m not in dataset.modality_dims:
            raise ContractError(f"method {method.value} requires modality '{m}', "
                                f"dataset provides {sorted(dataset.modality_dims)}")

    split = dataset.read_split("train")
    if split.n_samples < 1:
        raise DataError("train split is empty")

    contrastive = method is not Method.GENERATIVE
    steps_per_epoch = split.n_samples // cfg.batch_size
    if steps_per_epoch < 1:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds train split size "
                          f"{split.n_samples} (drop_last leaves no batches)")

    queue = ClusterQueue(cfg.queue_batches)
    centroid_state: CentroidSet | None = None
    start_epoch = 0

    if resume_from is None:
        bundle = ModelBundle(dataset.modality_dims, cfg.representation_dim,
                             cfg.projection_dim, cfg.cluster_dim, cfg.seed,
                             method=method.value)
    else:
        bundle = _bundle_from_checkpoint(resume_from)
        _check_resume_compatible(cfg, resume_from)
        start_epoch = resume_from.epochs_completed
        if resume_from.centroids is not None:
            centroid_state = CentroidSet(centroids=resume_from.centroids,
                                         inertia=resume_from.centroid_inertia or 0.0)
        queue.load_state(resume_from.queue)

    params = bundle.pretrain_parameters()
    optimizer = AdamW(params, weight_decay=cfg.effective_weight_decay())
    if resume_from is not None and resume_from.optimizer_state is not None:
        optimizer.load_state(resume_from.optimizer_state)

    schedule = cfg.schedule or LrSchedule(base_lr=cfg.effective_lr(), min_lr=0.0,
                                          period0=max(1, steps_per_epoch * cfg.epochs))
    loss_cfg = cfg.loss
    rows = []
    global_step = start_epoch * steps_per_epoch

    last_epoch = cfg.epochs if stop_after_epoch is None else min(stop_after_epoch,
                                                                 cfg.epochs)
    for epoch in range(start_epoch, last_epoch):
        batches = make_batches(split, cfg.batch_size, seed=cfg.seed, epoch=epoch,
                               drop_last=True, contrastive=contrastive)
        clustering_active = (method.uses_clustering
                             and epoch >= cfg.cluster_start_epoch)
        for step_in_epoch, batch in enumerate(batches):
            lr = lr_at(schedule, global_step)
            features = {m: Tensor.leaf(batch.features[m])
                        for m in method.required_modalities}
            reps = bundle.encode(features)

            components = {}
            projections = None
            if method.uses_info_nce:
                aug_seed = _derived_seed(cfg.seed, 1, epoch, step_in_epoch)
                augmented = feature_augment(reps["video"], aug_seed,
                                            cfg.augment_noise_sigma,
                                            cfg.augment_mask_prob)
                anchor = bundle.projection["video"](reps["video"])
                other = bundle.projection["video"](augmented)
                components["info_nce"] = info_nce(anchor, other,
                                                  loss_cfg.temperature)
            if method.uses_mms:
                projections = bundle.project(reps)
                components["mms"] = mms_total(projections, loss_cfg.margin,
                                              loss_cfg.normalize_embeddings)
            if method.uses_reconstruction:
                recons = bundle.decode(reps)
                rec_total, _ = recon_loss(features, recons)
                components["reconstruction"] = rec_total
            if method.uses_clustering:
                components["clustering"] = 0.0
                if clustering_active:
                    embeddings = bundle.cluster_embed(projections)
                    fused = fuse_multimodal(embeddings)
                    queue.push(fused.data)
                    snapshot = queue.snapshot()
                    if snapshot.shape[0] >= cfg.clusters:
                        init = centroid_state if centroid_state is not None else "kmeanspp"
                        centroid_state, _ = kmeans_fit(
                            snapshot, cfg.clusters, init=init,
                            max_iters=cfg.kmeans_max_iters, tol=cfg.kmeans_tol,
                            seed=_derived_seed(cfg.seed, 2, epoch, step_in_epoch))
                        labels = assign(fused.data, centroid_state.centroids)
                        components["clustering"] = clustering_loss(
                            fused, labels, centroid_state.centroids, loss_cfg.margin)

            total, breakdown = multitask_loss(method, **components)
            for name, value in breakdown.components.items():
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss component '{name}' at epoch "
                                        f"{epoch}, step {step_in_epoch}")

            ad.backward(total)
            optimizer.step(lr)
            optimizer.zero_grad()

            row = {"epoch": epoch, "step": global_step, "lr": lr,
                   "total": breakdown.total}
            for name in ("mms", "clustering", "reconstruction", "info_nce"):
                row[name] = breakdown.components.get(name, 0.0)
            rows.append(row)
            global_step += 1

    ckpt = Checkpoint(
        method=method.value,
        config=cfg.to_dict(),
        params={name: p.value.data.copy()
                for name, p in bundle.named_parameters().items()},
        epochs_completed=last_epoch,
        global_step=global_step,
        optimizer_state=optimizer.state(),
        centroids=None if centroid_state is None else centroid_state.centroids.copy(),
        centroid_inertia=None if centroid_state is None else centroid_state.inertia,
        queue=queue.state(),
        rng={"scheme": "derived", "seed": cfg.seed,
             "next_epoch": last_epoch},
    )
    return ckpt, rows


def _bundle_from_checkpoint(ckpt: Checkpoint) -> ModelBundle:
    cfg = PretrainConfig.from_dict(ckpt.config)
    modality_dims = _modality_dims_from_params(ckpt.params)
    bundle = ModelBundle(modality_dims, cfg.representation_dim, cfg.projection_dim,
                         cfg.cluster_dim, cfg.seed, method=ckpt.method)
    bundle.load_tensors(ckpt.params)
    return bundle


def _modality_dims_from_params(params: dict) -> dict:
    dims = {}
    for name, arr in params.items():
        if name.startswith("repr.") and name.endswith(".0.weight"):
            dims[name.split(".")[1]] = arr.shape[0]
    if not dims:
        raise CheckpointError("checkpoint holds no representation head tensors")
    return dims


def _check_resume_compatible(cfg: PretrainConfig, ckpt: Checkpoint) -> None:
    prev = PretrainConfig.from_dict(ckpt.config)
    for name in ("method", "batch_size", "representation_dim", "projection_dim",
                 "cluster_dim", "seed", "clusters", "queue_batches",
                 "cluster_start_epoch"):
        if getattr(prev, name) != getattr(cfg, name):
            raise CheckpointError(f"resume config mismatch on '{name}': checkpoint has "
                                  f"{getattr(prev, name)!r}, config has "
                                  f"{getattr(cfg, name)!r}")
    if cfg.epochs < ckpt.epochs_completed:
        raise CheckpointError(f"checkpoint already covers {ckpt.epochs_completed} epochs, "
                              f"config asks for {cfg.epochs}")


# ---------------------------------------------------------------------------
# downstream protocols
# ---------------------------------------------------------------------------


def _softmax_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, c = logits.shape
    onehot = np.zeros((n, c), dtype=np.float32)
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum_(ad.mul(ad.log_softmax(logits, axis=1), Tensor(onehot)))
    return ad.scale(picked, -1.0 / n)


def _sigmoid_bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    anti = Tensor((1.0 - targets).astype(np.float32))
    return ad.mean(ad.add(ad.softplus(ad.scale(logits, -1.0)),
                          ad.mul(logits, anti)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-z.astype(np.float64)))).astype(np.float32)


def compute_fused_representations(bundle: ModelBundle, split: Split, fusion: str,
                                  batch_size: int = 256) -> np.ndarray:
    """Encoder representations fused for the classifier, batch by batch."""
    chunks = []
    mods = bundle.modalities if fusion != "vision_only" else ("video",)
    n = split.n_samples
    for start in range(0, n, batch_size):
        feats = {m: split.features[m][start:start + batch_size] for m in mods}
        reps = bundle.encode(feats)
        fused = bundle.fuse_for_classifier(reps, fusion)
        chunks.append(fused.data.copy())
    dim = bundle.representation_dim * (len(mods) if fusion == "concat" else 1)
    if not chunks:
        return np.zeros((0, dim), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


def attach_probe_and_train(source, dataset, dcfg: DownstreamConfig):
    """Train a classifier per the downstream protocol; returns (bundle, report).

    ``linear_eval`` trains only the classifier on frozen representations,
    ``finetune`` unfreezes the representation heads, and
    ``supervised_scratch`` re-initializes the architecture from
    ``dcfg.seed`` and trains it supervised.
    """
    dcfg.validate()
    task_type = dataset.task_type
    if task_type == "unlabeled":
        raise ContractError("downstream training needs a labeled dataset")
    if dcfg.task_type is not None and dcfg.task_type != task_type:
        raise ContractError(f"config task_type '{dcfg.task_type}' does not match "
                            f"dataset task_type '{task_type}'")

    if isinstance(source, Checkpoint):
        bundle = _bundle_from_checkpoint(source)
    elif isinstance(source, ModelBundle):
        bundle = source
    else:
        raise ContractError("source must be a Checkpoint or ModelBundle")

    if dcfg.mode == "supervised_scratch":
        snapshot = bundle.config_snapshot()
        snapshot["seed"] = _derived_seed(dcfg.seed, 3)
        bundle = ModelBundle.from_config(snapshot)

    if dcfg.fusion == "vision_only" and "video" not in bundle.modalities:
        raise ContractError("vision_only fusion needs a video head")
    needed = bundle.modalities if dcfg.fusion != "vision_only" else ("video",)
    missing = [m for m in needed if m not in dataset.modality_dims]
    if missing:
        raise ContractError(f"dataset lacks modalities {missing} required by the "
                            f"model under fusion '{dcfg.fusion}'")

    n_classes = dataset.n_classes
    bundle.attach_classifier(n_classes, dcfg.fusion,
                             rng=np.random.default_rng([_derived_seed(dcfg.seed, 4)]))
    train_split = dataset.read_split("train")
    test_split = dataset.read_split("test")
    if train_split.labels is None or test_split.labels is None:
        raise ContractError("downstream splits must carry labels")

    if dcfg.mode == "linear_eval":
        train_x = compute_fused_representations(bundle, train_split, dcfg.fusion)
        probe_split = Split(ids=train_split.ids, features={"fused": train_x},
                            labels=train_split.labels)
        trainable = bundle.classifier.params
        forward = lambda feats: bundle.classifier(Tensor.leaf(feats["fused"]))
        batch_mods = ("fused",)
    else:
        probe_split = train_split
        trainable = bundle.classifier.params + [
            p for m in bundle.modalities for p in bundle.representation[m].params]
        mods = bundle.modalities if dcfg.fusion != "vision_only" else ("video",)

        def forward(feats):
            reps = bundle.encode({m: feats[m] for m in mods})
            return bundle.classifier(bundle.fuse_for_classifier(reps, dcfg.fusion))

        batch_mods = mods

    optimizer = AdamW(trainable, weight_decay=dcfg.weight_decay)
    steps_per_epoch = max(1, -(-probe_split.n_samples // dcfg.batch_size))
    schedule = LrSchedule(base_lr=dcfg.lr, min_lr=0.0,
                          period0=max(1, steps_per_epoch * dcfg.epochs))

    step = 0
    for epoch in range(dcfg.epochs):
        batches = make_batches(probe_split, dcfg.batch_size, seed=dcfg.seed,
                               epoch=epoch, drop_last=False)
        for batch in batches:
            logits = forward({m: batch.features[m] for m in batch_mods})
            if task_type == "single_label":
                loss = _softmax_ce(logits, batch.labels)
            else:
                loss = _sigmoid_bce(logits, batch.labels.astype(np.float32))
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite downstream loss at epoch {epoch}")
            ad.backward(loss)
            optimizer.step(lr_at(schedule, step))
            optimizer.zero_grad()
            step += 1

    report = _evaluate_classifier(bundle, test_split, dcfg, task_type, n_classes,
                                  dataset.class_names)
    return bundle, report


def _evaluate_classifier(bundle, split, dcfg, task_type, n_classes,
                         class_names) -> MetricsReport:
    if dcfg.mode == "linear_eval":
        fused = compute_fused_representations(bundle, split, dcfg.fusion)
        logits = bundle.classifier(Tensor.leaf(fused)).data
    else:
        mods = bundle.modalities if dcfg.fusion != "vision_only" else ("video",)
        chunks = []
        for start in range(0, split.n_samples, 256):
            feats = {m: split.features[m][start:start + 256] for m in mods}
            reps = bundle.encode(feats)
            out = bundle.classifier(bundle.fuse_for_classifier(reps, dcfg.fusion))
            chunks.append(out.data.copy())
        logits = np.concatenate(chunks, axis=0)

    if task_type == "single_label":
        preds = np.argmax(logits, axis=1)
        report = weighted_metrics_single(preds, split.labels, n_classes,
                                         class_names=class_names)
    else:
        report = weighted_metrics_multilabel(_sigmoid(logits), split.labels,
                                             threshold=dcfg.threshold,
                                             class_names=class_names)
    return report


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _zip_entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o600 << 16
    return info


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint container; byte-identical for identical contents."""
    entries: dict[str, bytes] = {}
    meta = {
        "format_version": ckpt.version,
        "kind": "multissl-checkpoint",
        "method": ckpt.method,
        "config": ckpt.config,
        "epochs_completed": ckpt.epochs_completed,
        "global_step": ckpt.global_step,
        "rng": ckpt.rng,
        "tensor_names": sorted(ckpt.params),
        "queue_len": len(ckpt.queue),
        "has_centroids": ckpt.centroids is not None,
        "centroid_inertia": ckpt.centroid_inertia,
        "optimizer_steps": (None if ckpt.optimizer_state is None else
                            {k: int(v[2]) for k, v in sorted(ckpt.optimizer_state.items())}),
    }
    entries["meta.json"] = (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode()
    for name, arr in ckpt.params.items():
        entries[f"tensors/{name}.mmft"] = encode_feature(arr)
    if ckpt.optimizer_state is not None:
        for name, (m1, m2, _) in ckpt.optimizer_state.items():
            entries[f"optim/{name}.m1.mmft"] = encode_feature(m1)
            entries[f"optim/{name}.m2.mmft"] = encode_feature(m2)
    if ckpt.centroids is not None:
        entries["state/centroids.mmft"] = encode_feature(ckpt.centroids)
    for i, batch in enumerate(ckpt.queue):
        entries[f"state/queue_{i}.mmft"] = encode_feature(batch)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(entries):
            zf.writestr(_zip_entry(name), entries[name])


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path, "r")
    except zipfile.BadZipFile as err:
        raise CheckpointError(f"not a checkpoint container: {path} ({err})") from None
    with zf:
        names = set(zf.namelist())
        if "meta.json" not in names:
            raise CheckpointError(f"checkpoint {path} is missing meta.json")
        meta = json.loads(zf.read("meta.json"))
        version = meta.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version!r} "
                                  f"(expected {CHECKPOINT_VERSION})")
        if not meta.get("method"):
            raise CheckpointError("checkpoint meta is missing 'method'")

        def tensor(name: str) -> np.ndarray:
            try:
                return decode_feature(zf.read(name))
            except DataError as err:
                raise CheckpointError(f"corrupt tensor '{name}' in {path}: {err}") from None

        params = {name: tensor(f"tensors/{name}.mmft")
                  for name in meta.get("tensor_names", [])}
        optimizer_state = None
        steps = meta.get("optimizer_steps")
        if steps is not None:
            optimizer_state = {}
            for name in params:
                optimizer_state[name] = (tensor(f"optim/{name}.m1.mmft"),
                                         tensor(f"optim/{name}.m2.mmft"),
                                         int(steps.get(name, 0)))
        centroids = tensor("state/centroids.mmft") if meta.get("has_centroids") else None
        queue = [tensor(f"state/queue_{i}.mmft") for i in range(meta.get("queue_len", 0))]
    return Checkpoint(
        method=meta["method"],
        config=meta.get("config", {}),
        params=params,
        epochs_completed=int(meta.get("epochs_completed", 0)),
        global_step=int(meta.get("global_step", 0)),
        optimizer_state=optimizer_state,
        centroids=centroids,
        centroid_inertia=meta.get("centroid_inertia"),
        queue=queue,
        rng=meta.get("rng", {}),
        version=int(version),
    )


def write_run_log(rows, path) -> None:
    """Per-step loss breakdown as CSV with the documented column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in LOG_COLUMNS])
    path.write_text(buf.getvalue())
