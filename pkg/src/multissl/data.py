"""On-disk dataset contract for precomputed per-modality features.

A dataset is a JSON manifest plus one little-endian binary feature file
per sample and modality::

    magic "MMFT" | u32 version=1 | u32 rank | rank x u32 dims | float32 payload

Feature paths in the manifest are relative to the manifest file. Splits
must be disjoint by sample id. The synthetic generator produces
class-structured, cross-modally correlated features for desk-scale runs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ConfigError, ContractError, DataError, DimMismatchError,
                     MissingFileError, SchemaError, SplitOverlapError)

MODALITIES = ("video", "text", "audio")
TASK_TYPES = ("single_label", "multi_label", "unlabeled")

MMFT_MAGIC = b"MMFT"
MMFT_VERSION = 1


# ---------------------------------------------------------------------------
# feature file format
# ---------------------------------------------------------------------------


def encode_feature(array: np.ndarray) -> bytes:
    """Serialize a float32 array into the MMFT byte layout."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MMFT_MAGIC + struct.pack("<II", MMFT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_feature(buf: bytes, origin: str = "buffer") -> np.ndarray:
    if buf[:4] != MMFT_MAGIC:
        raise SchemaError(f"bad magic in feature {origin}: {buf[:4]!r}")
    if len(buf) < 12:
        raise SchemaError(f"truncated header in feature {origin}")
    version, rank = struct.unpack("<II", buf[4:12])
    if version != MMFT_VERSION:
        raise SchemaError(f"unsupported feature version {version} in {origin}")
    if rank > 8:
        raise SchemaError(f"implausible rank {rank} in feature {origin}")
    dims = struct.unpack(f"<{rank}I", buf[12:12 + 4 * rank])
    count = int(np.prod(dims)) if rank else 1
    payload = buf[12 + 4 * rank:]
    if len(payload) != 4 * count:
        raise SchemaError(f"payload size mismatch in feature {origin}: expected "
                          f"{4 * count} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return np.ascontiguousarray(arr, dtype=np.float32)


def write_feature_file(path, array: np.ndarray) -> None:
    """Write a float32 array in the MMFT layout (little-endian)."""
    Path(path).write_bytes(encode_feature(array))


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"feature file not found: {path}")
    return decode_feature(path.read_bytes(), origin=str(path))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class SampleRecord:
    """One utterance: per-modality feature file paths plus an optional label."""

    sample_id: str
    feature_paths: dict
    label: object = None


@dataclass
class Split:
    """Materialized split: stacked per-modality matrices plus labels."""

    ids: list
    features: dict          # modality -> float32 [N x dim]
    labels: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return len(self.ids)

    def subset(self, indices) -> "Split":
        idx = np.asarray(indices, dtype=int)
        feats = {m: a[idx] for m, a in self.features.items()}
        labels = self.labels[idx] if self.labels is not None else None
        return Split(ids=[self.ids[i] for i in idx], features=feats, labels=labels)


class Manifest:
    """Parsed manifest with lazily readable per-sample records."""

    def __init__(self, name: str, task_type: str, class_names: list,
                 modality_dims: dict, splits: dict, base_dir: Path):
        self.name = name
        self.task_type = task_type
        self.class_names = list(class_names)
        self.modality_dims = dict(modality_dims)
        self.splits = splits   # split name -> list[SampleRecord]
        self.base_dir = Path(base_dir)
        self._cache: dict[str, Split] = {}

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def modalities(self) -> tuple:
        return tuple(m for m in MODALITIES if m in self.modality_dims)

    def read_record(self, record: SampleRecord) -> dict:
        """Read and validate one sample's feature vectors."""
        out = {}
        for modality, rel in record.feature_paths.items():
            arr = read_feature_file(self.base_dir / rel)
            if arr.ndim != 1:
                raise DimMismatchError(
                    f"sample '{record.sample_id}' modality '{modality}': expected a "
                    f"rank-1 feature vector, file has rank {arr.ndim}")
            declared = self.modality_dims[modality]
            if arr.shape[0] != declared:
                raise DimMismatchError(
                    f"sample '{record.sample_id}' modality '{modality}': manifest "
                    f"declares dim {declared} but file holds {arr.shape[0]}")
            if not np.all(np.isfinite(arr)):
                raise DataError(
                    f"sample '{record.sample_id}' modality '{modality}': non-finite values")
            out[modality] = arr
        return out

    def read_split(self, split: str) -> Split:
        """Materialize a split, validating every feature file once."""
        if split in self._cache:
            return self._cache[split]
        records = self.splits.get(split, [])
        mods = self.modalities
        columns = {m: [] for m in mods}
        labels = []
        for record in records:
            feats = self.read_record(record)
            for m in mods:
                if m in feats:
                    columns[m].append(feats[m])
                else:
                    raise SchemaError(
                        f"sample '{record.sample_id}' is missing modality '{m}'")
            labels.append(record.label)
        features = {m: (np.stack(v) if v else np.zeros((0, self.modality_dims[m]),
                                                       dtype=np.float32))
                    for m, v in columns.items()}
        label_arr = None
        if self.task_type == "single_label":
            label_arr = np.asarray([int(v) for v in labels], dtype=np.int64)
        elif self.task_type == "multi_label":
            label_arr = np.asarray([list(map(int, v)) for v in labels], dtype=np.int64)
        out = Split(ids=[r.sample_id for r in records], features=features, labels=label_arr)
        self._cache[split] = out
        return out


def _validate_label(label, task_type: str, n_classes: int, sample_id: str) -> object:
    if task_type == "unlabeled":
        if label is not None:
            raise SchemaError(f"sample '{sample_id}': unlabeled dataset carries a label")
        return None
    if label is None:
        raise SchemaError(f"sample '{sample_id}': missing label for task '{task_type}'")
    if task_type == "single_label":
        if not isinstance(label, int) or not (0 <= label < n_classes):
            raise SchemaError(
                f"sample '{sample_id}': label {label!r} is not a class index < {n_classes}")
        return int(label)
    # multi_label
    if (not isinstance(label, list) or len(label) != n_classes
            or any(v not in (0, 1) for v in label)):
        raise SchemaError(
            f"sample '{sample_id}': multi-label vector must be {n_classes} zeros/ones")
    return [int(v) for v in label]


def load_manifest(path) -> Manifest:
    """Load and validate a manifest; feature files stay unread until first use."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise SchemaError(f"manifest {path} is not valid JSON: {err}") from None

    for key in ("name", "task_type", "class_names", "modality_dims", "splits"):
        if key not in doc:
            raise SchemaError(f"manifest {path} is missing field '{key}'")
    task_type = doc["task_type"]
    if task_type not in TASK_TYPES:
        raise SchemaError(f"unknown task_type '{task_type}' (expected one of {TASK_TYPES})")
    class_names = doc["class_names"]
    if task_type != "unlabeled" and not class_names:
        raise SchemaError("class_names must be non-empty for labeled datasets")
    modality_dims = doc["modality_dims"]
    for m, d in modality_dims.items():
        if m not in MODALITIES:
            raise SchemaError(f"unknown modality '{m}' (expected one of {MODALITIES})")
        if not isinstance(d, int) or d <= 0:
            raise SchemaError(f"modality '{m}' dim must be a positive integer, got {d!r}")

    splits: dict[str, list[SampleRecord]] = {}
    seen: dict[str, str] = {}
    for split_name, entries in doc["splits"].items():
        records = []
        for entry in entries:
            if "sample_id" not in entry or "features" not in entry:
                raise SchemaError(f"split '{split_name}' has a record without "
                                  "'sample_id'/'features'")
            sid = entry["sample_id"]
            if sid in seen:
                raise SplitOverlapError(
                    f"sample '{sid}' appears in both '{seen[sid]}' and '{split_name}'")
            seen[sid] = split_name
            feats = entry["features"]
            missing = [m for m in modality_dims if m not in feats]
            if missing:
                raise SchemaError(f"sample '{sid}' is missing feature paths for {missing}")
            label = _validate_label(entry.get("label"), task_type,
                                    len(class_names), sid)
            records.append(SampleRecord(sample_id=sid, feature_paths=dict(feats),
                                        label=label))
        splits[split_name] = records
    return Manifest(name=doc["name"], task_type=task_type, class_names=class_names,
                    modality_dims=modality_dims, splits=splits, base_dir=path.parent)


class InMemoryDataset:
    """Dataset assembled from arrays; mirrors the Manifest reading surface."""

    def __init__(self, splits: dict, modality_dims: dict, task_type: str = "unlabeled",
                 class_names: list | None = None, name: str = "in-memory"):
        self.name = name
        self.task_type = task_type
        self.class_names = list(class_names or [])
        self.modality_dims = dict(modality_dims)
        self._splits = splits

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def modalities(self) -> tuple:
        return tuple(m for m in MODALITIES if m in self.modality_dims)

    def read_split(self, split: str) -> Split:
        if split not in self._splits:
            raise DataError(f"dataset has no split '{split}'")
        return self._splits[split]


# ---------------------------------------------------------------------------
# batching and sequence utilities
# ---------------------------------------------------------------------------


def average_over_time(seq) -> np.ndarray:
    """Elementwise arithmetic mean of a non-empty list of equal-dim vectors."""
    seq = list(seq)
    if not seq:
        raise ContractError("average_over_time needs a non-empty sequence")
    arrs = [np.asarray(s, dtype=np.float32) for s in seq]
    dim = arrs[0].shape
    if any(a.shape != dim for a in arrs):
        raise ContractError("average_over_time needs equal-dim vectors")
    stacked = np.stack(arrs).astype(np.float64)
    return stacked.mean(axis=0).astype(np.float32)


def binarize_scale_labels(values) -> np.ndarray:
    """Map graded annotations to binary: strictly positive becomes 1."""
    arr = np.asarray(values)
    return (arr > 0).astype(np.int64)


@dataclass
class Batch:
    indices: np.ndarray
    features: dict          # modality -> float32 [B x dim]
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.indices)


def make_batches(split: Split, batch_size: int, seed, drop_last: bool = True,
                 epoch: int = 0, contrastive: bool = False) -> list[Batch]:
    """Deterministically shuffled batches.

    The permutation depends only on ``seed`` and ``epoch``. Contrastive
    methods need in-batch negatives, so ``batch_size`` < 2 is rejected
    for them.
    """
    if contrastive and batch_size < 2:
        raise ConfigError("contrastive methods need batch_size >= 2 (a batch of 1 "
                          "has no negatives)")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    n = split.n_samples
    rng = np.random.default_rng([_seed_entry(seed), int(epoch)])
    order = rng.permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        feats = {m: np.ascontiguousarray(a[idx]) for m, a in split.features.items()}
        labels = split.labels[idx] if split.labels is not None else None
        batches.append(Batch(indices=idx, features=feats, labels=labels))
    return batches


def _seed_entry(seed) -> int:
    if isinstance(seed, (tuple, list)):
        raise ConfigError("seed must be a single integer")
    return int(seed)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Desk-scale stand-in for in-the-wild multi-modal data.

    Each sample mixes a class latent (plus per-sample jitter) with
    modality-independent noise at ratio ``cross_modal_correlation``, then
    maps the mix through a modality-specific linear map.
    """

    n_samples: int = 400
    n_classes: int = 4
    latent_dim: int = 12
    modality_dims: dict = field(default_factory=lambda: {"video": 48, "text": 32,
                                                         "audio": 40})
    cross_modal_correlation: float = 0.9
    label_noise: float = 0.0
    multi_label: bool = False
    seed: int = 0
    split_fractions: tuple = (0.7, 0.1, 0.2)

    def validate(self) -> None:
        if not (0.0 <= self.cross_modal_correlation <= 1.0):
            raise ConfigError("cross_modal_correlation must lie in [0, 1]")
        if not (0.0 <= self.label_noise <= 1.0):
            raise ConfigError("label_noise must lie in [0, 1]")
        if self.n_samples < 1 or self.n_classes < 2 or self.latent_dim < 1:
            raise ConfigError("n_samples, n_classes, latent_dim must be positive "
                              "(>= 2 classes)")
        for m, d in self.modality_dims.items():
            if m not in MODALITIES or int(d) <= 0:
                raise ConfigError(f"bad modality dim entry: {m}={d}")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be three values summing to 1")

    @staticmethod
    def from_dict(doc: dict) -> "SynthConfig":
        known = {f for f in SynthConfig.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown synth config fields: {sorted(extra)}")
        cfg = SynthConfig(**doc)
        if "split_fractions" in doc:
            cfg.split_fractions = tuple(doc["split_fractions"])
        cfg.validate()
        return cfg


# Noise scales for the generator: class prototypes are unit-scale, samples
# jitter around them (shared across modalities), and each modality mixes in
# its own high-power noise stream. The independent noise is strong enough
# that a single modality stays ambiguous even at high cross-modal
# correlation; the overall feature scale is kept well below 1 so
# reconstruction terms do not dominate multi-task gradients.
_SAMPLE_JITTER = 1.0
_MAP_JITTER = 0.5
_INDEP_NOISE = 12.0
_FEATURE_SCALE = 0.25


def _mixing_map(rng, out_dim: int, latent_dim: int) -> np.ndarray:
    # Identity-aligned block plus modality-specific noise: keeps matched
    # cross-modal pairs positively correlated for any seed while still
    # requiring the encoders to learn a non-trivial map.
    base = np.zeros((out_dim, latent_dim))
    for i in range(min(out_dim, latent_dim)):
        base[i, i] = 1.0
    noise = rng.normal(0.0, _MAP_JITTER / np.sqrt(latent_dim), size=(out_dim, latent_dim))
    return base + noise


def synth_generate(cfg: SynthConfig, out_dir) -> Manifest:
    """Generate a synthetic dataset on disk and return its loaded manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([int(cfg.seed), 0xD5])
    prototypes = rng.normal(0.0, 1.0, size=(cfg.n_classes, cfg.latent_dim))
    maps = {m: _mixing_map(rng, int(d), cfg.latent_dim)
            for m, d in sorted(cfg.modality_dims.items())}

    rho = cfg.cross_modal_correlation
    classes = rng.integers(0, cfg.n_classes, size=cfg.n_samples)
    records = []
    for i in range(cfg.n_samples):
        sid = f"s{i:05d}"
        shared = prototypes[classes[i]] + _SAMPLE_JITTER * rng.normal(
            0.0, 1.0, size=cfg.latent_dim)
        feats = {}
        for m in sorted(cfg.modality_dims):
            independent = rng.normal(0.0, _INDEP_NOISE, size=cfg.latent_dim)
            mix = rho * shared + (1.0 - rho) * independent
            feats[m] = (_FEATURE_SCALE * (maps[m] @ mix)).astype(np.float32)
        label = _synth_label(rng, int(classes[i]), cfg)
        records.append((sid, feats, label))

    # deterministic split by position after a seeded shuffle
    order = rng.permutation(cfg.n_samples)
    n_train = int(round(cfg.split_fractions[0] * cfg.n_samples))
    n_val = int(round(cfg.split_fractions[1] * cfg.n_samples))
    split_of = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            split_of[idx] = "train"
        elif pos < n_train + n_val:
            split_of[idx] = "val"
        else:
            split_of[idx] = "test"

    splits = {"train": [], "val": [], "test": []}
    for i, (sid, feats, label) in enumerate(records):
        entry = {"sample_id": sid, "features": {}}
        for m, vec in feats.items():
            rel = f"features/{sid}_{m}.mmft"
            write_feature_file(out_dir / rel, vec)
            entry["features"][m] = rel
        if label is not None:
            entry["label"] = label
        splits[split_of[i]].append(entry)

    doc = {
        "name": f"synth-{cfg.seed}",
        "task_type": "multi_label" if cfg.multi_label else "single_label",
        "class_names": [f"class_{c}" for c in range(cfg.n_classes)],
        "modality_dims": {m: int(d) for m, d in cfg.modality_dims.items()},
        "splits": splits,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return load_manifest(manifest_path)


def _synth_label(rng, cls: int, cfg: SynthConfig):
    if not cfg.multi_label:
        label = cls
        if cfg.label_noise > 0 and rng.random() < cfg.label_noise:
            shift = int(rng.integers(1, cfg.n_classes))
            label = (cls + shift) % cfg.n_classes
        return int(label)
    vec = [0] * cfg.n_classes
    vec[cls] = 1
    for c in range(cfg.n_classes):
        if c != cls and rng.random() < 0.25:
            vec[c] = 1
    if cfg.label_noise > 0:
        for c in range(cfg.n_classes):
            if rng.random() < cfg.label_noise:
                vec[c] = 1 - vec[c]
    if sum(vec) == 0:
        vec[cls] = 1
    return vec
