"""Model architecture: per-modality encoder stacks and the shared heads.

Every modality gets a 3-layer representation head, a 2-layer projection
head, and a 3-layer decoder mirroring the representation head; a single
1-layer clustering head is shared across modalities. All components are
created regardless of the training method so checkpoints stay
interchangeable between methods.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import MODALITIES
from .errors import ContractError, ShapeError

REPRESENTATION_DIM_DEFAULT = 4096
PROJECTION_DIM_DEFAULT = 512
CLUSTER_DIM_DEFAULT = 256

FUSION_MODES = ("concat", "mean", "vision_only")


def _init_weight(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


class LinearLayer:
    def __init__(self, rng, in_dim: int, out_dim: int, name: str):
        self.weight = Parameter(_init_weight(rng, in_dim, out_dim), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=np.float32), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear_forward(x, self.weight.value, self.bias.value)

    @property
    def params(self) -> list:
        return [self.weight, self.bias]


class MlpStack:
    """Linear layers with ReLU between them; the final layer stays linear."""

    def __init__(self, rng, dims: list, name: str):
        self.layers = [LinearLayer(rng, dims[i], dims[i + 1], f"{name}.{i}")
                       for i in range(len(dims) - 1)]
        self.in_dim = dims[0]
        self.out_dim = dims[-1]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return h

    @property
    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params]


class RepresentationHead(MlpStack):
    """3-layer per-modality encoder producing the downstream representation."""

    def __init__(self, rng, in_dim: int, out_dim: int = REPRESENTATION_DIM_DEFAULT,
                 name: str = "repr"):
        super().__init__(rng, [in_dim, out_dim, out_dim, out_dim], name)


class ProjectionHead(MlpStack):
    """2-layer map from representations into the contrastive space."""

    def __init__(self, rng, in_dim: int, out_dim: int = PROJECTION_DIM_DEFAULT,
                 name: str = "proj"):
        super().__init__(rng, [in_dim, out_dim, out_dim], name)


class ClusteringHead(MlpStack):
    """Single linear layer shared by all modalities."""

    def __init__(self, rng, in_dim: int, out_dim: int = CLUSTER_DIM_DEFAULT,
                 name: str = "cluster"):
        super().__init__(rng, [in_dim, out_dim], name)


class Decoder(MlpStack):
    """3-layer mirror of the representation head, back to input features."""

    def __init__(self, rng, representation_dim: int, feature_dim: int,
                 name: str = "decoder"):
        super().__init__(rng, [representation_dim, representation_dim,
                               representation_dim, feature_dim], name)


class ClassifierHead(MlpStack):
    """Single linear layer from the fused representation to class logits."""

    def __init__(self, rng, in_dim: int, n_classes: int, name: str = "classifier"):
        super().__init__(rng, [in_dim, n_classes], name)


def fuse_for_classifier(representations: dict, mode: str = "concat") -> Tensor:
    """Combine per-modality representations for the downstream classifier.

    ``concat`` stacks modalities in canonical order, ``mean`` averages
    them elementwise, and ``vision_only`` passes the video representation
    through untouched.
    """
    if mode not in FUSION_MODES:
        raise ContractError(f"unknown fusion mode '{mode}' (expected {FUSION_MODES})")
    if mode == "vision_only":
        if "video" not in representations:
            raise ContractError("vision_only fusion needs the video modality")
        return representations["video"]
    present = [m for m in MODALITIES if m in representations]
    if not present:
        raise ContractError("fuse_for_classifier got no modalities")
    tensors = [representations[m] for m in present]
    if mode == "concat":
        return ad.concat(tensors, axis=1)
    dims = {t.shape[1] for t in tensors}
    if len(dims) != 1:
        raise ShapeError(f"mean fusion needs equal dims, got {sorted(dims)}")
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(tensors))


class ModelBundle:
    """All heads for one model, keyed by modality.

    Components not on the active method's loss path still exist so that
    checkpoints can be reloaded under any method.
    """

    def __init__(self, modality_dims: dict, representation_dim: int,
                 projection_dim: int, cluster_dim: int, seed: int,
                 method: str = "ConCluGen", n_classes: int | None = None,
                 fusion: str = "concat"):
        self.modality_dims = {m: int(d) for m, d in modality_dims.items()}
        self.representation_dim = int(representation_dim)
        self.projection_dim = int(projection_dim)
        self.cluster_dim = int(cluster_dim)
        self.seed = int(seed)
        self.method = str(method)

        rng = np.random.default_rng([int(seed), 0x11])
        self.modalities = tuple(m for m in MODALITIES if m in self.modality_dims)
        self.representation = {}
        self.projection = {}
        self.decoder = {}
        for m in self.modalities:
            dim = self.modality_dims[m]
            self.representation[m] = RepresentationHead(
                rng, dim, representation_dim, name=f"repr.{m}")
            self.projection[m] = ProjectionHead(
                rng, representation_dim, projection_dim, name=f"proj.{m}")
            self.decoder[m] = Decoder(
                rng, representation_dim, dim, name=f"decoder.{m}")
        self.clustering = ClusteringHead(rng, projection_dim, cluster_dim,
                                         name="cluster")
        self.classifier = None
        if n_classes is not None:
            self.attach_classifier(n_classes, fusion, rng=rng)

    # -- forward ---------------------------------------------------------------

    def encode(self, features: dict) -> dict:
        """Per-modality representations from raw feature batches."""
        out = {}
        for m, x in features.items():
            if m not in self.representation:
                raise ContractError(f"bundle has no representation head for '{m}'")
            t = x if isinstance(x, Tensor) else Tensor.leaf(x)
            if t.shape[1] != self.modality_dims[m]:
                raise ShapeError(f"modality '{m}': expected dim {self.modality_dims[m]}, "
                                 f"got {t.shape[1]}")
            out[m] = self.representation[m](t)
        return out

    def project(self, representations: dict) -> dict:
        return {m: self.projection[m](d) for m, d in representations.items()}

    def cluster_embed(self, projections: dict) -> dict:
        """Shared clustering head applied to every modality's projection."""
        return {m: self.clustering(p) for m, p in projections.items()}

    def decode(self, representations: dict) -> dict:
        return {m: self.decoder[m](d) for m, d in representations.items()}

    def fuse_for_classifier(self, representations: dict, mode: str = "concat") -> Tensor:
        return fuse_for_classifier(representations, mode)

    # -- plumbing ----------------------------------------------------------------

    def attach_classifier(self, n_classes: int, fusion: str = "concat", rng=None) -> None:
        if fusion not in FUSION_MODES:
            raise ContractError(f"unknown fusion mode '{fusion}'")
        in_dim = self.representation_dim
        if fusion == "concat":
            in_dim = self.representation_dim * len(self.modalities)
        if rng is None:
            rng = np.random.default_rng([self.seed, 0x12])
        self.classifier = ClassifierHead(rng, in_dim, int(n_classes))

    def pretrain_parameters(self) -> list:
        """Every parameter except the downstream classifier."""
        params = []
        for m in self.modalities:
            params.extend(self.representation[m].params)
            params.extend(self.projection[m].params)
            params.extend(self.decoder[m].params)
        params.extend(self.clustering.params)
        return params

    def named_parameters(self) -> dict:
        params = self.pretrain_parameters()
        if self.classifier is not None:
            params = params + self.classifier.params
        return {p.name: p for p in params}

    def config_snapshot(self) -> dict:
        return {
            "modality_dims": dict(self.modality_dims),
            "representation_dim": self.representation_dim,
            "projection_dim": self.projection_dim,
            "cluster_dim": self.cluster_dim,
            "seed": self.seed,
            "method": self.method,
        }

    @staticmethod
    def from_config(snapshot: dict) -> "ModelBundle":
        return ModelBundle(
            modality_dims=snapshot["modality_dims"],
            representation_dim=snapshot["representation_dim"],
            projection_dim=snapshot["projection_dim"],
            cluster_dim=snapshot["cluster_dim"],
            seed=snapshot["seed"],
            method=snapshot.get("method", "ConCluGen"),
        )

    def load_tensors(self, tensors: dict) -> None:
        """Overwrite parameter values from a name->array mapping."""
        named = self.named_parameters()
        for name, param in named.items():
            if name not in tensors:
                raise ContractError(f"missing tensor '{name}' in checkpoint payload")
            arr = tensors[name]
            if tuple(arr.shape) != tuple(param.value.shape):
                raise ShapeError(f"tensor '{name}': checkpoint shape {arr.shape} != "
                                 f"model shape {param.value.shape}")
            param.value.data[...] = arr
